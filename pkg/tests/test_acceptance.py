"""Acceptance criteria 1-11, each printing one PASS/FAIL line.

Criteria 5-10 are built as functions of a seed returning a SweepResult;
the first run of each is cached for the session, and criterion 11 reruns
all of them from scratch and compares the exported CSV bytes.

Desk-scale training sizes (see the decisions ledger):
FBM-CENet 200 epochs x 200 channels, detectors 1000 epochs x 500 vectors.
"""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fewbit.bussgang import sigma_y_onebit, sigma_y_onebit_complex
from fewbit.core import SystemConfig, complex_normal
from fewbit.harness import Moments, SweepResult, export_csv, run_ber_sweep, run_nmse_sweep
from fewbit.likelihood import _log_diff_ndtr, exhaustive_ml_detect_batch, hard_decision
from fewbit.networks import fbm_detnet_forward, init_cenet_params, init_detnet_params
from fewbit.training import TrainConfig, sample_det_batch, train_cenet, train_detnet
from fewbit.verify import (
    DEFAULT_TOLERANCES,
    backprop_errors,
    check_likelihood_gradients,
    check_sigmoid,
    unfolding_errors,
)

SEED = 2024
GRID = (0.0, 5.0, 10.0, 15.0, 20.0)
CE_TRAIN = TrainConfig(epochs=200, batch=200)
DET_TRAIN = TrainConfig(epochs=1000, batch=500)
FIG7 = SystemConfig(N=32, K=4, Tt=20, bits=2, snr_db=0.0)
FIG9 = SystemConfig(N=32, K=4, Tt=20, bits=1, snr_db=0.0, constellation="QPSK")


def report(n: int, passed: bool, text: str, elapsed: float | None = None, budget: float | None = None):
    timing = "" if elapsed is None else f" [{elapsed:.1f} s" + (f" / budget {budget:.0f} s]" if budget else "]")
    print(f"\n{'PASS' if passed else 'FAIL'} criterion {n}: {text}{timing}")


def csv_bytes(result: SweepResult, tmp: Path, name: str) -> bytes:
    path = tmp / name
    export_csv(result, path)
    return path.read_bytes()


def db(x):
    return 10 * np.log10(x)


# --------------------------------------------------------------------------
# experiments for criteria 5-10 (pure functions of the seed)
# --------------------------------------------------------------------------

def exp_arcsine(seed):
    """Real pairs at correlations {0, 0.5, 0.9} plus the complex one-bit form."""
    rng = np.random.default_rng(seed)
    n = 10**6
    d = np.sqrt(2.0)
    res = SweepResult()
    z = {}
    for c in (0.0, 0.5, 0.9):
        S = np.array([[1.0, c], [c, 1.0]])
        r = rng.standard_normal((n, 2)) @ np.linalg.cholesky(S).T
        y = np.where(r > 0, d / 2, -d / 2)
        m = Moments().add(y[:, 0] * y[:, 1])
        res.add(c, "real", "cov", m)
        z[("real", c)] = abs(m.mean - sigma_y_onebit(S, d)[0, 1]) / m.std_error
        # complex pair with correlation c (real) and c / 2 (imaginary part), unit-variance entries
        cc = c + 0.5j * c if c < 0.9 else 0.9 + 0.0j
        w1 = complex_normal(rng, (n,))
        w2 = cc.conjugate() * w1 + np.sqrt(1 - abs(cc) ** 2) * complex_normal(rng, (n,))
        q = lambda v: (np.sign(v.real) + 1j * np.sign(v.imag)) * d / 2  # noqa: E731
        prod = q(w1) * np.conj(q(w2))
        Sc = np.array([[1.0, cc], [np.conj(cc), 1.0]])
        theory = sigma_y_onebit_complex(Sc, d)[0, 1]
        for part, vals, th in (("re", prod.real, theory.real), ("im", prod.imag, theory.imag)):
            m = Moments().add(vals)
            res.add(c, f"complex-{part}", "cov", m)
            z[(f"complex-{part}", c)] = abs(m.mean - th) / m.std_error
    return res, z


def exp_ml_oracle(seed):
    cfg = SystemConfig(N=4, K=2, Tt=4, bits=2, snr_db=15.0, constellation="QPSK")
    params, _ = train_detnet(cfg, DET_TRAIN, init_detnet_params(cfg, "fbm-detnet"), seed=seed)
    d = sample_det_batch(cfg, np.random.default_rng(seed + 1), 1000)
    x_net, _ = hard_decision(fbm_detnet_forward(d.q_up, d.q_low, d.H, params), cfg.constellation)
    x_ml, v_ml = exhaustive_ml_detect_batch(d.H, d.q_up, d.q_low, cfg.rho, cfg.constellation)
    g = np.sqrt(2.0 * cfg.rho)
    u = np.einsum("bij,bj->bi", d.H, x_net)
    v_net = _log_diff_ndtr(g * (d.q_up - u), g * (d.q_low - u)).sum(axis=-1)
    agree = np.all(x_net == x_ml, axis=1).astype(float)
    res = SweepResult()
    res.add(15.0, "fbm-detnet", "ml-agreement", Moments().add(agree))
    res.add(15.0, "fbm-detnet", "ml-loglik-excess", Moments().add(np.maximum(v_net - v_ml, 0.0)))
    return res, float(agree.mean()), float(np.max(v_net - v_ml))


def train_cenets(cfg, snrs, seed, trainable_pilot=False):
    tcfg = replace(CE_TRAIN, trainable_pilot=trainable_pilot)
    out = {}
    for i, snr in enumerate(snrs):
        c = cfg.replace(snr_db=snr)
        out[float(snr)], _ = train_cenet(c, tcfg, init_cenet_params(c), seed=seed + i)
    return out


def exp_fig7(seed):
    models = train_cenets(FIG7, GRID, seed)
    res = run_nmse_sweep(FIG7, GRID, methods=("bmmse", "bwzf", "ga-ml", "fbm-cenet"), trials=1000,
                         models=models, seed=seed)
    return res, models


def exp_fig8(seed, fixed_models):
    learned = train_cenets(FIG7, GRID, seed + 100, trainable_pilot=True)
    fixed = run_nmse_sweep(FIG7, GRID, methods=("fbm-cenet",), trials=1000, models=fixed_models, seed=seed)
    trained = run_nmse_sweep(FIG7, GRID, methods=("fbm-cenet",), trials=1000, models=learned, seed=seed)
    res = SweepResult(list(fixed.rows) + [replace(r, method="fbm-cenet-learned-pilot") for r in trained.rows])
    return res


def exp_fig9(seed):
    snrs = (0.0, 5.0, 10.0)
    models = {"b-detnet": {}, "fbm-detnet": {}}
    for i, snr in enumerate(snrs):
        c = FIG9.replace(snr_db=snr)
        for kind in models:
            models[kind][snr], _ = train_detnet(c, DET_TRAIN, init_detnet_params(c, kind), seed=seed + i)
    pairs = [("b-detnet", "fbm-detnet"), ("bmmse", "b-detnet")]
    return run_ber_sweep(FIG9, snrs, methods=("bmmse", "b-detnet", "fbm-detnet"), trials=10**5, models=models,
                         seed=seed, pairs=pairs)


def exp_resolution(seed, b2_model):
    res = SweepResult()
    for b in (1, 2, 3):
        cfg = FIG7.replace(bits=b, snr_db=10.0)
        model = b2_model if b == 2 else train_cenets(cfg, [10.0], seed + b)[10.0]
        r = run_nmse_sweep(cfg, [10.0], trials=1000, models={10.0: model}, seed=seed)
        res.rows += [replace(row, method=f"{row.method}@b{b}") for row in r.rows]
    return res


# --------------------------------------------------------------------------
# session cache: first run of each experiment, with its wall time
# --------------------------------------------------------------------------

_CACHE: dict = {}


def cached(key, fn):
    if key not in _CACHE:
        t = time.perf_counter()
        value = fn()
        _CACHE[key] = (value, time.perf_counter() - t)
    return _CACHE[key]


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


# --------------------------------------------------------------------------
# criteria
# --------------------------------------------------------------------------

class TestAcceptance:
    def test_01_sigmoid_bound(self):
        t0 = time.perf_counter()
        r = check_sigmoid(DEFAULT_TOLERANCES, 0)
        dt = time.perf_counter() - t0
        ok = r.error <= 0.0095 and dt < 1.0
        report(1, ok, f"max |Phi(t) - s(1.702 t)| = {r.error:.6f} (<= 0.0095)", dt, 1)
        assert ok

    def test_02_likelihood_gradients(self):
        t0 = time.perf_counter()
        r = check_likelihood_gradients({"fd_likelihood": 1e-5}, SEED, instances=100)
        dt = time.perf_counter() - t0
        ok = r.passed and dt < 10.0
        report(2, ok, f"worst relative error {r.error:.2e} over 100 instances (< 1e-5)", dt, 10)
        assert ok

    def test_03_backprop(self):
        t0 = time.perf_counter()
        errs = backprop_errors(SEED)
        dt = time.perf_counter() - t0
        name, worst = max(errs.items(), key=lambda kv: kv[1])
        ok = worst < 1e-4 and dt < 30.0
        report(3, ok, f"{len(errs)} adjoints (alpha, beta, t, pilot via soft quantizer), worst {name} = {worst:.2e} "
                      f"(< 1e-4)", dt, 30)
        assert ok

    def test_04_unfolding(self):
        t0 = time.perf_counter()
        errs = unfolding_errors(SEED)
        dt = time.perf_counter() - t0
        name, worst = max(errs.items(), key=lambda kv: kv[1])
        ok = worst < 1e-10 and dt < 5.0
        report(4, ok, f"{len(errs)} networks, worst {name} max deviation {worst:.2e} (< 1e-10)", dt, 5)
        assert ok

    def test_05_arcsine(self, outdir):
        (res, z), dt = cached("c5", lambda: exp_arcsine(SEED))
        worst_key = max(z, key=z.get)
        ok = z[worst_key] < 3.0 and dt < 30.0
        report(5, ok, f"10^6 draws, worst |MC - theory| = {z[worst_key]:.2f} std errors at {worst_key} (< 3)",
               dt, 30)
        assert ok

    def test_06_ml_oracle(self):
        (res, agree, excess), dt = cached("c6", lambda: exp_ml_oracle(SEED))
        ok = agree >= 0.9 and excess <= 1e-12 and dt < 300
        report(6, ok, f"N=4 K=2 QPSK b=2 15 dB: agreement with exhaustive ML {agree:.3f} (>= 0.90), "
                      f"max net - ML exact log-likelihood {excess:.2e} (<= 0)", dt, 300)
        assert ok

    @pytest.mark.slow
    def test_07_fig7(self):
        (res, _), dt = cached("c7", lambda: exp_fig7(SEED))
        worst = np.inf
        parts = []
        for snr in GRID:
            net = res.get(snr, "fbm-cenet")
            for m in ("bmmse", "bwzf"):
                ref = res.get(snr, m)
                z = (ref.value - net.value) / np.hypot(ref.std_error, net.std_error)
                worst = min(worst, z)
            parts.append(f"{snr:g}dB {db(net.value):.2f}/{db(res.get(snr, 'bwzf').value):.2f}/"
                         f"{db(res.get(snr, 'bmmse').value):.2f}")
        ok = worst > 2.0 and dt < 900
        report(7, ok, f"FBM-CENet/BWZF/BMMSE NMSE dB: {'; '.join(parts)}; smallest margin {worst:.1f} combined "
                      f"std errors (> 2)", dt, 900)
        assert ok

    @pytest.mark.slow
    def test_08_fig8(self):
        (_, fixed_models), t7 = cached("c7", lambda: exp_fig7(SEED))
        res, dt = cached("c8", lambda: exp_fig8(SEED, fixed_models))
        # both trainings count: the fixed-pilot training time is the criterion 7 share spent on it
        total = dt + t7
        worst = -np.inf
        for snr in GRID:
            gap = db(res.get(snr, "fbm-cenet-learned-pilot").value) - db(res.get(snr, "fbm-cenet").value)
            worst = max(worst, gap)
        ok = worst <= 0.5 and total < 1800
        report(8, ok, f"learned-pilot minus DFT-pilot NMSE, worst {worst:+.3f} dB over {len(GRID)} SNRs (<= +0.5)",
               total, 1800)
        assert ok

    @pytest.mark.slow
    def test_09_fig9(self):
        res, dt = cached("c9", lambda: exp_fig9(SEED))
        parts, worst_paired, worst_indep = [], np.inf, np.inf
        for snr in (0.0, 5.0, 10.0):
            rows = {m: res.get(snr, m) for m in ("bmmse", "b-detnet", "fbm-detnet")}
            for hi, lo in (("b-detnet", "fbm-detnet"), ("bmmse", "b-detnet")):
                g = res.gap(snr, hi, lo)
                worst_paired = min(worst_paired, g.mean / g.std_error)
                worst_indep = min(worst_indep, g.mean / np.hypot(rows[hi].std_error, rows[lo].std_error))
            parts.append(f"{snr:g}dB " + "/".join(f"{rows[m].value:.2e}" for m in ("fbm-detnet", "b-detnet", "bmmse")))
        ok = worst_paired > 2.0 and dt < 1200
        report(9, ok, f"BER FBM-DetNet/B-DetNet/BMMSE: {'; '.join(parts)}; smallest gap {worst_paired:.1f} paired "
                      f"std errors (> 2; {worst_indep:.1f} if errors were independent)", dt, 1200)
        assert ok

    @pytest.mark.slow
    def test_10_resolution(self):
        (_, models), _ = cached("c7", lambda: exp_fig7(SEED))
        res, dt = cached("c10", lambda: exp_resolution(SEED, models[10.0]))
        worst, parts = np.inf, []
        for m in ("bmmse", "bwzf", "ga-ml", "fbm-cenet"):
            r = {b: res.get(10.0, f"{m}@b{b}") for b in (1, 2, 3)}
            for lo, hi in ((3, 2), (2, 1)):
                slack = (r[hi].value + 2 * np.hypot(r[hi].std_error, r[lo].std_error)) - r[lo].value
                worst = min(worst, slack)
            parts.append(f"{m} " + "/".join(f"{db(r[b].value):.2f}" for b in (3, 2, 1)))
        ok = worst >= 0 and dt < 1200
        report(10, ok, f"NMSE dB b=3/2/1 at 10 dB: {'; '.join(parts)}; monotone within 2 std errors", dt, 1200)
        assert ok

    @pytest.mark.slow
    def test_11_determinism(self, outdir):
        first = {
            5: cached("c5", lambda: exp_arcsine(SEED))[0][0],
            6: cached("c6", lambda: exp_ml_oracle(SEED))[0][0],
            7: cached("c7", lambda: exp_fig7(SEED))[0][0],
        }
        fixed_models = cached("c7", lambda: exp_fig7(SEED))[0][1]
        first[8] = cached("c8", lambda: exp_fig8(SEED, fixed_models))[0]
        first[9] = cached("c9", lambda: exp_fig9(SEED))[0]
        first[10] = cached("c10", lambda: exp_resolution(SEED, fixed_models[10.0]))[0]
        t0 = time.perf_counter()
        again_fig7, again_models = exp_fig7(SEED)
        again = {
            5: exp_arcsine(SEED)[0],
            6: exp_ml_oracle(SEED)[0],
            7: again_fig7,
            8: exp_fig8(SEED, again_models),
            9: exp_fig9(SEED),
            10: exp_resolution(SEED, again_models[10.0]),
        }
        dt = time.perf_counter() - t0
        same = {k: csv_bytes(first[k], outdir, f"c{k}_a.csv") == csv_bytes(again[k], outdir, f"c{k}_b.csv")
                for k in first}
        ok = all(same.values())
        report(11, ok, "byte-identical CSVs on rerun: " + ", ".join(f"{k}={'yes' if v else 'NO'}"
                                                                    for k, v in same.items()), dt)
        assert ok
