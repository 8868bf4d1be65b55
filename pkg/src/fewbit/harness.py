"""Monte-Carlo NMSE/BER sweeps and CSV export.

Every sweep point draws its trials in fixed-size chunks, each from its own
RNG substream spawned from ``(seed, point)``.  Accumulation is a plain sum
of values and squares, so the result does not depend on chunk order.
All methods at a point see the same channel/noise draws (paired
comparison), which keeps method differences far tighter than the
per-method standard errors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bussgang import (
    bmmse_detect,
    bmmse_matrix,
    bussgang_gain,
    bwzf_estimate,
    bwzf_weights,
    linearize_detection,
    regularize,
    sigma_r_training,
    sigma_y,
)
from .core import (
    PilotSet,
    SystemConfig,
    build_dft_pilot,
    complex_normal,
    expand_pilot,
    level_indices_to_bits,
    sample_symbols,
    stack_vectors,
)
from .likelihood import (
    LikelihoodContext,
    exhaustive_ml_detect_batch,
    gradient_ascent_channel,
    hard_decision,
    lipschitz_step,
)
from .networks import (
    CENetParams,
    DetNetParams,
    antenna_rows_to_complex,
    b_detnet_forward,
    complex_to_antenna_rows,
    fbm_cenet_forward,
    fbm_detnet_forward,
)
from .quantizer import QuantizerSpec, bin_bounds, make_quantizer, quantize_hard
from .training import stack_channel

NMSE_METHODS = ("bmmse", "bwzf", "ga-ml", "fbm-cenet")
BER_METHODS = ("bmmse", "b-detnet", "fbm-detnet", "ml")
CSV_HEADER = ("snr_db", "method", "metric", "value", "trials", "std_error")


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def nmse_samples(H_hat, H) -> np.ndarray:
    """Per-realization ||H_hat - H||_F^2 / (K N) over the last two axes."""
    H_hat, H = np.asarray(H_hat), np.asarray(H)
    if H_hat.shape != H.shape:
        raise ValueError(f"shape mismatch: {H_hat.shape} vs {H.shape}")
    if H.ndim < 2 or H.size == 0:
        raise ValueError("need a non-empty set of matrices")
    N, K = H.shape[-2], H.shape[-1]
    err = np.abs(H_hat - H) ** 2
    return err.reshape(err.shape[:-2] + (-1,)).sum(axis=-1) / (K * N)


def nmse(H_hat, H, K: int | None = None, N: int | None = None) -> float:
    """Mean of ||H_hat - H||_F^2 / (K N) over the set.

    ``K`` and ``N`` default to the trailing matrix shape (N x K).
    """
    H = np.asarray(H)
    if H.size == 0:
        raise ValueError("empty set")
    s = nmse_samples(H_hat, H)
    scale = H.shape[-1] * H.shape[-2] / ((K or H.shape[-1]) * (N or H.shape[-2]))
    return float(np.mean(s) * scale)


def ber(bits_hat, bits) -> float:
    """Fraction of differing bits."""
    bits_hat, bits = np.asarray(bits_hat), np.asarray(bits)
    if bits_hat.shape != bits.shape:
        raise ValueError(f"length mismatch: {bits_hat.shape} vs {bits.shape}")
    if bits.size == 0:
        raise ValueError("no bits")
    return float(np.mean(bits_hat != bits))


@dataclass
class Moments:
    """Associative accumulator for a mean and its standard error."""

    n: int = 0
    s: float = 0.0
    ss: float = 0.0

    def add(self, values) -> "Moments":
        v = np.asarray(values, dtype=float).ravel()
        self.n += v.size
        self.s += float(v.sum())
        self.ss += float(np.dot(v, v))
        return self

    def merge(self, other: "Moments") -> "Moments":
        return Moments(self.n + other.n, self.s + other.s, self.ss + other.ss)

    @property
    def mean(self) -> float:
        return self.s / self.n

    @property
    def std_error(self) -> float:
        if self.n < 2:
            return 0.0
        var = max(self.ss - self.s * self.s / self.n, 0.0) / (self.n - 1)
        return math.sqrt(var / self.n)


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    snr_db: float
    method: str
    metric: str
    value: float
    trials: int
    std_error: float


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    # paired per-trial differences (snr_db, a, b) -> Moments of metric_a - metric_b; not exported
    gaps: dict = field(default_factory=dict)

    def add(self, snr_db, method, metric, m: Moments) -> None:
        self.rows.append(SweepRow(float(snr_db), method, metric, m.mean, m.n, m.std_error))

    def extend(self, other: "SweepResult") -> "SweepResult":
        self.rows.extend(other.rows)
        self.gaps.update(other.gaps)
        return self

    def gap(self, snr_db, a: str, b: str) -> Moments:
        """Paired difference a - b over common trials, if it was recorded."""
        return self.gaps[(float(snr_db), a, b)]

    def get(self, snr_db, method) -> SweepRow:
        for r in self.rows:
            if r.method == method and r.snr_db == float(snr_db):
                return r
        raise KeyError((snr_db, method))

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    @property
    def snrs(self) -> list[float]:
        return list(dict.fromkeys(r.snr_db for r in self.rows))


def export_csv(result: SweepResult, path, gnuplot: bool = False) -> None:
    """Write rows as ``snr_db,method,metric,value,trials,std_error`` (LF, repr floats).

    With ``gnuplot`` a whitespace-separated wide table is written instead:
    one line per SNR, a ``value`` and ``std_error`` column pair per method.
    """
    path = Path(path)
    if gnuplot:
        methods = result.methods
        cols = ["snr_db"] + [f"{m}:{k}" for m in methods for k in ("value", "std_error")]
        lines = ["# " + " ".join(cols)]
        for snr in result.snrs:
            cells = [repr(snr)]
            for m in methods:
                try:
                    r = result.get(snr, m)
                    cells += [repr(r.value), repr(r.std_error)]
                except KeyError:
                    cells += ["NaN", "NaN"]
            lines.append(" ".join(cells))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        return
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in result.rows:
            w.writerow([repr(r.snr_db), r.method, r.metric, repr(r.value), r.trials, repr(r.std_error)])


def read_csv(path) -> SweepResult:
    with Path(path).open(encoding="utf-8", newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [SweepRow(float(a), b, c, float(d), int(e), float(g)) for a, b, c, d, e, g in rd]
    return SweepResult(rows)


def _point_rngs(seed, n_points: int, n_chunks: int):
    """rngs[point][chunk], independent of how many points or chunks follow."""
    root = np.random.SeedSequence(seed)
    return [[np.random.default_rng(c) for c in p.spawn(n_chunks)] for p in root.spawn(n_points)]


def _chunks(trials: int, chunk: int):
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sizes = [chunk] * (trials // chunk)
    if trials % chunk:
        sizes.append(trials % chunk)
    return sizes


# --------------------------------------------------------------------------
# channel estimation
# --------------------------------------------------------------------------

class ChannelEstimators:
    """Linear and likelihood-based estimators in the per-antenna layout.

    With P = X^T kron I_N the training model splits into N independent
    problems sharing the real design D = stack(X^T), so observations are
    handled as (..., N, 2 Tt) arrays and estimates as (..., N, 2 K).
    """

    def __init__(self, cfg: SystemConfig, pilot: PilotSet, spec: QuantizerSpec, ga_steps: int = 8):
        self.cfg, self.pilot, self.spec = cfg, pilot, spec
        D = pilot.antenna_design
        self.D = D
        self.Sr = sigma_r_training(D, 0.5, cfg.N0)
        self.V = bussgang_gain(np.diag(self.Sr), spec)
        self.A = self.V[:, None] * D
        self.W_bmmse = bmmse_matrix(self.A, regularize(sigma_y(self.Sr, spec, self.V)))
        self.ga_steps = ga_steps
        self.ga_step = lipschitz_step(D, cfg.rho)

    def bmmse(self, y, q_up=None, q_low=None):
        return y @ self.W_bmmse.T

    def bwzf(self, y, q_up, q_low):
        w = bwzf_weights(y, q_low, q_up, np.diag(self.Sr), self.V, self.cfg.N0)
        return bwzf_estimate(y, self.A, w)

    def ga_ml(self, y, q_up, q_low):
        ctx = LikelihoodContext(self.D, q_up, q_low, self.cfg.rho)
        return gradient_ascent_channel(ctx, self.ga_step, self.ga_steps)


def observe_training(Hc, Zc, pilot: PilotSet, spec: QuantizerSpec):
    """Quantized training observation per antenna: (y, q_up, q_low) of shape (..., N, 2 Tt)."""
    R = Hc @ pilot.X + Zc
    y = quantize_hard(complex_to_antenna_rows(R), spec)
    q_low, q_up = bin_bounds(y, spec)
    return y, q_up, q_low


def estimate_channel(method: str, est: ChannelEstimators, y, q_up, q_low, params: CENetParams | None = None):
    """Complex channel estimate (..., N, K) from one training observation."""
    if method == "bmmse":
        h = est.bmmse(y)
    elif method == "bwzf":
        h = est.bwzf(y, q_up, q_low)
    elif method == "ga-ml":
        h = est.ga_ml(y, q_up, q_low)
    elif method == "fbm-cenet":
        if params is None:
            raise ValueError("fbm-cenet needs trained parameters")
        h = fbm_cenet_forward(q_up, q_low, expand_pilot(params.pilot, est.cfg.N), params)
    else:
        raise ValueError(f"unknown estimation method {method!r}")
    return antenna_rows_to_complex(h)


def _learned(models, method, snr):
    try:
        return models[float(snr)]
    except (KeyError, TypeError):
        raise KeyError(f"missing trained parameters for {method} at {snr} dB") from None


def run_nmse_sweep(cfg: SystemConfig, snrs, methods=NMSE_METHODS, trials: int = 10 ** 4,
                   models: dict | None = None, seed=None, chunk: int = 1000, ga_steps: int = 8) -> SweepResult:
    """NMSE per (SNR, method).

    ``models`` maps SNR in dB to trained :class:`CENetParams`; a learned
    method's own pilot (possibly trained) is used for its observations, all
    other methods use the DFT pilot.
    """
    for m in methods:
        if m not in NMSE_METHODS:
            raise ValueError(f"unknown estimation method {m!r}")
    seed = cfg.seed if seed is None else seed
    snrs = list(snrs)
    sizes = _chunks(trials, chunk)
    rngs = _point_rngs(seed, len(snrs), len(sizes))
    result = SweepResult()
    for pi, snr in enumerate(snrs):
        c = cfg.replace(snr_db=snr)
        spec = make_quantizer(c.bits, c.quantizer_scale)
        dft = build_dft_pilot(c)
        params = _learned(models, "fbm-cenet", snr) if "fbm-cenet" in methods else None
        est = ChannelEstimators(c, dft, spec, ga_steps)
        acc = {m: Moments() for m in methods}
        for rng, n in zip(rngs[pi], sizes):
            Hc = complex_normal(rng, (n, c.N, c.K))
            Zc = complex_normal(rng, (n, c.N, c.Tt), c.N0)
            obs_dft = observe_training(Hc, Zc, dft, spec)
            for m in methods:
                if m == "fbm-cenet" and not np.array_equal(params.pilot, dft.X):
                    obs = observe_training(Hc, Zc, expand_pilot(params.pilot, c.N), spec)
                else:
                    obs = obs_dft
                acc[m].add(nmse_samples(estimate_channel(m, est, *obs, params=params), Hc))
        for m in methods:
            result.add(snr, m, "nmse", acc[m])
    return result


# --------------------------------------------------------------------------
# detection
# --------------------------------------------------------------------------

def detect(method: str, H_used, y, q_up, q_low, cfg: SystemConfig, spec: QuantizerSpec, params=None,
           max_candidates: int = 10 ** 5):
    """Soft symbol estimates (B, 2K) from quantized data and the channel the receiver believes in.

    ``H_used`` is the real stacked (B, 2N, 2K) channel (true or estimated);
    nothing else about the channel is visible here.
    """
    if method == "bmmse":
        return bmmse_detect(y, H_used, cfg.N0, spec)
    if method == "b-detnet":
        A, Sn = linearize_detection(H_used, cfg.N0, spec)
        return b_detnet_forward(y, A, Sn, params)
    if method == "fbm-detnet":
        return fbm_detnet_forward(q_up, q_low, H_used, params)
    if method == "ml":
        x, _ = exhaustive_ml_detect_batch(H_used, q_up, q_low, cfg.rho, cfg.constellation,
                                          max_candidates=max_candidates)
        return x
    raise ValueError(f"unknown detection method {method!r}")


def _bits_from_estimate(x_hat, cfg: SystemConfig):
    """(B, 2K) stacked estimates -> (B, K, bits per symbol) Gray bits."""
    K = cfg.K
    _, idx = hard_decision(x_hat, cfg.constellation)
    idx_c = np.stack([idx[..., :K], idx[..., K:]], axis=-1)  # (B, K, 2) re/im level indices
    return level_indices_to_bits(idx_c, cfg.constellation).reshape(x_hat.shape[0], K, -1)


def run_ber_sweep(cfg: SystemConfig, snrs, methods=("bmmse", "b-detnet", "fbm-detnet"), trials: int = 10 ** 5,
                  models: dict | None = None, csi: str = "perfect", cenet_models: dict | None = None,
                  seed=None, chunk: int = 2000, max_candidates: int = 10 ** 5, pairs=()) -> SweepResult:
    """BER per (SNR, method), one fresh channel per symbol vector.

    ``models`` maps method -> {SNR in dB -> DetNetParams}.  With
    ``csi="estimated"`` each channel is first estimated by FBM-CENet
    (``cenet_models``: SNR -> CENetParams) from its own quantized pilot
    block, and detectors only ever see that estimate.  Every method sees
    the same channels, symbols and noise, so ``pairs`` of methods (a, b)
    also get the moments of their per-vector BER difference in
    ``result.gaps``.
    """
    if csi not in ("perfect", "estimated"):
        raise ValueError(f"csi must be 'perfect' or 'estimated', got {csi!r}")
    for m in methods:
        if m not in BER_METHODS:
            raise ValueError(f"unknown detection method {m!r}")
    for ab in pairs:
        if any(m not in methods for m in ab):
            raise ValueError(f"paired methods {ab} must both be in the sweep")
    models = models or {}
    seed = cfg.seed if seed is None else seed
    snrs = list(snrs)
    sizes = _chunks(trials, chunk)
    rngs = _point_rngs(seed, len(snrs), len(sizes))
    result = SweepResult()
    for pi, snr in enumerate(snrs):
        c = cfg.replace(snr_db=snr)
        spec = make_quantizer(c.bits, c.quantizer_scale)
        learned = {m: _learned(models.get(m), m, snr) for m in methods if m in ("b-detnet", "fbm-detnet")}
        ce = _learned(cenet_models, "fbm-cenet", snr) if csi == "estimated" else None
        acc = {m: Moments() for m in methods}
        diff = {ab: Moments() for ab in pairs}
        for rng, n in zip(rngs[pi], sizes):
            Hc = complex_normal(rng, (n, c.N, c.K))
            sym, bits = sample_symbols(c, n, rng)
            Z = complex_normal(rng, (n, c.N), c.N0)
            r = np.einsum("bnk,bk->bn", Hc, sym) + Z
            y = quantize_hard(stack_vectors(r), spec)
            q_low, q_up = bin_bounds(y, spec)
            if csi == "estimated":
                H_used = stack_channel(estimate_csi(Hc, ce, c, spec, rng))
            else:
                H_used = stack_channel(Hc)
            per_vec = {}
            for m in methods:
                x_hat = detect(m, H_used, y, q_up, q_low, c, spec, learned.get(m), max_candidates)
                errs = _bits_from_estimate(x_hat, c) != bits
                per_vec[m] = errs.reshape(n, -1).mean(axis=1)
                acc[m].add(per_vec[m])
            for a, b in pairs:
                diff[(a, b)].add(per_vec[a] - per_vec[b])
        for m in methods:
            result.add(snr, m, "ber", acc[m])
        for (a, b), mom in diff.items():
            result.gaps[(float(snr), a, b)] = mom
    return result


def estimate_csi(Hc, params: CENetParams, cfg: SystemConfig, spec: QuantizerSpec, rng):
    """FBM-CENet estimate of each channel in ``Hc`` from a fresh quantized pilot block."""
    pilot = expand_pilot(params.pilot, cfg.N)
    Zt = complex_normal(rng, Hc.shape[:-1] + (pilot.Tt,), cfg.N0)
    _, q_up, q_low = observe_training(Hc, Zt, pilot, spec)
    return antenna_rows_to_complex(fbm_cenet_forward(q_up, q_low, pilot, params))

