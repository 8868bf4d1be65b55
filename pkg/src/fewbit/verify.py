"""Named self-checks run by ``fewbit verify``.

Each check returns a :class:`CheckResult` comparing a measured error to a
tolerance; tolerances come from :data:`DEFAULT_TOLERANCES` and may be
overridden per run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bussgang import bussgang_gain, linearize_detection, sigma_y_onebit
from .core import (
    SystemConfig,
    build_dft_pilot,
    complex_normal,
    complex_to_real_stack,
    expand_pilot,
    stack_vectors,
    vec,
)
from .likelihood import (
    C_LOGISTIC,
    ConstellationProjectorSpec,
    LikelihoodContext,
    gradient_ascent_channel,
    ml_gradient_reformulated,
    ml_objective_reformulated,
    ml_objective_reformulated_naive,
    normal_cdf,
    projected_gradient_detect,
    sigmoid_cdf,
)
from .networks import (
    CENetParams,
    DetNetParams,
    b_detnet_forward,
    fbm_cenet_forward,
    fbm_detnet_forward,
)
from .quantizer import bin_bounds, make_quantizer, observe, quantize_hard, soft_quantize
from .training import (
    Adam,
    cenet_loss,
    cenet_loss_and_grads,
    detnet_loss,
    detnet_loss_and_grads,
    sample_cenet_batch,
    sample_det_batch,
)

DEFAULT_TOLERANCES = {
    "sigmoid": 0.0095,
    "exact": 1e-10,
    "fd_likelihood": 1e-5,
    "fd_backprop": 1e-4,
    "unfolding": 1e-10,
    "sigmas": 3.0,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: error {self.error:.3g} vs tolerance {self.tolerance:.3g}{extra}"


def _result(name, err, tol, detail="", within=None):
    passed = bool(err <= tol) if within is None else bool(within)
    return CheckResult(name, passed and bool(np.isfinite(err)), float(err), float(tol), detail)


def rel_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a, b = np.ravel(np.asarray(a, dtype=complex)), np.ravel(np.asarray(b, dtype=complex))
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


# --------------------------------------------------------------------------
# random small instances
# --------------------------------------------------------------------------

def random_estimation_instance(rng, N=None, K=None, b=None):
    """(context, true h) for channel estimation with a random pilot, per-antenna layout flattened."""
    N = N or int(rng.integers(1, 5))
    K = min(K or int(rng.integers(1, 3)), N)
    b = b or int(rng.integers(1, 4))
    Tt = K + int(rng.integers(1, 4))
    snr = float(rng.uniform(-5, 15))
    cfg = SystemConfig(N=N, K=K, Tt=Tt, bits=b, snr_db=snr)
    X = complex_normal(rng, (K, Tt))
    P = expand_pilot(X, N).P
    h = stack_vectors(vec(complex_normal(rng, (N, K))))
    z = stack_vectors(complex_normal(rng, (N * Tt,), cfg.N0))
    spec = make_quantizer(b, cfg.quantizer_scale)
    obs = observe(P @ h + z, spec)
    return LikelihoodContext(P, obs.q_up, obs.q_low, cfg.rho), h


def random_detection_instance(rng, N=None, K=None, b=None):
    N = N or int(rng.integers(1, 5))
    K = K or int(rng.integers(1, 3))
    K = min(K, N)
    b = b or int(rng.integers(1, 4))
    cfg = SystemConfig(N=N, K=K, Tt=K, bits=b, snr_db=float(rng.uniform(-5, 15)))
    H = complex_to_real_stack(complex_normal(rng, (N, K)))
    x = rng.choice([-1, 1], size=2 * K) / np.sqrt(2.0)
    z = np.sqrt(cfg.N0 / 2.0) * rng.standard_normal(2 * N)
    obs = observe(H @ x + z, make_quantizer(b, cfg.quantizer_scale))
    return LikelihoodContext(H, obs.q_up, obs.q_low, cfg.rho), x


# --------------------------------------------------------------------------
# checks
# --------------------------------------------------------------------------

def check_sigmoid(tol, seed):
    t = np.arange(-10_000, 10_001) * 1e-3
    err = float(np.max(np.abs(normal_cdf(t) - sigmoid_cdf(t))))
    return _result("sigmoid-bound", err, tol["sigmoid"], "max |Phi(t) - s(1.702 t)| on [-10, 10]")


def check_stacking(tol, seed):
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(20):
        m, k, n = rng.integers(1, 5, size=3)
        A, B = complex_normal(rng, (m, k)), complex_normal(rng, (k, n))
        lhs = complex_to_real_stack(A @ B)
        rhs = complex_to_real_stack(A) @ complex_to_real_stack(B)
        err = max(err, float(np.max(np.abs(lhs - rhs))))
    return _result("stacking", err, tol["exact"], "stack(AB) = stack(A) stack(B)")


def check_kronecker(tol, seed):
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(20):
        N, K, T = rng.integers(1, 5, size=3)
        X, H = complex_normal(rng, (K, T)), complex_normal(rng, (N, K))
        P = expand_pilot(X, N).P_complex
        err = max(err, float(np.max(np.abs(P @ vec(H) - vec(H @ X)))))
    return _result("kronecker", err, tol["exact"], "vec(HX) = (X^T kron I) vec(H)")


def check_dft_pilot(tol, seed):
    err = 0.0
    for K, T in [(1, 2), (2, 5), (4, 20), (8, 40)]:
        X = build_dft_pilot(SystemConfig(N=K, K=K, Tt=T, bits=2, snr_db=0)).X
        err = max(err, float(np.max(np.abs(X @ X.conj().T - T * np.eye(K)))))
    return _result("dft-pilot", err, tol["exact"], "|X X^H - Tt I|")


def check_quantizer(tol, seed):
    worst = 0.0
    for b in (1, 2, 3, 4):
        spec = make_quantizer(b)
        r = np.linspace(-3, 3, 60_001)
        q, _, _ = soft_quantize(r, spec, 0.01, 1000.0)
        far = np.min(np.abs(r[:, None] - spec.thresholds[None, :]), axis=1) > 0.01
        worst = max(worst, float(np.max(np.abs(q[far] - quantize_hard(r[far], spec)))))
        q_low, q_up = bin_bounds(quantize_hard(r, spec), spec)
        if not (np.all(q_low < r) and np.all(r <= q_up)):
            return _result("quantizer", np.inf, tol["exact"], f"bin edges do not bracket inputs (b={b})")
    return _result("quantizer", worst, tol["exact"], "soft = hard outside c1 of every threshold")


def check_arcsine(tol, seed, draws=400_000):
    rng = np.random.default_rng(seed)
    delta = np.sqrt(2.0)
    worst = 0.0
    for c in (0.0, 0.5, 0.9):
        S = np.array([[1.0, c], [c, 1.0]])
        r = rng.standard_normal((draws, 2)) @ np.linalg.cholesky(S).T
        y = np.where(r > 0, delta / 2, -delta / 2)
        prod = y[:, 0] * y[:, 1]
        se = prod.std(ddof=1) / np.sqrt(draws)
        theory = sigma_y_onebit(S, delta)[0, 1]
        z = abs(prod.mean() - theory) / max(se, 1e-300)
        worst = max(worst, z)
    return _result("arcsine", worst, tol["sigmas"], f"one-bit cross covariance, {draws} draws, in std errors")


def check_bussgang_orthogonality(tol, seed, draws=400_000):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for b in (1, 2, 3):
        spec = make_quantizer(b)
        var = 0.5
        r = np.sqrt(var) * rng.standard_normal(draws)
        V = bussgang_gain(np.array([var]), spec)[0]
        prod = (quantize_hard(r, spec) - V * r) * r
        se = prod.std(ddof=1) / np.sqrt(draws)
        worst = max(worst, abs(prod.mean()) / se)
    return _result("bussgang-orthogonality", worst, tol["sigmas"], "E[d r] = 0, in std errors")


def check_likelihood_gradients(tol, seed, instances=100):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        make = random_estimation_instance if i % 2 == 0 else random_detection_instance
        ctx, truth = make(rng)
        v = truth + 0.3 * rng.standard_normal(truth.shape)
        g = ml_gradient_reformulated(v, ctx)
        fd = central_difference(lambda w: float(ml_objective_reformulated(w, ctx)), v, eps=1e-6)
        worst = max(worst, rel_error(g, fd))
    return _result("likelihood-gradients", worst, tol["fd_likelihood"],
                   f"reformulated objective, {instances} random instances")


def check_reformulation(tol, seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        ctx, h = random_estimation_instance(rng, b=3)
        a = ml_objective_reformulated(h, ctx)
        n = ml_objective_reformulated_naive(h, ctx)
        if np.isfinite(n):
            worst = max(worst, abs(a - n) / max(abs(n), 1.0))
    return _result("reformulation", worst, 1e-9, "stable vs direct reformulated objective")


def _cenet_fixture(seed, soft):
    rng = np.random.default_rng(seed)
    cfg = SystemConfig(N=2, K=1, Tt=2, bits=2, snr_db=5)
    spec = make_quantizer(2, cfg.quantizer_scale)
    X = complex_normal(rng, (1, 2))
    params = CENetParams(alpha=rng.uniform(0.05, 0.3, 2), beta=float(rng.uniform(1, 3)), pilot=X,
                         trainable_pilot=True)
    data = sample_cenet_batch(cfg, rng, 6)
    # wide ramps so the soft path is actually exercised by the samples
    c1, c2 = (0.2, 5.0) if soft else (0.01, 1000.0)
    return params, data, spec, c1, c2


def backprop_errors(seed, eps=1e-6):
    """Relative errors of every trainable-parameter adjoint against central differences."""
    errs = {}
    for soft in (False, True):
        p, data, spec, c1, c2 = _cenet_fixture(seed, soft)
        _, g = cenet_loss_and_grads(p, data, spec, soft=soft, c1=c1, c2=c2)

        def f_alpha(a, p=p):
            q = p.copy()
            q.alpha = a
            return cenet_loss(q, data, spec, soft, c1, c2)

        def f_beta(bv, p=p):
            q = p.copy()
            q.beta = float(bv[0])
            return cenet_loss(q, data, spec, soft, c1, c2)

        def f_pilot(w, p=p):
            q = p.copy()
            q.pilot = w[0] + 1j * w[1]
            return cenet_loss(q, data, spec, soft, c1, c2)

        tag = "soft" if soft else "hard"
        errs[f"cenet-{tag}.alpha"] = rel_error(g["alpha"], central_difference(f_alpha, p.alpha, eps))
        errs[f"cenet-{tag}.beta"] = rel_error(g["beta"], central_difference(f_beta, np.array([p.beta]), eps))
        fd = central_difference(f_pilot, np.stack([p.pilot.real, p.pilot.imag]), eps)
        errs[f"cenet-{tag}.pilot"] = rel_error(g["pilot"], fd[0] + 1j * fd[1])
    rng = np.random.default_rng(seed + 1)
    for kind in ("b-detnet", "fbm-detnet"):
        for constellation in ("QPSK", "QAM16"):
            cfg = SystemConfig(N=2, K=1, Tt=2, bits=2, snr_db=5, constellation=constellation)
            data = sample_det_batch(cfg, rng, 6, bussgang=kind == "b-detnet")
            proj = ConstellationProjectorSpec.for_constellation(constellation)
            p = DetNetParams(kind=kind, alpha=rng.uniform(0.05, 0.3, 2), t=rng.uniform(0.2, 0.6, 2) * proj.delta_prime,
                             beta=float(rng.uniform(1, 3)) if kind == "fbm-detnet" else 0.0,
                             constellation=constellation)
            _, g = detnet_loss_and_grads(p, data)
            names = ["alpha", "t"] + (["beta"] if kind == "fbm-detnet" else [])
            for name in names:
                x0 = np.atleast_1d(np.asarray(getattr(p, name), dtype=float))

                def f(v, name=name, p=p):
                    q = p.copy()
                    setattr(q, name, float(v[0]) if name == "beta" else v)
                    return detnet_loss(q, data)

                errs[f"{kind}-{constellation}.{name}"] = rel_error(g[name], central_difference(f, x0, eps))
    return errs


def check_backprop(tol, seed):
    errs = backprop_errors(seed)
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    return _result("gradients", worst, tol["fd_backprop"], f"{len(errs)} adjoints, worst {name}")


def unfolding_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}
    k_of = lambda rho: C_LOGISTIC * np.sqrt(2.0 * rho)  # noqa: E731
    # FBM-CENet vs gradient ascent on the reformulated likelihood
    cfg = SystemConfig.default(N=4, K=2, bits=2, snr_db=8.0)
    pilot = build_dft_pilot(cfg)
    data = sample_cenet_batch(cfg, rng, 5)
    D = pilot.antenna_design
    obs = observe(data.h @ D.T + data.z, make_quantizer(2, cfg.quantizer_scale))
    steps = rng.uniform(0.01, 0.05, 4)
    k = k_of(cfg.rho)
    ce = CENetParams(alpha=steps * k, beta=k, pilot=pilot.X)
    net = fbm_cenet_forward(obs.q_up, obs.q_low, pilot, ce)
    ref = gradient_ascent_channel(LikelihoodContext(D, obs.q_up, obs.q_low, cfg.rho), steps)
    errs["fbm-cenet"] = float(np.max(np.abs(net - ref)))
    # B-DetNet / FBM-DetNet vs projected gradient iterations
    for constellation in ("QPSK", "QAM16"):
        cfg = SystemConfig.default(N=4, K=2, bits=2, snr_db=8.0, constellation=constellation)
        proj = ConstellationProjectorSpec.for_constellation(constellation)
        db = sample_det_batch(cfg, rng, 5, bussgang=True)
        alpha = rng.uniform(0.02, 0.1, 4)
        t = rng.uniform(0.2, 0.5, 4) * proj.delta_prime
        A, Sn = linearize_detection(db.H, cfg.N0, make_quantizer(2, cfg.quantizer_scale))
        bp = DetNetParams("b-detnet", alpha, t, constellation=constellation)
        net = b_detnet_forward(db.y, A, Sn, bp)
        ref = np.stack([projected_gradient_detect(alpha, t, proj, "bml", y=db.y[i], A=A[i], Sigma_n=Sn[i])
                        for i in range(5)])
        errs[f"b-detnet-{constellation}"] = float(np.max(np.abs(net - ref)))
        k = k_of(cfg.rho)
        fp = DetNetParams("fbm-detnet", alpha * k, t, beta=k, constellation=constellation)
        net = fbm_detnet_forward(db.q_up, db.q_low, db.H, fp)
        ref = np.stack([
            projected_gradient_detect(alpha, t, proj, "ml",
                                      ctx=LikelihoodContext(db.H[i], db.q_up[i], db.q_low[i], cfg.rho))
            for i in range(5)
        ])
        errs[f"fbm-detnet-{constellation}"] = float(np.max(np.abs(net - ref)))
    return errs


def check_unfolding(tol, seed):
    errs = unfolding_errors(seed)
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    return _result("unfolding", worst, tol["unfolding"], f"{len(errs)} networks, worst {name}")


def check_adam(tol, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(5)
    p = rng.standard_normal(5)
    opt = Adam()
    new = opt.step({"p": p}, {"p": g}, 0.01)["p"]
    # bias correction makes the first step exactly lr * g / (|g| + eps')
    expected = p - 0.01 * g / (np.abs(g) + 1e-8)
    err = float(np.max(np.abs(new - expected)))
    return _result("adam", err, tol["exact"], "first step = -lr sign(g)")


CHECKS: dict[str, Callable] = {
    "sigmoid-bound": check_sigmoid,
    "stacking": check_stacking,
    "kronecker": check_kronecker,
    "dft-pilot": check_dft_pilot,
    "quantizer": check_quantizer,
    "arcsine": check_arcsine,
    "bussgang-orthogonality": check_bussgang_orthogonality,
    "likelihood-gradients": check_likelihood_gradients,
    "reformulation": check_reformulation,
    "gradients": check_backprop,
    "unfolding": check_unfolding,
    "adam": check_adam,
}


def run_checks(only=None, tolerances: dict | None = None, seed: int = 0) -> list[CheckResult]:
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}; available: {', '.join(CHECKS)}")
    return [CHECKS[n](tol, seed) for n in names]
