"""Quantized-model log-likelihoods, their gradients, and the iterative solvers.

The design matrix ``D`` is the pilot expansion P for channel estimation and
the stacked channel H for detection; ``q_up``/``q_low`` are bin edges with
infinite saturation sentinels.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr, ndtr

from .core import constellation_levels, constellation_points, stack_vectors

C_LOGISTIC = 1.702

_SQRT2PI = np.sqrt(2.0 * np.pi)


def normal_cdf(t):
    return ndtr(t)


def normal_pdf(t):
    t = np.asarray(t, dtype=float)
    return np.exp(-0.5 * t * t) / _SQRT2PI


def sigmoid(t):
    return expit(t)


def sigmoid_cdf(t):
    """Logistic approximation of the normal cdf, sigmoid(1.702 t)."""
    return expit(C_LOGISTIC * np.asarray(t, dtype=float))


@dataclass
class LikelihoodContext:
    design: np.ndarray
    q_up: np.ndarray
    q_low: np.ndarray
    rho: float

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=float)
        self.q_up = np.asarray(self.q_up, dtype=float)
        self.q_low = np.asarray(self.q_low, dtype=float)
        if self.q_up.shape[-1] != self.design.shape[0] or self.q_low.shape != self.q_up.shape:
            raise ValueError("bin edges must match the design row count")
        if np.any(self.q_low >= self.q_up):
            raise ValueError("need q_low < q_up elementwise")

    @property
    def gain(self) -> float:
        """sqrt(2 rho), one over the per-dimension noise std."""
        return float(np.sqrt(2.0 * self.rho))

    def s_bounds(self, v):
        u = np.asarray(v, dtype=float) @ self.design.T
        return self.gain * (self.q_up - u), self.gain * (self.q_low - u)


def _log_diff_ndtr(a, b):
    """log(Phi(a) - Phi(b)) for a > b, accurate in both tails."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    flip = b > 0
    hi = np.where(flip, -b, a)
    lo = np.where(flip, -a, b)
    la, lb = log_ndtr(hi), log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = la + np.log1p(-np.exp(lb - la))
    return np.where(lb >= la, -np.inf, out)


def ml_objective_exact(v, ctx: LikelihoodContext):
    """sum_i log[Phi(s_up_i) - Phi(s_low_i)] (last axis summed; v may be batched)."""
    s_up, s_low = ctx.s_bounds(v)
    return np.sum(_log_diff_ndtr(s_up, s_low), axis=-1)


def _softplus(x):
    return np.logaddexp(0.0, x)


def log_sigmoid_diff(a, b):
    """log(sigmoid(a) - sigmoid(b)) for a > b, with a = +inf / b = -inf allowed.

    Uses sigmoid(a) - sigmoid(b) = sigmoid(a) sigmoid(-b) (1 - e^{-(a-b)}).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(invalid="ignore"):
        gap = a - b
    tail = np.where(np.isinf(gap), 0.0, np.log1p(-np.exp(-np.where(np.isinf(gap), 1.0, gap))))
    return -_softplus(-a) - _softplus(b) + tail


def ml_objective_reformulated(v, ctx: LikelihoodContext):
    s_up, s_low = ctx.s_bounds(v)
    return np.sum(log_sigmoid_diff(C_LOGISTIC * s_up, C_LOGISTIC * s_low), axis=-1)


def ml_objective_reformulated_naive(v, ctx: LikelihoodContext):
    """Direct log(e^{-c s_low} - e^{-c s_up}) - log(1 + e^{-c s_up}) - log(1 + e^{-c s_low}).

    Overflows for large |s|; kept as a cross-check of the stable form.
    """
    s_up, s_low = ctx.s_bounds(v)
    c = C_LOGISTIC
    with np.errstate(all="ignore"):
        return np.sum(
            np.log(np.exp(-c * s_low) - np.exp(-c * s_up)) - np.log1p(np.exp(-c * s_up)) - np.log1p(np.exp(-c * s_low)),
            axis=-1,
        )


def bin_activation(u, q_up, q_low, beta):
    """1 - sigmoid(beta (u - q_up)) - sigmoid(beta (u - q_low)); infinite edges give exact 0/1 terms."""
    # 1 - s(a) - s(b) = -(tanh(a/2) + tanh(b/2)) / 2; tanh(+-inf) is exactly +-1
    return -0.5 * (np.tanh(0.5 * beta * (u - q_up)) + np.tanh(0.5 * beta * (u - q_low)))


def ml_gradient_reformulated(v, ctx: LikelihoodContext):
    k = C_LOGISTIC * ctx.gain
    u = np.asarray(v, dtype=float) @ ctx.design.T
    return k * bin_activation(u, ctx.q_up, ctx.q_low, k) @ ctx.design


def ml_gradient_exact(v, ctx: LikelihoodContext):
    """Gradient of the exact objective; can divide by zero far from the data."""
    s_up, s_low = ctx.s_bounds(v)
    num = normal_pdf(np.where(np.isfinite(s_up), s_up, 0.0)) * np.isfinite(s_up) - normal_pdf(
        np.where(np.isfinite(s_low), s_low, 0.0)
    ) * np.isfinite(s_low)
    den = ndtr(s_up) - ndtr(s_low)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = -ctx.gain * num / den
    return w @ ctx.design


def gradient_ascent_channel(ctx: LikelihoodContext, steps, L: int | None = None):
    """h <- h + alpha_l * grad, from h = 0, for L iterations."""
    steps = np.atleast_1d(np.asarray(steps, dtype=float))
    if L is None:
        L = len(steps)
    if len(steps) == 1 and L > 1:
        steps = np.full(L, steps[0])
    batch = ctx.q_up.shape[:-1]
    h = np.zeros(batch + (ctx.design.shape[1],))
    for ell in range(L):
        h = h + steps[ell] * ml_gradient_reformulated(h, ctx)
    return h


def lipschitz_step(design: np.ndarray, rho: float) -> float:
    """1 / L for the reformulated objective: L = c^2 rho ||D||_2^2."""
    smax = np.linalg.norm(design, 2)
    return 1.0 / (C_LOGISTIC ** 2 * rho * smax ** 2)


@dataclass(frozen=True)
class ConstellationProjectorSpec:
    b_prime: int
    delta_prime: float

    @property
    def B_prime(self) -> int:
        return 2 ** (self.b_prime - 1) - 1

    @property
    def bound(self) -> float:
        return (2 ** self.b_prime - 1) * self.delta_prime / 2.0

    @classmethod
    def for_constellation(cls, name: str) -> "ConstellationProjectorSpec":
        if name == "QPSK":
            return cls(1, 2.0 / np.sqrt(2.0))
        if name == "QAM16":
            return cls(2, 2.0 / np.sqrt(10.0))
        raise ValueError(f"unknown constellation {name!r}")


def projector_psi(x, t, spec: ConstellationProjectorSpec):
    """Piecewise-linear soft projection onto the per-dimension levels; t > 0 sets the ramp half-width."""
    x = np.asarray(x, dtype=float)
    d = spec.delta_prime
    acc = np.zeros(np.broadcast(x, np.asarray(t)).shape)
    for i in range(-spec.B_prime, spec.B_prime + 1):
        acc += np.maximum(0.0, x + i * d + t) - np.maximum(0.0, x + i * d - t)
    return -spec.bound + d / (2.0 * t) * acc


def projector_psi_grads(x, t, spec: ConstellationProjectorSpec):
    """(psi, d psi / dx, d psi / dt)."""
    x = np.asarray(x, dtype=float)
    d = spec.delta_prime
    S = np.zeros(x.shape)
    dS_dx = np.zeros(x.shape)
    dS_dt = np.zeros(x.shape)
    for i in range(-spec.B_prime, spec.B_prime + 1):
        p, m = x + i * d + t, x + i * d - t
        S += np.maximum(0.0, p) - np.maximum(0.0, m)
        hp, hm = (p > 0).astype(float), (m > 0).astype(float)
        dS_dx += hp - hm
        dS_dt += hp + hm
    k = d / (2.0 * t)
    psi = -spec.bound + k * S
    return psi, k * dS_dx, -k / t * S + k * dS_dt


def bml_gradient(x, A, y, Sn_inv_A_T=None, Sigma_n=None):
    """grad of (y - A x)^T Sigma_n^-1 (y - A x) = -2 A^T Sigma_n^-1 (y - A x)."""
    W = Sn_inv_A_T if Sn_inv_A_T is not None else np.linalg.solve(Sigma_n, A).T
    resid = y - (A @ x[..., None])[..., 0]
    return -2.0 * (W @ resid[..., None])[..., 0]


def projected_gradient_detect(alpha, t, proj: ConstellationProjectorSpec, mode: str, *, y=None, A=None,
                              Sigma_n=None, ctx: LikelihoodContext | None = None):
    """Projected gradient iterations from x = 0.

    mode "bml":  x <- psi(x - alpha grad P_B(x)), needs y, A, Sigma_n.
    mode "ml":   x <- psi(x + alpha grad P~(x)),  needs ctx (design = H).
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if mode == "bml":
        A = np.asarray(A, dtype=float)
        W = np.linalg.solve(Sigma_n, A).T
        x = np.zeros(np.asarray(y).shape[:-1] + (A.shape[-1],))
        for a, tl in zip(alpha, t):
            x = projector_psi(x - a * bml_gradient(x, A, y, Sn_inv_A_T=W), tl, proj)
        return x
    if mode == "ml":
        x = np.zeros(ctx.q_up.shape[:-1] + (ctx.design.shape[1],))
        for a, tl in zip(alpha, t):
            x = projector_psi(x + a * ml_gradient_reformulated(x, ctx), tl, proj)
        return x
    raise ValueError(f"unknown mode {mode!r}")


def exhaustive_ml_detect(ctx: LikelihoodContext, constellation: str, K: int, max_candidates: int = 10 ** 6):
    """Maximise the exact likelihood over every constellation vector.

    Returns the stacked real vector of the winner; ties go to the first
    candidate in lexicographic order.
    """
    pts = constellation_points(constellation)
    n = len(pts) ** K
    if n > max_candidates:
        raise ValueError(f"search space of {n} candidates exceeds {max_candidates}")
    if ctx.q_up.ndim != 1:
        raise ValueError("use exhaustive_ml_detect_batch for batched instances")
    X = stack_vectors(np.array(list(itertools.product(pts, repeat=K))))  # (n, 2K)
    scores = ml_objective_exact(X, ctx)
    return X[int(np.argmax(scores))]


def exhaustive_ml_detect_batch(H, q_up, q_low, rho: float, constellation: str, chunk: int = 256,
                               max_candidates: int = 10 ** 6):
    """Exhaustive ML over a batch of (H, bin edges) instances.

    Returns (x_hat of shape (B, 2K), best exact log-likelihood of shape (B,)).
    """
    H = np.asarray(H, dtype=float)
    K = H.shape[-1] // 2
    pts = constellation_points(constellation)
    if len(pts) ** K > max_candidates:
        raise ValueError(f"search space of {len(pts) ** K} candidates exceeds {max_candidates}")
    cand = stack_vectors(np.array(list(itertools.product(pts, repeat=K))))  # (n, 2K)
    g = np.sqrt(2.0 * rho)
    out_x = np.empty((H.shape[0], 2 * K))
    out_v = np.empty(H.shape[0])
    for s in range(0, H.shape[0], chunk):
        Hc = H[s:s + chunk]
        u = np.einsum("bij,nj->bni", Hc, cand)
        su = g * (q_up[s:s + chunk, None, :] - u)
        sl = g * (q_low[s:s + chunk, None, :] - u)
        score = _log_diff_ndtr(su, sl).sum(axis=-1)
        best = np.argmax(score, axis=1)
        out_x[s:s + chunk] = cand[best]
        out_v[s:s + chunk] = score[np.arange(len(best)), best]
    return out_x, out_v


def hard_decision(x_hat, constellation: str):
    """Nearest level per real dimension; ties go to the lower level.

    Returns (stacked real decisions, per-dimension level indices).
    """
    lv = constellation_levels(constellation)
    mids = 0.5 * (lv[1:] + lv[:-1])
    idx = np.searchsorted(mids, np.asarray(x_hat, dtype=float), side="left")
    return lv[idx], idx
