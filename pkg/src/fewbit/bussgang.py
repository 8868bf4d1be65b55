"""Bussgang linearisation and the linear estimators/detectors built on it.

All covariances here are real-domain covariances of the stacked vectors
([Re; Im]), so a CN(0, 1) channel has ``Sigma_h = I / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import ndtr

from .quantizer import QuantizerSpec

_SQRT2PI = np.sqrt(2.0 * np.pi)


@dataclass
class BussgangModel:
    V: np.ndarray  # diagonal gain, stored as a vector
    Sigma_r: np.ndarray
    Sigma_y: np.ndarray | None = None
    Sigma_n: np.ndarray | None = None
    A: np.ndarray | None = None
    eta: float = 0.0


def bussgang_gain(sigma_r_diag, spec: QuantizerSpec) -> np.ndarray:
    """Diagonal Bussgang gain of the quantizer for real Gaussian inputs.

    Parameters
    ----------
    sigma_r_diag : array_like
        Variance of each real input entry.

    Returns
    -------
    numpy.ndarray
        ``(delta / sqrt(pi)) s^-1 sum_i exp(-tau_i^2 / s^2)`` with
        ``s^2 = 2 * sigma_r_diag``, the variance of the complex sample the
        real entry belongs to.  This equals
        ``delta / sigma * sum_i phi(tau_i / sigma)``.
    """
    var = np.asarray(sigma_r_diag, dtype=float)
    if np.any(var <= 0):
        raise ValueError("Bussgang gain needs strictly positive variances")
    var_c = 2.0 * var
    tau = spec.thresholds
    expo = np.exp(-np.square(tau)[None, :] / var_c.reshape(-1, 1))
    g = spec.delta / np.sqrt(np.pi) / np.sqrt(var_c).reshape(-1) * expo.sum(axis=1)
    return g.reshape(var.shape)


def sigma_r_training(P: np.ndarray, Sigma_h, N0: float) -> np.ndarray:
    Sigma_h = np.asarray(Sigma_h, dtype=float)
    PS = P * Sigma_h if Sigma_h.ndim == 0 else P @ Sigma_h
    S = PS @ P.T + (N0 / 2.0) * np.eye(P.shape[0])
    return _symmetrize(S)


def sigma_r_detection(H: np.ndarray, N0: float) -> np.ndarray:
    """Covariance of r = Hx + z for unit-power symbols (Sigma_x = I / 2)."""
    H = np.asarray(H, dtype=float)
    S = 0.5 * (H @ np.swapaxes(H, -1, -2)) + (N0 / 2.0) * np.eye(H.shape[-2])
    return _symmetrize(S)


def _symmetrize(S):
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def _correlation(Sigma_r):
    d = np.sqrt(np.diagonal(Sigma_r, axis1=-2, axis2=-1))
    C = Sigma_r / d[..., :, None] / d[..., None, :]
    return np.clip(C, -1.0, 1.0), d ** 2


def sigma_y_onebit(Sigma_r: np.ndarray, delta: float) -> np.ndarray:
    """Arcsine law for outputs +-delta/2: (delta^2 / (2 pi)) arcsin(corr)."""
    C, _ = _correlation(Sigma_r)
    return _symmetrize(delta ** 2 / (2.0 * np.pi) * np.arcsin(C))


def sigma_y_onebit_complex(Sigma_c: np.ndarray, delta: float) -> np.ndarray:
    """Complex-domain arcsine law for y = Q(Re r) + j Q(Im r), outputs +-delta/2 per part.

    (delta^2 / pi) [arcsin(Re C) + j arcsin(Im C)] with C the complex
    correlation matrix; the stacked real form is :func:`sigma_y_onebit`.
    """
    Sigma_c = np.asarray(Sigma_c, dtype=complex)
    d = np.sqrt(np.real(np.diagonal(Sigma_c, axis1=-2, axis2=-1)))
    C = Sigma_c / d[..., :, None] / d[..., None, :]
    re, im = np.clip(C.real, -1.0, 1.0), np.clip(C.imag, -1.0, 1.0)
    return delta ** 2 / np.pi * (np.arcsin(re) + 1j * np.arcsin(im))


def sigma_y_fewbit(V, Sigma_r: np.ndarray, eta: float) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.ndim == 2:
        V = np.diagonal(V)
    S = V[..., :, None] * Sigma_r * V[..., None, :]
    d = np.diagonal(Sigma_r, axis1=-2, axis2=-1)
    S = S + eta * _diag_embed(d)
    return _symmetrize(S)


def _diag_embed(d):
    out = np.zeros(d.shape + (d.shape[-1],))
    idx = np.arange(d.shape[-1])
    out[..., idx, idx] = d
    return out


def sigma_y(Sigma_r: np.ndarray, spec: QuantizerSpec, V=None) -> np.ndarray:
    if spec.b == 1:
        return sigma_y_onebit(Sigma_r, spec.delta)
    if V is None:
        V = bussgang_gain(np.diagonal(Sigma_r, axis1=-2, axis2=-1), spec)
    return sigma_y_fewbit(V, Sigma_r, spec.eta)


def sigma_n(Sigma_r: np.ndarray, spec: QuantizerSpec, N0: float, V=None) -> np.ndarray:
    """Covariance of the effective noise n = V z + d.

    One-bit uses the closed form; few-bit uses (N0/2) V V + eta diag(Sigma_r).
    """
    if spec.b == 1:
        C, dvar = _correlation(Sigma_r)
        S = spec.delta ** 2 / (2.0 * np.pi) * (np.arcsin(C) - C + (N0 / 2.0) * _diag_embed(1.0 / dvar))
        return _symmetrize(S)
    if V is None:
        V = bussgang_gain(np.diagonal(Sigma_r, axis1=-2, axis2=-1), spec)
    V = np.asarray(V, dtype=float)
    d = np.diagonal(Sigma_r, axis1=-2, axis2=-1)
    return _diag_embed((N0 / 2.0) * V ** 2 + spec.eta * d)


def regularize(S: np.ndarray, rel: float = 1e-9) -> np.ndarray:
    """Add eps * I with eps = rel * trace / dim."""
    n = S.shape[-1]
    eps = rel * np.trace(S, axis1=-2, axis2=-1) / n
    return _symmetrize(S) + eps[..., None, None] * np.eye(n)


def spd_solve(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve S X = B for symmetric positive (semi)definite S, jittering once if needed."""
    try:
        c = linalg.cho_factor(S, check_finite=False)
        return linalg.cho_solve(c, B, check_finite=False)
    except linalg.LinAlgError:
        try:
            c = linalg.cho_factor(regularize(S, 1e-9), check_finite=False)
        except linalg.LinAlgError:
            raise linalg.LinAlgError("covariance is singular after regularisation") from None
        return linalg.cho_solve(c, B, check_finite=False)


def linearize_training(P: np.ndarray, spec: QuantizerSpec, N0: float, sigma_h: float = 0.5) -> BussgangModel:
    Sr = sigma_r_training(P, sigma_h, N0)
    V = bussgang_gain(np.diag(Sr), spec)
    Sy = sigma_y(Sr, spec, V)
    return BussgangModel(V=V, Sigma_r=Sr, Sigma_y=Sy, A=V[:, None] * P, eta=spec.eta)


def linearize_detection(H: np.ndarray, N0: float, spec: QuantizerSpec):
    """Effective channel A = V H and effective noise covariance (batched over H)."""
    H = np.asarray(H, dtype=float)
    Sr = sigma_r_detection(H, N0)
    V = bussgang_gain(np.diagonal(Sr, axis1=-2, axis2=-1), spec)
    Sn = sigma_n(Sr, spec, N0, V)
    return V[..., :, None] * H, Sn


def bmmse_matrix(A: np.ndarray, Sigma_y: np.ndarray, prior_var: float = 0.5) -> np.ndarray:
    """Linear map W with h_hat = W y, W = prior_var * A^T Sigma_y^-1."""
    return prior_var * spd_solve(Sigma_y, A).T


def bmmse_estimate(y_t, A_t, Sigma_y, prior_var: float = 0.5) -> np.ndarray:
    """Bussgang LMMSE estimate ``prior_var * A^T Sigma_y^-1 y`` (y may be batched on axis 0)."""
    W = bmmse_matrix(A_t, Sigma_y, prior_var)
    return np.asarray(y_t) @ W.T


def truncated_normal_moments(lo, hi, var):
    """First and second moments of N(0, var) restricted to (lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    s = np.sqrt(var)
    a, b = lo / s, hi / s
    pa, pb = _pdf(a), _pdf(b)
    Z = ndtr(b) - ndtr(a)
    Z = np.maximum(Z, 1e-300)
    # a*phi(a) -> 0 at infinite limits
    apa = np.where(np.isfinite(a), a, 0.0) * pa
    bpb = np.where(np.isfinite(b), b, 0.0) * pb
    m1 = s * (pa - pb) / Z
    m2 = var * (1.0 + (apa - bpb) / Z)
    return m1, m2


def _pdf(t):
    return np.where(np.isfinite(t), np.exp(-0.5 * np.square(np.where(np.isfinite(t), t, 0.0))) / _SQRT2PI, 0.0)


def bwzf_weights(y_t, q_low, q_up, sigma_r_diag, V, N0: float) -> np.ndarray:
    """w_i = 1 / (N0/2 + E[d_i^2 | y_i]) with d = y - V r and r ~ N(0, sigma_r_diag) on the bin."""
    m1, m2 = truncated_normal_moments(q_low, q_up, sigma_r_diag)
    y = np.asarray(y_t, dtype=float)
    ed2 = y ** 2 - 2.0 * y * V * m1 + V ** 2 * m2
    return 1.0 / (N0 / 2.0 + np.maximum(ed2, 0.0))


def bwzf_estimate(y_t, A_t, weights) -> np.ndarray:
    """(A^T W A)^-1 A^T W y; batched over leading axes of ``y_t``/``weights``."""
    y = np.asarray(y_t, dtype=float)
    w = np.asarray(weights, dtype=float)
    AW = A_t.T * w[..., None, :]
    G = AW @ A_t
    rhs = (AW @ y[..., :, None])[..., 0]
    G = G + 1e-12 * np.trace(G, axis1=-2, axis2=-1)[..., None, None] / G.shape[-1] * np.eye(G.shape[-1])
    try:
        return np.linalg.solve(G, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("BWZF normal matrix is singular") from None


def bmmse_detect(y, H, N0: float, spec: QuantizerSpec) -> np.ndarray:
    """Bussgang LMMSE symbol estimate for unit-power symbols, batched over H and y."""
    A, Sn = linearize_detection(H, N0, spec)
    Sy = 0.5 * A @ np.swapaxes(A, -1, -2) + Sn
    Sy = regularize(Sy)
    z = np.linalg.solve(Sy, np.asarray(y, dtype=float)[..., None])[..., 0]
    return 0.5 * (np.swapaxes(A, -1, -2) @ z[..., None])[..., 0]
