"""Reverse passes through the unfolded networks, Adam, and the training loops.

The graphs are small and fixed, so each network gets an explicit adjoint
sweep over the tape recorded by its forward pass.  Central finite
differences are the correctness oracle (see tests/test_training.py).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bussgang import linearize_detection
from .core import (
    SystemConfig,
    complex_to_real_stack,
    complex_normal,
    make_rng,
    normalize_pilot_rows,
    sample_symbols,
    stack_vectors,
)
from .likelihood import projector_psi_grads
from .networks import (
    CENetParams,
    DetNetParams,
    b_detnet_layers,
    bdetnet_weight,
    cenet_layers,
    complex_to_antenna_rows,
    fbm_detnet_layers,
)
from .quantizer import QuantizerSpec, bin_bounds, make_quantizer, quantize_hard, soft_quantize, soft_quantize_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.002
    decay: float = 0.97
    decay_every: int = 100
    batch: int = 1000
    epochs: int = 2000
    c1: float = 0.01
    c2: float = 1000.0
    trainable_pilot: bool = False
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def lr_schedule(epoch: int, lr0: float = 0.002, decay: float = 0.97, every: int = 100) -> float:
    return lr0 * decay ** (epoch // every)


class Adam:
    """Adam over a dict of named arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=float)
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            elif self.m[k].shape != g.shape:
                raise ValueError(f"shape mismatch for {k!r}: {self.m[k].shape} vs {g.shape}")
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.step_count)
            vhat = self.v[k] / (1 - b2 ** self.step_count)
            out[k] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def adam_step(params: dict, grads: dict, state: Adam, lr: float) -> dict:
    return state.step(params, grads, lr)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def _finite(q):
    # infinite edges -> 0; the sigmoid derivative multiplying (u - q) is exactly 0 there
    return np.where(np.isfinite(q), q, 0.0)


# --------------------------------------------------------------------------
# FBM-CENet
# --------------------------------------------------------------------------

@dataclass
class CENetBatch:
    h: np.ndarray  # (B, N, 2K) target rows
    z: np.ndarray  # (B, N, 2Tt) real noise rows


def sample_cenet_batch(cfg: SystemConfig, rng, batch: int) -> CENetBatch:
    H = complex_normal(rng, (batch, cfg.N, cfg.K))
    Z = complex_normal(rng, (batch, cfg.N, cfg.Tt), cfg.N0)
    return CENetBatch(h=complex_to_antenna_rows(H), z=complex_to_antenna_rows(Z))


def cenet_bins(r, spec: QuantizerSpec, soft: bool, c1: float, c2: float):
    if soft:
        _, q_up, q_low = soft_quantize(r, spec, c1, c2)
    else:
        q_low, q_up = bin_bounds(quantize_hard(r, spec), spec)
    return q_up, q_low


def cenet_loss(params: CENetParams, data: CENetBatch, spec: QuantizerSpec, soft=False, c1=0.01, c2=1000.0):
    D = complex_to_real_stack(params.pilot.T)
    r = data.h @ D.T + data.z
    q_up, q_low = cenet_bins(r, spec, soft, c1, c2)
    h = cenet_layers(q_up, q_low, D, params.alpha, params.beta)
    return float(np.sum((h - data.h) ** 2) / data.h.shape[0])


def cenet_loss_and_grads(params: CENetParams, data: CENetBatch, spec: QuantizerSpec, soft=False,
                         c1=0.01, c2=1000.0, pilot_grad: bool | None = None):
    """Loss sum ||h_hat - h||^2 / batch and adjoints of alpha, beta and the pilot.

    The pilot adjoint is returned as dL/dRe X + j dL/dIm X; it flows both
    through the layer weights and, with ``soft``, through the bin edges.
    """
    if pilot_grad is None:
        pilot_grad = params.trainable_pilot
    X = params.pilot
    D = complex_to_real_stack(X.T)
    r = data.h @ D.T + data.z
    q_up, q_low = cenet_bins(r, spec, soft, c1, c2)
    tape: list = []
    beta = params.beta
    h_out = cenet_layers(q_up, q_low, D, params.alpha, beta, tape)
    B = data.h.shape[0]
    diff = h_out - data.h
    loss = float(np.sum(diff ** 2) / B)

    hbar = 2.0 * diff / B
    g_alpha = np.zeros(params.L)
    g_beta = 0.0
    Dbar = np.zeros_like(D)
    qup_bar = np.zeros_like(q_up)
    qlow_bar = np.zeros_like(q_low)
    qu_f, ql_f = _finite(q_up), _finite(q_low)
    for ell in range(params.L - 1, -1, -1):
        h_prev, u, th_up, th_lo = tape[ell]
        a = params.alpha[ell]
        g = -0.5 * (th_up + th_lo)
        g_alpha[ell] = np.sum(hbar * (g @ D))
        gbar = a * (hbar @ D.T)
        if pilot_grad:
            Dbar += a * _outer_sum(g, hbar)
        # d g / d a = -sigmoid'(a) = -(1 - tanh(a/2)^2) / 4, exactly 0 on infinite edges
        abar_up = -0.25 * gbar * (1.0 - th_up * th_up)
        abar_lo = -0.25 * gbar * (1.0 - th_lo * th_lo)
        g_beta += np.sum(abar_up * (u - qu_f)) + np.sum(abar_lo * (u - ql_f))
        ubar = beta * (abar_up + abar_lo)
        if pilot_grad and soft:
            qup_bar -= beta * abar_up
            qlow_bar -= beta * abar_lo
        if pilot_grad:
            Dbar += _outer_sum(ubar, h_prev)
        hbar = hbar + ubar @ D
    grads = {"alpha": g_alpha, "beta": float(g_beta)}
    if pilot_grad:
        if soft:
            _, dup, dlow = soft_quantize_grad(r, spec, c1, c2)
            rbar = qup_bar * dup + qlow_bar * dlow
            Dbar += _outer_sum(rbar, data.h)
        grads["pilot"] = _stack_adjoint(Dbar).T
    return loss, grads


def _outer_sum(a, b):
    """sum over all leading axes of outer(a, b)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _stack_adjoint(G: np.ndarray) -> np.ndarray:
    """Adjoint of M -> stack(M) as dL/dRe M + j dL/dIm M."""
    r, c = G.shape[0] // 2, G.shape[1] // 2
    g11, g12, g21, g22 = G[:r, :c], G[:r, c:], G[r:, :c], G[r:, c:]
    return (g11 + g22) + 1j * (g21 - g12)


# --------------------------------------------------------------------------
# detection networks
# --------------------------------------------------------------------------

@dataclass
class DetBatch:
    H: np.ndarray  # (B, 2N, 2K)
    x: np.ndarray  # (B, 2K)
    y: np.ndarray  # (B, 2N)
    q_up: np.ndarray
    q_low: np.ndarray
    A: np.ndarray | None = None
    W: np.ndarray | None = None


def sample_det_batch(cfg: SystemConfig, rng, batch: int, spec: QuantizerSpec | None = None,
                     bussgang: bool = False, H_complex=None) -> DetBatch:
    spec = spec or make_quantizer(cfg.bits, cfg.quantizer_scale)
    Hc = complex_normal(rng, (batch, cfg.N, cfg.K)) if H_complex is None else H_complex
    sym, _ = sample_symbols(cfg, batch, rng)
    Z = complex_normal(rng, (batch, cfg.N), cfg.N0)
    r = np.einsum("bnk,bk->bn", Hc, sym) + Z
    y = quantize_hard(stack_vectors(r), spec)
    q_low, q_up = bin_bounds(y, spec)
    Hr = stack_channel(Hc)
    out = DetBatch(H=Hr, x=stack_vectors(sym), y=y, q_up=q_up, q_low=q_low)
    if bussgang:
        A, Sn = linearize_detection(Hr, cfg.N0, spec)
        out.A, out.W = A, bdetnet_weight(A, Sn)
    return out


def stack_channel(Hc: np.ndarray) -> np.ndarray:
    """Batched complex (B, N, K) -> real (B, 2N, 2K)."""
    re, im = Hc.real, Hc.imag
    top = np.concatenate([re, -im], axis=-1)
    bot = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bot], axis=-2)


def detnet_forward_batch(params: DetNetParams, data: DetBatch, tape=None):
    t = params.t
    if params.kind == "b-detnet":
        return b_detnet_layers(data.y, data.A, data.W, params.alpha, t, params.projector, tape)
    return fbm_detnet_layers(data.q_up, data.q_low, data.H, params.alpha, t, params.beta, params.projector, tape)


def detnet_loss(params: DetNetParams, data: DetBatch) -> float:
    x = detnet_forward_batch(params, data)
    return float(np.sum((x - data.x) ** 2) / data.x.shape[0])


def detnet_loss_and_grads(params: DetNetParams, data: DetBatch):
    """Loss sum ||x_L - x||^2 / batch and adjoints of alpha, t (and beta for FBM-DetNet)."""
    tape: list = []
    x_out = detnet_forward_batch(params, data, tape)
    B = data.x.shape[0]
    diff = x_out - data.x
    loss = float(np.sum(diff ** 2) / B)
    proj = params.projector
    xbar = 2.0 * diff / B
    g_alpha = np.zeros(params.L)
    g_t = np.zeros(params.L)
    g_beta = 0.0
    qu_f, ql_f = _finite(data.q_up), _finite(data.q_low)
    for ell in range(params.L - 1, -1, -1):
        a, tl = params.alpha[ell], params.t[ell]
        if params.kind == "b-detnet":
            x_prev, step, v = tape[ell]
            _, dpsi_dx, dpsi_dt = projector_psi_grads(v, tl, proj)
            vbar = xbar * dpsi_dx
            g_t[ell] = np.sum(xbar * dpsi_dt)
            g_alpha[ell] = np.sum(vbar * step)
            # v = x + a W (y - A x)
            wv = np.einsum("bij,bi->bj", data.W, vbar)
            xbar = vbar - a * np.einsum("bij,bi->bj", data.A, wv)
        else:
            x_prev, u, th_up, th_lo, g, v = tape[ell]
            _, dpsi_dx, dpsi_dt = projector_psi_grads(v, tl, proj)
            vbar = xbar * dpsi_dx
            g_t[ell] = np.sum(xbar * dpsi_dt)
            Htg = np.einsum("bij,bi->bj", data.H, g)
            g_alpha[ell] = np.sum(vbar * Htg)
            gbar = a * np.einsum("bij,bj->bi", data.H, vbar)
            abar_up = -0.25 * gbar * (1.0 - th_up * th_up)
            abar_lo = -0.25 * gbar * (1.0 - th_lo * th_lo)
            g_beta += np.sum(abar_up * (u - qu_f)) + np.sum(abar_lo * (u - ql_f))
            ubar = params.beta * (abar_up + abar_lo)
            xbar = vbar + np.einsum("bij,bi->bj", data.H, ubar)
    grads = {"alpha": g_alpha, "t": g_t}
    if params.kind == "fbm-detnet":
        grads["beta"] = float(g_beta)
    return loss, grads


def tape_gradients(params, data, spec: QuantizerSpec | None = None, **kw):
    """Parameter adjoints for whichever network ``params`` describes."""
    if isinstance(params, CENetParams):
        return cenet_loss_and_grads(params, data, spec, **kw)[1]
    return detnet_loss_and_grads(params, data)[1]


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

class _DivergenceGuard:
    def __init__(self, tcfg: TrainConfig):
        self.factor, self.patience = tcfg.divergence_factor, tcfg.divergence_patience
        self.initial = None
        self.bad = 0

    def update(self, epoch: int, loss: float):
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        if self.initial is None:
            self.initial = loss
        self.bad = self.bad + 1 if loss > self.factor * self.initial else 0
        if self.bad >= self.patience:
            raise TrainingDiverged(f"loss {loss:.4g} exceeded {self.factor}x the initial loss "
                                   f"for {self.bad} consecutive epochs (epoch {epoch})")


def train_cenet(cfg: SystemConfig, tcfg: TrainConfig, params: CENetParams, seed=None):
    """Train FBM-CENet on fresh (h, z) draws each epoch.

    An epoch is one batch of ``tcfg.batch`` fresh channel realizations.
    Returns (trained params, trace of (epoch, lr, loss)).
    """
    rng = make_rng(cfg.seed if seed is None else seed)
    spec = make_quantizer(cfg.bits, cfg.quantizer_scale)
    params = params.copy()
    params.trainable_pilot = bool(tcfg.trainable_pilot or params.trainable_pilot)
    soft = params.trainable_pilot
    opt = Adam()
    guard = _DivergenceGuard(tcfg)
    trace = []
    for epoch in range(tcfg.epochs):
        data = sample_cenet_batch(cfg, rng, tcfg.batch)
        loss, grads = cenet_loss_and_grads(params, data, spec, soft=soft, c1=tcfg.c1, c2=tcfg.c2)
        lr = lr_schedule(epoch, tcfg.lr0, tcfg.decay, tcfg.decay_every)
        trace.append((epoch, lr, loss))
        guard.update(epoch, loss)
        state = {"alpha": params.alpha, "beta": np.array(params.beta)}
        g = {"alpha": grads["alpha"], "beta": np.array(grads["beta"])}
        if soft:
            state["pilot_re"], state["pilot_im"] = params.pilot.real, params.pilot.imag
            g["pilot_re"], g["pilot_im"] = grads["pilot"].real, grads["pilot"].imag
        new = opt.step(state, g, lr)
        params.alpha = new["alpha"]
        params.beta = float(new["beta"])
        if soft:
            params.pilot = normalize_pilot_rows(new["pilot_re"] + 1j * new["pilot_im"])
        if epoch % 100 == 0:
            log.debug("cenet epoch %d lr %.5f loss %.5f", epoch, lr, loss)
    return params, trace


def train_detnet(cfg: SystemConfig, tcfg: TrainConfig, params: DetNetParams, seed=None):
    """Train B-DetNet or FBM-DetNet on fresh (H, x, z) draws with hard bins."""
    rng = make_rng(cfg.seed if seed is None else seed)
    spec = make_quantizer(cfg.bits, cfg.quantizer_scale)
    params = params.copy()
    opt = Adam()
    guard = _DivergenceGuard(tcfg)
    trace = []
    fbm = params.kind == "fbm-detnet"
    for epoch in range(tcfg.epochs):
        data = sample_det_batch(cfg, rng, tcfg.batch, spec, bussgang=not fbm)
        loss, grads = detnet_loss_and_grads(params, data)
        lr = lr_schedule(epoch, tcfg.lr0, tcfg.decay, tcfg.decay_every)
        trace.append((epoch, lr, loss))
        guard.update(epoch, loss)
        t_raw = softplus_inv(params.t)
        state = {"alpha": params.alpha, "t_raw": t_raw}
        # chain rule through t = softplus(t_raw)
        g = {"alpha": grads["alpha"], "t_raw": grads["t"] / (1.0 + np.exp(-t_raw))}
        if fbm:
            state["beta"] = np.array(params.beta)
            g["beta"] = np.array(grads["beta"])
        new = opt.step(state, g, lr)
        params.alpha = new["alpha"]
        params.t = softplus(new["t_raw"])
        if fbm:
            params.beta = float(new["beta"])
    return params, trace


def write_loss_csv(trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("epoch,lr,loss\n")
        for epoch, lr, loss in trace:
            f.write(f"{epoch},{lr!r},{loss!r}\n")
