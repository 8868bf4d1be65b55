"""Unfolded estimation/detection networks: FBM-CENet, B-DetNet, FBM-DetNet.

Every forward pass is written so it can optionally record the per-layer
intermediates (``tape``) consumed by the reverse passes in
:mod:`fewbit.training`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bussgang import bussgang_gain, sigma_n
from .core import PilotSet, SystemConfig, build_dft_pilot
from .quantizer import make_quantizer
from .likelihood import C_LOGISTIC, ConstellationProjectorSpec, projector_psi, projector_psi_grads

NET_KINDS = ("fbm-cenet", "b-detnet", "fbm-detnet")
CHECKPOINT_VERSION = 1


@dataclass
class CENetParams:
    alpha: np.ndarray
    beta: float
    pilot: np.ndarray  # complex K x Tt
    trainable_pilot: bool = False

    @property
    def L(self) -> int:
        return len(self.alpha)

    def copy(self) -> "CENetParams":
        return replace(self, alpha=self.alpha.copy(), pilot=self.pilot.copy())


@dataclass
class DetNetParams:
    kind: str
    alpha: np.ndarray
    t: np.ndarray
    beta: float = 0.0  # only used by fbm-detnet
    constellation: str = "QPSK"

    @property
    def L(self) -> int:
        return len(self.alpha)

    @property
    def projector(self) -> ConstellationProjectorSpec:
        return ConstellationProjectorSpec.for_constellation(self.constellation)

    def copy(self) -> "DetNetParams":
        return replace(self, alpha=self.alpha.copy(), t=self.t.copy())


def init_cenet_params(cfg: SystemConfig, L: int = 8, pilot: PilotSet | None = None,
                      trainable_pilot: bool = False) -> CENetParams:
    """Untrained FBM-CENet that equals plain gradient ascent on the reformulated likelihood."""
    pilot = pilot if pilot is not None else build_dft_pilot(cfg)
    k = C_LOGISTIC * np.sqrt(2.0 * cfg.rho)
    # solver step 1 / (c^2 rho Tt) times the absorbed coefficient c sqrt(2 rho)
    alpha = np.full(L, k / (C_LOGISTIC ** 2 * cfg.rho * cfg.Tt))
    return CENetParams(alpha=alpha, beta=float(k), pilot=pilot.X.copy(), trainable_pilot=trainable_pilot)


def init_detnet_params(cfg: SystemConfig, kind: str, L: int = 8) -> DetNetParams:
    if kind not in ("b-detnet", "fbm-detnet"):
        raise ValueError(f"not a detection network: {kind!r}")
    proj = ConstellationProjectorSpec.for_constellation(cfg.constellation)
    t = np.full(L, proj.delta_prime / 2.0)
    if kind == "fbm-detnet":
        alpha = np.full(L, 1.0 / (2.0 * cfg.N))
        beta = float(C_LOGISTIC * np.sqrt(2.0 * cfg.rho))
    else:
        # A^T Sigma_n^-1 A ~ (N V^2 / sigma_n^2) I for an average channel; start at its inverse
        spec = make_quantizer(cfg.bits, cfg.quantizer_scale)
        var = np.array([[cfg.quantizer_scale ** 2]])
        V = bussgang_gain(var[0], spec)
        Sn = sigma_n(var, spec, cfg.N0, V)[0, 0]
        alpha = np.full(L, Sn / (2.0 * cfg.N * V[0] ** 2))
        beta = 0.0
    return DetNetParams(kind=kind, alpha=alpha, t=t, beta=beta, constellation=cfg.constellation)


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------

def cenet_layers(q_up, q_low, D, alpha, beta, tape: list | None = None):
    """L layers of h <- h + alpha_l D^T [1 - s(beta(Dh - q_up)) - s(beta(Dh - q_low))].

    ``q_up``/``q_low`` have shape (..., rows of D); ``D`` is any real design
    matrix (the full expansion P or the per-antenna stack(X^T)).
    The tape stores tanh(beta (u - q) / 2) since 1 - s(a) - s(b) = -(tanh(a/2) + tanh(b/2)) / 2.
    """
    h = np.zeros(np.shape(q_up)[:-1] + (D.shape[1],))
    half = 0.5 * beta
    for a in alpha:
        u = h @ D.T
        th_up = np.tanh(half * (u - q_up))
        th_lo = np.tanh(half * (u - q_low))
        g = -0.5 * (th_up + th_lo)
        if tape is not None:
            tape.append((h, u, th_up, th_lo))
        h = h + a * (g @ D)
    return h


def fbm_cenet_forward(q_up, q_low, pilot: PilotSet, params: CENetParams, layout: str = "antenna"):
    """Channel estimate from bin edges.

    layout "antenna": edges of shape (..., N, 2 Tt), estimate (..., N, 2 K);
    layout "full": edges of the vectorised model (..., 2 N Tt), estimate (..., 2 N K).
    """
    D = pilot.antenna_design if layout == "antenna" else pilot.P
    return cenet_layers(q_up, q_low, D, params.alpha, params.beta)


def b_detnet_layers(y, A, W, alpha, t, proj: ConstellationProjectorSpec, tape: list | None = None):
    """x <- psi_t(x + alpha W (y - A x)) with W = 2 A^T Sigma_n^-1 (batched over the first axis)."""
    x = np.zeros(y.shape[:-1] + (A.shape[-1],))
    for a, tl in zip(alpha, t):
        resid = y - np.einsum("...ij,...j->...i", A, x)
        step = np.einsum("...ij,...j->...i", W, resid)
        v = x + a * step
        if tape is not None:
            tape.append((x, step, v))
        x = projector_psi(v, tl, proj)
    return x


def bdetnet_weight(A, Sigma_n):
    """2 A^T Sigma_n^-1, computed once per channel realization."""
    return 2.0 * np.swapaxes(np.linalg.solve(Sigma_n, A), -1, -2)


def b_detnet_forward(y, A, Sigma_n, params: DetNetParams, W=None):
    W = bdetnet_weight(A, Sigma_n) if W is None else W
    return b_detnet_layers(np.asarray(y, dtype=float), A, W, params.alpha, params.t, params.projector)


def fbm_detnet_layers(q_up, q_low, H, alpha, t, beta, proj: ConstellationProjectorSpec, tape: list | None = None):
    x = np.zeros(np.shape(q_up)[:-1] + (H.shape[-1],))
    half = 0.5 * beta
    for a, tl in zip(alpha, t):
        u = np.einsum("...ij,...j->...i", H, x)
        th_up = np.tanh(half * (u - q_up))
        th_lo = np.tanh(half * (u - q_low))
        g = -0.5 * (th_up + th_lo)
        v = x + a * np.einsum("...ij,...i->...j", H, g)
        if tape is not None:
            tape.append((x, u, th_up, th_lo, g, v))
        x = projector_psi(v, tl, proj)
    return x


def fbm_detnet_forward(q_up, q_low, H, params: DetNetParams):
    return fbm_detnet_layers(q_up, q_low, np.asarray(H, dtype=float), params.alpha, params.t, params.beta,
                             params.projector)


# --------------------------------------------------------------------------
# layout helpers for the per-antenna split of the estimation problem
# --------------------------------------------------------------------------

def antenna_to_full(v_a: np.ndarray) -> np.ndarray:
    """(..., N, 2 m) per-antenna [Re; Im] rows -> (..., 2 N m) vectorised [Re vec; Im vec]."""
    m = v_a.shape[-1] // 2
    re = np.swapaxes(v_a[..., :m], -1, -2).reshape(v_a.shape[:-2] + (-1,))
    im = np.swapaxes(v_a[..., m:], -1, -2).reshape(v_a.shape[:-2] + (-1,))
    return np.concatenate([re, im], axis=-1)


def full_to_antenna(v: np.ndarray, N: int) -> np.ndarray:
    half = v.shape[-1] // 2
    m = half // N
    re = np.swapaxes(v[..., :half].reshape(v.shape[:-1] + (m, N)), -1, -2)
    im = np.swapaxes(v[..., half:].reshape(v.shape[:-1] + (m, N)), -1, -2)
    return np.concatenate([re, im], axis=-1)


def antenna_rows_to_complex(v_a: np.ndarray) -> np.ndarray:
    """(..., N, 2 m) real rows -> (..., N, m) complex matrix."""
    m = v_a.shape[-1] // 2
    return v_a[..., :m] + 1j * v_a[..., m:]


def complex_to_antenna_rows(M: np.ndarray) -> np.ndarray:
    return np.concatenate([M.real, M.imag], axis=-1)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _fmt(a) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(a))


def save_checkpoint(path, params, meta: dict | None = None) -> None:
    """Text key-value checkpoint with a versioned header."""
    lines = [f"# fewbit checkpoint v{CHECKPOINT_VERSION}"]
    if isinstance(params, CENetParams):
        lines.append("kind = fbm-cenet")
        lines.append(f"alpha = {_fmt(params.alpha)}")
        lines.append(f"beta = {_fmt([params.beta])}")
        lines.append(f"pilot_shape = {params.pilot.shape[0]} {params.pilot.shape[1]}")
        lines.append(f"pilot_real = {_fmt(params.pilot.real)}")
        lines.append(f"pilot_imag = {_fmt(params.pilot.imag)}")
        lines.append(f"trainable_pilot = {int(params.trainable_pilot)}")
    else:
        lines.append(f"kind = {params.kind}")
        lines.append(f"alpha = {_fmt(params.alpha)}")
        lines.append(f"t = {_fmt(params.t)}")
        lines.append(f"beta = {_fmt([params.beta])}")
        lines.append(f"constellation = {params.constellation}")
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_checkpoint(path):
    """Returns (params, meta)."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# fewbit checkpoint v"):
        raise ValueError(f"{path}: not a fewbit checkpoint")
    version = int(text[0].rsplit("v", 1)[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    kv = {}
    for line in text[1:]:
        if line.strip():
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    arr = lambda k: np.array([float(s) for s in kv[k].split()])  # noqa: E731
    kind = kv["kind"]
    if kind == "fbm-cenet":
        shape = tuple(int(s) for s in kv["pilot_shape"].split())
        pilot = (arr("pilot_real") + 1j * arr("pilot_imag")).reshape(shape)
        params = CENetParams(alpha=arr("alpha"), beta=float(arr("beta")[0]), pilot=pilot,
                             trainable_pilot=bool(int(kv["trainable_pilot"])))
    elif kind in ("b-detnet", "fbm-detnet"):
        params = DetNetParams(kind=kind, alpha=arr("alpha"), t=arr("t"), beta=float(arr("beta")[0]),
                              constellation=kv["constellation"])
    else:
        raise ValueError(f"{path}: unknown network kind {kind!r}")
    return params, meta
