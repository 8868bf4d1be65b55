"""Uniform mid-rise b-bit quantizer, bin edges, and the ReLU soft quantizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# optimum uniform quantizer for a unit-variance Gaussian input
STEP_TABLE = {1: float(np.sqrt(8.0 / np.pi)), 2: 0.996, 3: 0.586, 4: 0.335}
DISTORTION_TABLE = {1: 1.0 - 2.0 / np.pi, 2: 0.1188, 3: 0.0374, 4: 0.0115}


@dataclass(frozen=True)
class QuantizerSpec:
    b: int
    delta: float
    eta: float
    scale: float = 1.0

    @property
    def n_levels(self) -> int:
        return 2 ** self.b

    @property
    def B(self) -> int:
        return 2 ** (self.b - 1) - 1

    @property
    def thresholds(self) -> np.ndarray:
        l = np.arange(1, 2 ** self.b)
        return (l - 2 ** (self.b - 1)) * self.delta

    @property
    def levels(self) -> np.ndarray:
        """Output levels in increasing order (2^b of them)."""
        return (np.arange(2 ** self.b) - (2 ** self.b - 1) / 2.0) * self.delta

    @property
    def clip(self) -> float:
        return (2 ** self.b - 1) * self.delta / 2.0


@dataclass
class QuantizedObservation:
    """Quantizer outputs with the edges of the bin each one came from."""

    y: np.ndarray
    q_up: np.ndarray
    q_low: np.ndarray


def make_quantizer(b: int, scale: float = 1.0, delta_override: float | None = None) -> QuantizerSpec:
    """Table-based quantizer with the step scaled to the input RMS ``scale``."""
    if b not in STEP_TABLE:
        raise ValueError(f"unsupported resolution b={b}; expected 1..4")
    if scale <= 0:
        raise ValueError("scale must be positive")
    delta = float(delta_override) if delta_override is not None else scale * STEP_TABLE[b]
    return QuantizerSpec(b=b, delta=delta, eta=float(DISTORTION_TABLE[b]), scale=float(scale))


def quantize_hard(r, spec: QuantizerSpec) -> np.ndarray:
    """Bins are (tau_{l-1}, tau_l]; a value on a threshold takes the lower level."""
    r = np.asarray(r, dtype=float)
    idx = np.searchsorted(spec.thresholds, r, side="left")
    return spec.levels[idx]


def bin_bounds(y, spec: QuantizerSpec):
    """(q_low, q_up) for quantizer outputs ``y``, with infinite saturation edges."""
    y = np.asarray(y, dtype=float)
    levels = spec.levels
    idx = np.clip(np.rint(y / spec.delta + (2 ** spec.b - 1) / 2.0).astype(np.int64), 0, len(levels) - 1)
    if not np.allclose(levels[idx], y, rtol=0, atol=1e-9 * max(spec.delta, 1.0)):
        raise ValueError("y contains values that are not output levels of the quantizer")
    # edges are the thresholds themselves, so they agree bit-for-bit with quantize_hard
    edges = np.concatenate([[-np.inf], spec.thresholds, [np.inf]])
    return edges[idx], edges[idx + 1]


def observe(r, spec: QuantizerSpec) -> QuantizedObservation:
    y = quantize_hard(r, spec)
    q_low, q_up = bin_bounds(y, spec)
    return QuantizedObservation(y=y, q_up=q_up, q_low=q_low)


def relu(r):
    return np.maximum(0.0, r)


def _step(r):
    # derivative of relu, taking 0 at the kink
    return (r > 0).astype(float)


def soft_quantize(r, spec: QuantizerSpec, c1: float = 0.01, c2: float = 1000.0):
    """ReLU soft quantizer; returns (q, q_up, q_low).

    The saturation edges are replaced by ramps of height 2 c1 c2 instead of
    infinities so the edges stay differentiable in ``r``.
    """
    if not 0 < c1 < spec.delta / 2:
        raise ValueError("need 0 < c1 < delta / 2")
    r = np.asarray(r, dtype=float)
    d, B = spec.delta, spec.B
    q = np.full(r.shape, -spec.clip)
    for i in range(-B, B + 1):
        q += (d / (2 * c1)) * (relu(r + i * d + c1) - relu(r + i * d - c1))
    top = B * d
    q_up = q + d / 2 + c2 * (relu(r - top + c1) - relu(r - top - c1))
    q_low = q - d / 2 - c2 * (relu(-r - top + c1) - relu(-r - top - c1))
    return q, q_up, q_low


def soft_quantize_grad(r, spec: QuantizerSpec, c1: float = 0.01, c2: float = 1000.0):
    """Elementwise derivatives (dq/dr, dq_up/dr, dq_low/dr) of :func:`soft_quantize`."""
    r = np.asarray(r, dtype=float)
    d, B = spec.delta, spec.B
    dq = np.zeros(r.shape)
    for i in range(-B, B + 1):
        dq += (d / (2 * c1)) * (_step(r + i * d + c1) - _step(r + i * d - c1))
    top = B * d
    dq_up = dq + c2 * (_step(r - top + c1) - _step(r - top - c1))
    dq_low = dq + c2 * (_step(-r - top + c1) - _step(-r - top - c1))
    return dq, dq_up, dq_low
