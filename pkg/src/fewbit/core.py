"""System configuration, real stacking, pilots and random sampling.

Complex quantities are carried as numpy complex arrays; the real-domain
versions used by every estimator/detector follow the block layout

    stack(M) = [[Re M, -Im M],
                [Im M,  Re M]],      stack(v) = [Re v; Im v].
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

CONSTELLATIONS = ("QPSK", "QAM16")

# per-real-dimension amplitude levels, Gray labelled in order of increasing level
_LEVELS = {
    "QPSK": np.array([-1.0, 1.0]) / np.sqrt(2.0),
    "QAM16": np.array([-3.0, -1.0, 1.0, 3.0]) / np.sqrt(10.0),
}
_GRAY = {
    "QPSK": np.array([[0], [1]], dtype=np.int8),
    "QAM16": np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=np.int8),
}


@dataclass(frozen=True)
class SystemConfig:
    """Uplink system dimensions and operating point.

    ``rho`` is the linear SNR; ``N0`` is derived from it so ``rho * N0 == 1``
    holds up to one rounding.
    """

    N: int
    K: int
    Tt: int
    bits: int
    snr_db: float
    constellation: str = "QPSK"
    seed: int = 0
    rho: float = field(init=False)
    N0: float = field(init=False)

    def __post_init__(self):
        if self.K < 1 or self.N < self.K:
            raise ValueError(f"need 1 <= K <= N, got N={self.N}, K={self.K}")
        if self.Tt < self.K:
            raise ValueError(f"need Tt >= K, got Tt={self.Tt}, K={self.K}")
        if self.bits not in (1, 2, 3, 4):
            raise ValueError(f"bits must be in 1..4, got {self.bits}")
        if self.constellation not in CONSTELLATIONS:
            raise ValueError(f"unknown constellation {self.constellation!r}")
        rho = 10.0 ** (self.snr_db / 10.0)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "N0", 1.0 / rho)

    @classmethod
    def default(cls, N=32, K=4, bits=2, snr_db=10.0, **kw) -> "SystemConfig":
        """Config with the pilot length set to five times the user count."""
        return cls(N=N, K=K, Tt=kw.pop("Tt", 5 * K), bits=bits, snr_db=snr_db, **kw)

    def replace(self, **changes) -> "SystemConfig":
        fields = dict(
            N=self.N, K=self.K, Tt=self.Tt, bits=self.bits, snr_db=self.snr_db,
            constellation=self.constellation, seed=self.seed,
        )
        fields.update(changes)
        return SystemConfig(**fields)

    @property
    def quantizer_scale(self) -> float:
        """RMS of one real dimension of the received signal, sqrt((K + N0) / 2)."""
        return float(np.sqrt((self.K + self.N0) / 2.0))


def complex_to_real_stack(M: np.ndarray) -> np.ndarray:
    """Real representation of a complex matrix (2-D) or vector (1-D).

    Leading batch axes are not supported for matrices; use
    :func:`stack_vectors` for batched vectors.
    """
    M = np.asarray(M)
    if M.ndim == 1:
        return np.concatenate([M.real, M.imag])
    if M.ndim != 2:
        raise ValueError("expected a vector or a matrix")
    re, im = M.real, M.imag
    return np.block([[re, -im], [im, re]])


def stack_vectors(v: np.ndarray) -> np.ndarray:
    """[Re v; Im v] along the last axis (batched)."""
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=-1)


def unstack_vectors(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`stack_vectors`."""
    v = np.asarray(v, dtype=float)
    half = v.shape[-1] // 2
    return v[..., :half] + 1j * v[..., half:]


def real_to_complex(S: np.ndarray) -> np.ndarray:
    """Inverse of :func:`complex_to_real_stack` for a matrix built from a complex source."""
    S = np.asarray(S, dtype=float)
    r, c = S.shape[0] // 2, S.shape[1] // 2
    return S[:r, :c] + 1j * S[r:, :c]


def vec(M: np.ndarray) -> np.ndarray:
    """Column-major vectorisation."""
    return np.asarray(M).reshape(-1, order="F")


@dataclass
class PilotSet:
    """Pilot matrix ``X`` (K x Tt) and its vectorised expansion.

    ``P`` is the real stacking of ``X^T kron I_N``; it is only built on
    request since it grows as 4 N^2 K Tt.
    """

    X: np.ndarray
    N: int

    @property
    def K(self) -> int:
        return self.X.shape[0]

    @property
    def Tt(self) -> int:
        return self.X.shape[1]

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.X) ** 2))

    @property
    def P_complex(self) -> np.ndarray:
        return np.kron(self.X.T, np.eye(self.N))

    @property
    def P(self) -> np.ndarray:
        return complex_to_real_stack(self.P_complex)

    @property
    def antenna_design(self) -> np.ndarray:
        """Per-antenna real design matrix stack(X^T), shape (2 Tt, 2 K).

        With P = X^T kron I_N the estimation problem splits into N identical
        problems, one per receive antenna, each using this matrix.
        """
        return complex_to_real_stack(self.X.T)


def expand_pilot(X: np.ndarray, N: int) -> PilotSet:
    X = np.atleast_2d(np.asarray(X, dtype=complex))
    return PilotSet(X=X, N=int(N))


def build_dft_pilot(cfg: SystemConfig) -> PilotSet:
    """Row k of the pilot is DFT column k+1 (1-based), k = 1..K."""
    K, T = cfg.K, cfg.Tt
    if K + 1 > T:
        raise ValueError(f"DFT pilot needs K + 1 <= Tt, got K={K}, Tt={T}")
    m = np.arange(T)
    X = np.exp(-2j * np.pi * np.outer(np.arange(1, K + 1), m) / T)
    return expand_pilot(X, cfg.N)


def normalize_pilot_rows(X: np.ndarray) -> np.ndarray:
    """Scale each user's pilot to unit mean squared magnitude."""
    power = np.mean(np.abs(X) ** 2, axis=1, keepdims=True)
    return X / np.sqrt(power)


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    """Independent, reproducible substreams for partitioned Monte-Carlo work."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def complex_normal(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """i.i.d. CN(0, var) samples (each real part has variance var / 2)."""
    s = np.sqrt(var / 2.0)
    return s * rng.standard_normal(shape) + 1j * s * rng.standard_normal(shape)


def sample_channel(cfg: SystemConfig, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    shape = (cfg.N, cfg.K) if batch is None else (batch, cfg.N, cfg.K)
    return complex_normal(rng, shape)


def sample_noise(cfg: SystemConfig, rng: np.random.Generator, shape) -> np.ndarray:
    return complex_normal(rng, shape, cfg.N0)


def constellation_levels(constellation: str) -> np.ndarray:
    return _LEVELS[constellation].copy()


def bits_per_dim(constellation: str) -> int:
    return _GRAY[constellation].shape[1]


def constellation_points(constellation: str) -> np.ndarray:
    """All complex points, ordered lexicographically by (real, imag) level index."""
    lv = _LEVELS[constellation]
    return np.array([a + 1j * b for a, b in itertools.product(lv, lv)])


def bits_to_symbols(bits: np.ndarray, constellation: str) -> np.ndarray:
    """Map bit arrays of shape (..., K, 2 m) to symbols of shape (..., K).

    The first m bits label the real level, the last m the imaginary one.
    """
    gray = _GRAY[constellation]
    m = gray.shape[1]
    bits = np.asarray(bits, dtype=np.int64)
    weights = 1 << np.arange(m - 1, -1, -1)
    codes = gray @ weights  # code of each level index
    lookup = np.empty(1 << m, dtype=np.int64)
    lookup[codes] = np.arange(len(codes))
    lv = _LEVELS[constellation]
    re = lv[lookup[bits[..., :m] @ weights]]
    im = lv[lookup[bits[..., m:] @ weights]]
    return re + 1j * im


def level_indices_to_bits(idx: np.ndarray, constellation: str) -> np.ndarray:
    """Gray bits for per-dimension level indices; appends a bit axis."""
    return _GRAY[constellation][idx]


def symbols_to_bits(symbols: np.ndarray, constellation: str) -> np.ndarray:
    """Gray bits of (exact or nearest) constellation symbols, shape (..., K, 2 m)."""
    lv = _LEVELS[constellation]
    symbols = np.asarray(symbols)
    i_re = _nearest_level_index(symbols.real, lv)
    i_im = _nearest_level_index(symbols.imag, lv)
    g = _GRAY[constellation]
    return np.concatenate([g[i_re], g[i_im]], axis=-1)


def _nearest_level_index(x: np.ndarray, levels: np.ndarray) -> np.ndarray:
    # midpoint ties go to the lower level
    mids = 0.5 * (levels[1:] + levels[:-1])
    return np.searchsorted(mids, x, side="left")


def sample_symbols(cfg: SystemConfig, count: int, rng: np.random.Generator):
    """Draw ``count`` symbol vectors of length K.

    Returns (symbols of shape (count, K), bits of shape (count, K, 2 m)).
    """
    m = bits_per_dim(cfg.constellation)
    bits = rng.integers(0, 2, size=(count, cfg.K, 2 * m), dtype=np.int8)
    return bits_to_symbols(bits, cfg.constellation), bits
