"""Dense-tensor kernels and a counter-based RNG.

Tensors are float64 numpy arrays throughout; the checkpoint container is the
only place values are narrowed to float32. All operations are pure, and the
RNG is a counter-based SplitMix64 stream so draws are reproducible bit for
bit across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Tensor = np.ndarray

# Floor applied to every per-channel std so constant channels stay divisible.
EPS_STD = 1e-6

# SplitMix64 constants (golden-ratio increment and the two finalizer mixers).
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shape."""


def _as_matrix(x: Tensor, name: str) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m×k] and b [k×n]."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    x = _as_matrix(x, "x")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax_rows requires finite input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def concat_seq(a: Tensor, b: Tensor) -> Tensor:
    """Stack rows of a [m×d] above rows of b [n×d]."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"trailing dims disagree: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=0)


@dataclass
class ChannelStats:
    """Per-channel population mean and std; std is floored at EPS_STD."""

    mean: Tensor  # (C,)
    std: Tensor  # (C,)


def channel_stats(x: Tensor) -> ChannelStats:
    """Population mean/std per channel of a C×H×W tensor."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected C×H×W, got shape {x.shape}")
    if x.shape[1] * x.shape[2] == 0:
        raise ShapeError("empty channel")
    mean = x.mean(axis=(1, 2))
    std = x.std(axis=(1, 2))  # population std (ddof=0)
    return ChannelStats(mean=mean, std=np.maximum(std, EPS_STD))


def standardize(x: Tensor, stats: ChannelStats) -> Tensor:
    """Remove per-channel mean/std given by stats from a C×H×W tensor."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != stats.mean.shape[0]:
        raise ShapeError(f"stats for {stats.mean.shape[0]} channels, x is {x.shape}")
    return (x - stats.mean[:, None, None]) / stats.std[:, None, None]


def _mix(z: Tensor) -> Tensor:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@dataclass
class Rng:
    """Counter-based SplitMix64 stream: draw i is mix(seed + i*golden).

    The counter indexes the next unconsumed draw, so a given (seed, counter)
    pair pins the entire remaining sequence regardless of how earlier draws
    were grouped into calls.
    """

    seed: int
    counter: int = 0

    def _raw(self, n: int) -> Tensor:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed & _U64_MASK) + idx * _GOLDEN)

    def uniform(self, n: int) -> Tensor:
        """n uniforms in [0, 1) from the top 53 bits of each word."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> Tensor:
        """n standard normals via Box-Muller on uniform pairs."""
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0,1] so log never sees zero; u2 in [0,1).
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def randint(self, lo: int, hi: int, n: int) -> Tensor:
        """n integers uniform over [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + np.floor(self.uniform(n) * (hi - lo)).astype(np.int64)

    def derive(self, stream: int) -> "Rng":
        """Independent child stream; deterministic in (seed, stream)."""
        with np.errstate(over="ignore"):
            tag = _mix(np.uint64(stream & _U64_MASK) * _GOLDEN + _MIX2)
            child = _mix(np.uint64(self.seed & _U64_MASK) ^ tag)
        return Rng(seed=int(child))


def randn(shape: tuple[int, ...], rng: Rng) -> Tensor:
    """Tensor of i.i.d. standard normals with the given shape."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative dimension in {shape}")
    n = int(np.prod(shape)) if shape else 1
    return rng.normal(n).reshape(shape)
