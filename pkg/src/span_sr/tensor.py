"""Rank-4 tensor helpers and the deterministic random stream.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of ndim 4 laid out
as (batch, channel, row, column) with dtype float32 (production) or float64
(gradient checking). Every function here returns a fresh array and never
writes into its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_MASK64 = (1 << 64) - 1
_INDEX_LIMIT = np.iinfo(np.intp).max

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
# extended precision is accepted only so finite-difference oracles can run
# the same code with less round-off than the 64-bit path they check
REFERENCE_DTYPE = np.dtype(np.longdouble)
_ACCEPTED = FLOAT_DTYPES + (REFERENCE_DTYPE,)


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


@dataclass(frozen=True)
class Shape4:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ShapeError(f"extent {name}={v!r} must be a positive integer")
        if self.n * self.c * self.h * self.w > _INDEX_LIMIT:
            raise ShapeError(f"element count of {self.as_tuple()} overflows the index type")

    @classmethod
    def of(cls, shape: Sequence[int] | "Shape4") -> "Shape4":
        if isinstance(shape, Shape4):
            return shape
        if len(shape) != 4:
            raise ShapeError(f"expected 4 extents, got {tuple(shape)}")
        return cls(*(int(s) for s in shape))

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a rank-4 float tensor and return a contiguous array.

    The input is copied only when a dtype conversion or re-layout is needed.
    """
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _ACCEPTED else np.float32
    if np.dtype(dtype) not in _ACCEPTED:
        raise TypeError(f"unsupported precision {dtype}; use float32 or float64")
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {arr.shape}")
    Shape4.of(arr.shape)
    return np.ascontiguousarray(arr, dtype=dtype)


def zeros(shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(Shape4.of(shape).as_tuple(), dtype=dtype)


def ones(shape, dtype=np.float32) -> np.ndarray:
    return np.ones(Shape4.of(shape).as_tuple(), dtype=dtype)


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise_add(a, b) -> np.ndarray:
    a, b = as_tensor4(a), as_tensor4(b)
    _check_same_shape(a, b, "elementwise_add")
    return a + b


def elementwise_mul(a, b) -> np.ndarray:
    a, b = as_tensor4(a), as_tensor4(b)
    _check_same_shape(a, b, "elementwise_mul")
    return a * b


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if len(parts) == 0:
        raise ShapeError("concat_channels: need at least one part")
    parts = [as_tensor4(p) for p in parts]
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: part {p.shape} does not match n,h,w of {parts[0].shape}"
            )
    return np.concatenate(parts, axis=1)


def slice_channels(x, start: int, count: int) -> np.ndarray:
    x = as_tensor4(x)
    if start < 0 or count < 1 or start + count > x.shape[1]:
        raise IndexError(
            f"slice_channels: [{start}, {start + count}) outside 0..{x.shape[1]}"
        )
    return x[:, start:start + count].copy()


# ---------------------------------------------------------------------------
# xoshiro256** seeded through splitmix64
# ---------------------------------------------------------------------------


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Fold several integers into one 64-bit seed (order sensitive)."""
    acc = 0
    for p in parts:
        acc, out = splitmix64(acc ^ (int(p) & _MASK64))
        acc = out
    return acc


class Xoshiro256:
    """xoshiro256** 1.0 (Blackman & Vigna) with splitmix64 state expansion.

    Doubles are produced as ``(next >> 11) * 2**-53`` in [0, 1). Normal
    deviates use the Box-Muller transform on consecutive uniform pairs,
    emitting the cosine then the sine branch.
    """

    def __init__(self, seed: int):
        sm = int(seed) & _MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    @classmethod
    def from_state(cls, state: Sequence[int]) -> "Xoshiro256":
        """Generator with an explicit 4-word state (must not be all zero)."""
        words = [int(v) & _MASK64 for v in state]
        if len(words) != 4 or not any(words):
            raise ValueError("xoshiro256 state is four 64-bit words, not all zero")
        rng = cls.__new__(cls)
        rng._s = words
        return rng

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK64
        result = ((((x << 7) | (x >> 57)) & _MASK64) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n < 1:
            raise ValueError("randbelow needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def uniform_array(self, count: int) -> np.ndarray:
        # inlined generator loop; this is the hot path for weight init
        s0, s1, s2, s3 = self._s
        m = _MASK64
        out = [0] * count
        for i in range(count):
            x = (s1 * 5) & m
            out[i] = (((((x << 7) | (x >> 57)) & m) * 9) & m) >> 11
            t = (s1 << 17) & m
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & m
        self._s = [s0, s1, s2, s3]
        return np.array(out, dtype=np.float64) * (1.0 / 9007199254740992.0)

    def normal_array(self, count: int) -> np.ndarray:
        pairs = (count + 1) // 2
        u = self.uniform_array(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.reshape(-1)[:count]


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError(f"uniform bounds must satisfy lo < hi, got ({self.lo}, {self.hi})")


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std) and self.std > 0):
            raise ValueError(f"normal std must be positive and finite, got {self.std}")


def draw(rng: Xoshiro256, count: int, dist: Uniform | Normal) -> np.ndarray:
    if isinstance(dist, Uniform):
        return dist.lo + (dist.hi - dist.lo) * rng.uniform_array(count)
    if isinstance(dist, Normal):
        return dist.mean + dist.std * rng.normal_array(count)
    raise TypeError(f"unknown distribution {dist!r}")


def fill_random(shape, seed: int, dist: Uniform | Normal = Uniform(),
                dtype=np.float32) -> np.ndarray:
    """Deterministic tensor filled in row-major order from ``Xoshiro256(seed)``.

    Values are generated in float64 and rounded once to ``dtype``.
    """
    shape = Shape4.of(shape)
    values = draw(Xoshiro256(seed), shape.size, dist)
    return values.reshape(shape.as_tuple()).astype(dtype)
