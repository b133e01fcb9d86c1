"""Deterministic dense kernels and the seeded RNG used by every other module.

Vectors and matrices are float64 numpy arrays throughout; all public
operations validate finiteness so NaN/Inf never propagates silently.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateNorm, EmptyVector, NonFinite, ShapeMismatch

Vector = np.ndarray
Matrix = np.ndarray


def as_vector(x) -> Vector:
    """Coerce to a 1-D float64 array without copying when already one."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeMismatch(f"expected 1-D vector, got shape {arr.shape}")
    return arr


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} contains NaN or Inf")


def softmax(x: Vector) -> Vector:
    """Numerically stable softmax: exp(x - max(x)) / sum.

    Output is elementwise positive and sums to 1 within 1e-12.
    """
    x = as_vector(x)
    if x.size == 0:
        raise EmptyVector("softmax of empty vector")
    _require_finite(x, "softmax input")
    shifted = x - np.max(x)
    e = np.exp(shifted)
    return e / np.sum(e)


def layer_norm(x: Vector, epsilon: float = 1e-6) -> Vector:
    """Zero-mean unit-variance normalization, no learned affine.

    Variance is the population variance (divide by n). A constant input has
    zero variance and maps to the zero vector, which keeps downstream
    "nothing retrieved" paths exact.
    """
    x = as_vector(x)
    if x.size < 2:
        raise DegenerateNorm("layer_norm needs length >= 2")
    if epsilon < 0:
        raise ShapeMismatch("epsilon must be nonnegative")
    _require_finite(x, "layer_norm input")
    centered = x - np.mean(x)
    var = float(np.mean(centered * centered))
    if var == 0.0:
        return np.zeros_like(x)
    return centered / math.sqrt(var + epsilon)


def outer(k: Vector, v: Vector) -> Matrix:
    """Outer product k v^T: out[i, j] = k[i] * v[j]."""
    k = as_vector(k)
    v = as_vector(v)
    if k.shape != v.shape:
        raise ShapeMismatch(f"outer: {k.shape} vs {v.shape}")
    _require_finite(k, "outer k")
    _require_finite(v, "outer v")
    return np.outer(k, v)


def vec_mat(q: Vector, s: Matrix) -> Vector:
    """Row-vector times matrix: (q S)[j] = sum_i q[i] S[i, j]."""
    q = as_vector(q)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or q.shape[0] != s.shape[0]:
        raise ShapeMismatch(f"vec_mat: q {q.shape} vs S {s.shape}")
    _require_finite(q, "vec_mat q")
    return q @ s


def logistic(x: float) -> float:
    """Standard logistic 1 / (1 + e^-x), overflow-safe for large |x|."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """SplitMix64 finalizer: one full avalanche round over a 64-bit word."""
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


class RngStream:
    """SplitMix64 stream: a counter advanced by the golden-ratio increment,
    finalized with the standard avalanche mix.

    Identical seeds give bit-identical streams on every platform: the core
    uses only 64-bit integer arithmetic, and uniforms are built from the top
    53 bits. Normal draws use Box-Muller on those uniforms.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._seed = seed & _MASK64
        self._spare_normal: float | None = None

    @property
    def seed(self) -> int:
        return self._seed

    def fork(self, tag: int) -> "RngStream":
        """Independent child stream; child seed = mix64(seed ^ mix64(tag + 1))."""
        return RngStream(_mix64(self._seed ^ _mix64((tag + 1) & _MASK64)))

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix64(self._state)

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def normal(self) -> float:
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 in (0, 1] so the log is finite.
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, n: int) -> Vector:
        return np.array([self.normal() for _ in range(n)], dtype=np.float64)

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi); floor-of-uniform construction."""
        if hi <= lo:
            raise ShapeMismatch("integer: empty range")
        return lo + int(self.uniform() * (hi - lo))

    def unit_vector(self, n: int) -> Vector:
        """Random direction: normalized standard-normal draw, nonzero by retry."""
        while True:
            v = self.normals(n)
            norm = float(np.linalg.norm(v))
            if norm > 1e-12:
                return v / norm

    def choice(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), in draw order."""
        if k > n:
            raise ShapeMismatch("choice: k > n")
        picked: list[int] = []
        seen = set()
        while len(picked) < k:
            i = self.integer(0, n)
            if i not in seen:
                seen.add(i)
                picked.append(i)
        return picked
