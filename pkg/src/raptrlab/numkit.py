"""Seeded random streams and dense float64 array primitives.

Everything downstream draws randomness through RngStream so that a run is
fully determined by (seed, stream_id) pairs. Matrices and vectors are plain
numpy float64 arrays; the helpers here add the dimension checks the rest of
the code relies on.
"""

from __future__ import annotations

import math

import numpy as np

Array = np.ndarray


class RngStream:
    """Philox-backed generator identified by (seed, stream_id).

    Distinct stream_ids never share state, so parallel replicas can each own
    a stream while staying reproducible. Counter-based Philox keeps the draw
    sequence platform-stable for a given numpy Generator method.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, stream_id: int) -> "RngStream":
        """Fresh independent stream under the same seed."""
        return RngStream(self.seed, stream_id)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def gauss(self, rows: int, cols: int | None = None, std: float = 1.0) -> Array:
        return gauss_matrix(rows, 1 if cols is None else cols, std, self).reshape(
            (rows,) if cols is None else (rows, cols)
        )

    def rademacher(self, *shape: int) -> Array:
        size = int(np.prod(shape))
        vals = self._gen.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0
        return vals.reshape(shape)

    def uniform(self, low: float, high: float, size=None) -> Array | float:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def bernoulli(self, p: float, size=None) -> Array:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {p}")
        return (self._gen.random(size=size) < p).astype(np.uint8)

    def choice_without_replacement(self, n: int, k: int) -> Array:
        return self._gen.choice(n, size=k, replace=False)

    def unit_sphere(self, n: int, d: int) -> Array:
        """n uniform samples from the unit sphere in R^d, one per row."""
        x = self._gen.standard_normal((n, d))
        return x / np.linalg.norm(x, axis=1, keepdims=True)


def gauss_matrix(rows: int, cols: int, std: float, rng: RngStream) -> Array:
    """rows x cols matrix with i.i.d. N(0, std^2) entries."""
    if rows < 1 or cols < 1:
        raise ValueError(f"dimensions must be positive, got {rows}x{cols}")
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.generator.standard_normal((rows, cols)) * float(std)


def rademacher_vector(d: int, rng: RngStream) -> Array:
    """Uniform sample from {-1, +1}^d."""
    if d < 1:
        raise ValueError(f"dimension must be positive, got {d}")
    return rng.rademacher(d)


def matvec(a: Array, x: Array) -> Array:
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ValueError(f"matvec shape mismatch: {a.shape} x {x.shape}")
    return a @ x


def matmul(a: Array, b: Array) -> Array:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def dot(x: Array, y: Array) -> float:
    if x.shape != y.shape:
        raise ValueError(f"dot shape mismatch: {x.shape} vs {y.shape}")
    return float(np.dot(x.ravel(), y.ravel()))


def l2norm(x: Array) -> float:
    return float(np.linalg.norm(x))


def ols_slope(xs, ys) -> float:
    """Least-squares slope of ys against xs."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 2:
        raise ValueError("need at least two points for a slope")
    xm = xs - xs.mean()
    denom = float(np.dot(xm, xm))
    if denom == 0.0:
        raise ValueError("degenerate x values")
    return float(np.dot(xm, ys - ys.mean()) / denom)


def format_float(x: float) -> str:
    """Deterministic shortest round-trip float formatting for CSV fields."""
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        return repr(x)
    return repr(float(x))
