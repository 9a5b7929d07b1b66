"""Dense float64 array operations and a deterministic, splittable RNG.

All tensors are contiguous row-major ``numpy.ndarray`` with dtype float64.
Every operation validates its operands and raises instead of silently
propagating NaN/Inf, so a numerical blow-up surfaces at the op that
produced it.
"""

import hashlib

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one extent")
    for s in shape:
        if s < 1:
            raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def check_finite(arr: np.ndarray, context: str = "result") -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{context} contains NaN or Inf")
    return arr


def tensor(values) -> np.ndarray:
    """Copy arbitrary nested values into a contiguous float64 array."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    return check_finite(arr, "input values")


def zeros(shape) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "add")
    return check_finite(a + b, "add result")


def subtract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "sub")
    return check_finite(a - b, "sub result")


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b, "mul")
    return check_finite(a * b, "mul result")


def scalar_multiply(t: np.ndarray, s: float) -> np.ndarray:
    return check_finite(t * DTYPE(s), "scalar-mul result")


def exp(t: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.exp(t)
    return check_finite(out, "exp result")


def maximum_scalar(t: np.ndarray, s: float) -> np.ndarray:
    return check_finite(np.maximum(t, DTYPE(s)), "max-with-scalar result")


_ELEMENTWISE = {
    "add": add,
    "sub": subtract,
    "mul": multiply,
    "scalar-mul": scalar_multiply,
    "exp": exp,
    "max-with-scalar": maximum_scalar,
}


def elementwise(op: str, *args) -> np.ndarray:
    """Dispatch by op name; see ``_ELEMENTWISE`` for the supported set."""
    if op not in _ELEMENTWISE:
        raise ShapeError(f"unknown elementwise op {op!r}")
    return _ELEMENTWISE[op](*args)


def reduce(t: np.ndarray, axis: int, kind: str) -> np.ndarray:
    """Reduce one axis away. ``argmax`` ties resolve to the lowest index."""
    if not 0 <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank-{t.ndim} tensor")
    if kind == "sum":
        out = t.sum(axis=axis)
    elif kind == "mean":
        out = t.mean(axis=axis)
    elif kind == "max":
        out = t.max(axis=axis)
    elif kind == "argmax":
        return t.argmax(axis=axis)
    else:
        raise ShapeError(f"unknown reduction kind {kind!r}")
    return check_finite(out, f"{kind} result")


class Rng:
    """Counter-based (Philox) random stream, reproducible across platforms.

    ``split`` derives an independent sub-stream from a label, so each
    consumer (one per parameter tensor, dropout, data shuffling, ...)
    gets its own sequence regardless of draw order elsewhere.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        if self.seed < 0:
            raise ShapeError("seed must be a non-negative integer")
        self._path = _path
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=_path))
        )

    def split(self, label) -> "Rng":
        """Independent sub-stream; same (seed, label path) => same stream."""
        digest = hashlib.sha256(repr(label).encode()).digest()
        key = int.from_bytes(digest[:8], "big")
        return Rng(self.seed, self._path + (key,))

    def normal(self, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
        if stddev < 0:
            raise ShapeError("stddev must be >= 0")
        shape = _check_shape(shape)
        out = mean + stddev * self._gen.standard_normal(shape, dtype=DTYPE)
        return check_finite(out, "random_normal result")

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(_check_shape(shape), dtype=DTYPE)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def random_normal(rng: Rng, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    return rng.normal(shape, mean, stddev)
