"""Dense 64-bit real matrices.

Matrix is the single value type the rest of the package trades in: base
weights, activations, adapter factors, gradients, and report payloads are
all Matrix instances. Storage is row-major float64; instances are
immutable and safe to share across threads.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeMismatchError


class Matrix:
    """Immutable dense matrix with row-major float64 storage.

    All entries are validated to be finite at construction, so any value
    that survives a chain of public operations is guaranteed NaN/Inf free.
    """

    __slots__ = ("_a",)

    def __init__(self, values: Iterable | np.ndarray) -> None:
        a = np.array(values, dtype=np.float64, order="C", copy=True)
        self._init_from(a)

    def _init_from(self, a: np.ndarray) -> None:
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"matrix must be 2-D and non-empty, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("matrix entries must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "_a", a)

    @classmethod
    def _wrap(cls, a: np.ndarray) -> "Matrix":
        """Wrap a freshly computed array without copying. Caller must not
        keep a writable reference to `a`."""
        m = object.__new__(cls)
        if a.dtype != np.float64 or not a.flags["C_CONTIGUOUS"]:
            a = np.ascontiguousarray(a, dtype=np.float64)
        m._init_from(a)
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls._wrap(np.eye(n))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "Matrix":
        return cls(rows)

    @classmethod
    def column(cls, values: Sequence[float]) -> "Matrix":
        return cls._wrap(np.asarray(values, dtype=np.float64).reshape(-1, 1))

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries (read-only)."""
        return self._a.reshape(-1)

    def to_numpy(self) -> np.ndarray:
        """Read-only 2-D view of the underlying storage."""
        return self._a

    def transpose(self) -> "Matrix":
        return Matrix._wrap(np.ascontiguousarray(self._a.T))

    @property
    def T(self) -> "Matrix":
        return self.transpose()

    def __getitem__(self, idx: tuple[int, int]) -> float:
        return float(self._a[idx])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Matrix):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._a, other._a))

    def __hash__(self) -> int:
        return hash((self.shape, self._a.tobytes()))

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"

    def __add__(self, other: "Matrix") -> "Matrix":
        _check_same_shape(self, other, "add")
        return Matrix._wrap(self._a + other._a)

    def __sub__(self, other: "Matrix") -> "Matrix":
        _check_same_shape(self, other, "sub")
        return Matrix._wrap(self._a - other._a)

    def __mul__(self, scalar: float) -> "Matrix":
        return Matrix._wrap(self._a * float(scalar))

    __rmul__ = __mul__

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)


def _check_same_shape(a: Matrix, b: Matrix, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product in 64-bit arithmetic.

    Raises ShapeMismatchError naming both shapes when a.cols != b.rows.
    """
    if a.cols != b.rows:
        raise ShapeMismatchError(
            f"matmul: inner dimensions differ, {a.rows}x{a.cols} @ {b.rows}x{b.cols}"
        )
    return Matrix._wrap(a.to_numpy() @ b.to_numpy())


def frobenius_norm(a: Matrix) -> float:
    """Square root of the sum of squared entries."""
    return float(np.linalg.norm(a.to_numpy()))


def entrywise_abs_sum(a: Matrix) -> float:
    """Sum of absolute values of all entries.

    Alternative layer-norm statistic to the Frobenius norm; report code
    always tags which of the two it used.
    """
    return float(np.abs(a.to_numpy()).sum())


def max_abs_diff(a: Matrix, b: Matrix) -> float:
    """Largest entrywise absolute difference between two same-shape matrices."""
    _check_same_shape(a, b, "max_abs_diff")
    return float(np.max(np.abs(a.to_numpy() - b.to_numpy())))
