"""Dense and sparse numeric containers plus the two matrix products.

Activations are plain ``numpy.ndarray`` objects of rank 4 laid out as
``(batch, channels, height, width)``; dense matrices are rank-2 arrays in
row-major order.  Only the compressed-sparse-row container needs its own
type.

Both products accumulate over the shared dimension in ascending order and
never split one output element's reduction, so any partition of the output
rows produces bitwise identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

#: Supported scalar precisions, keyed by the name used in configs.
PRECISIONS = {"float32": np.float32, "float64": np.float64}

INDEX_DTYPE = np.uint32


def resolve_dtype(precision) -> np.dtype:
    """Map ``"float32"``/``"float64"`` (or a numpy dtype) to a dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; "
                             f"expected one of {sorted(PRECISIONS)}") from None
    dtype = np.dtype(precision)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    return dtype


def as_tensor(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a C-contiguous rank-4 array.

    Rank-3 input is treated as a single image and gains a batch axis.
    """
    arr = np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    return np.ascontiguousarray(arr, dtype=resolve_dtype(dtype))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; PCG64 streams are identical on every platform."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True)
class CsrMatrix:
    """Strict compressed-sparse-row matrix (no stored zeros)."""

    rows: int
    cols: int
    values: np.ndarray
    col_idx: np.ndarray
    row_ptr: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values)
        col_idx = np.ascontiguousarray(self.col_idx, dtype=INDEX_DTYPE)
        row_ptr = np.ascontiguousarray(self.row_ptr, dtype=INDEX_DTYPE)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "col_idx", col_idx)
        object.__setattr__(self, "row_ptr", row_ptr)
        self.check()

    def check(self):
        """Raise :class:`ShapeError` unless every CSR invariant holds."""
        if self.rows < 0 or self.cols < 0:
            raise ShapeError("negative extents")
        if self.values.ndim != 1 or self.col_idx.ndim != 1 or self.row_ptr.ndim != 1:
            raise ShapeError("CSR arrays must be one-dimensional")
        if len(self.row_ptr) != self.rows + 1:
            raise ShapeError(f"row_ptr has length {len(self.row_ptr)}, expected {self.rows + 1}")
        nnz = len(self.values)
        if len(self.col_idx) != nnz:
            raise ShapeError("values and col_idx lengths differ")
        if self.row_ptr[0] != 0 or int(self.row_ptr[-1]) != nnz:
            raise ShapeError("row_ptr must start at 0 and end at nnz")
        ptr = self.row_ptr.astype(np.int64)
        if np.any(np.diff(ptr) < 0):
            raise ShapeError("row_ptr must be non-decreasing")
        if nnz:
            if int(self.col_idx.max()) >= self.cols:
                raise ShapeError("column index out of range")
            steps = np.diff(self.col_idx.astype(np.int64))
            # a step that is not strictly increasing is only legal at a row boundary
            row_starts = np.zeros(nnz, dtype=bool)
            starts = ptr[:-1][ptr[:-1] < nnz]
            row_starts[starts] = True
            if np.any((steps <= 0) & ~row_starts[1:]):
                raise ShapeError("column indices must be strictly increasing within a row")
            if np.any(self.values == 0):
                raise ShapeError("strict CSR forbids stored zeros")

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def dtype(self):
        return self.values.dtype

    def row(self, i):
        """Return ``(col_idx, values)`` for row ``i``."""
        start, stop = int(self.row_ptr[i]), int(self.row_ptr[i + 1])
        return self.col_idx[start:stop], self.values[start:stop]

    def nbytes(self) -> int:
        """Storage bytes with 4-byte reals and 4-byte indices."""
        return 4 * self.nnz + 4 * self.nnz + 4 * (self.rows + 1)

    def __eq__(self, other):
        if not isinstance(other, CsrMatrix):
            return NotImplemented
        return (self.shape == other.shape
                and self.values.dtype == other.values.dtype
                and self.values.tobytes() == other.values.tobytes()
                and np.array_equal(self.col_idx, other.col_idx)
                and np.array_equal(self.row_ptr, other.row_ptr))

    __hash__ = None


def csr_from_dense(m, tol: float = 0.0) -> CsrMatrix:
    """Encode a dense matrix, dropping every entry with ``|value| <= tol``."""
    if tol < 0:
        raise ValueError("tol must be non-negative")
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    if m.dtype not in (np.float32, np.float64):
        m = m.astype(np.float64)
    keep = np.abs(m) > tol
    rows, cols = np.nonzero(keep)  # row-major order, so columns ascend per row
    counts = np.bincount(rows, minlength=m.shape[0])
    row_ptr = np.zeros(m.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    return CsrMatrix(m.shape[0], m.shape[1], m[rows, cols].copy(), cols, row_ptr)


def csr_to_dense(a: CsrMatrix) -> np.ndarray:
    out = np.zeros(a.shape, dtype=a.values.dtype)
    if a.nnz:
        counts = np.diff(a.row_ptr.astype(np.int64))
        rows = np.repeat(np.arange(a.rows), counts)
        out[rows, a.col_idx.astype(np.intp)] = a.values
    return out


def _check_matrix(a, name):
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {a.shape}")


def ordered_sum(m, out=None):
    """Column sums of a 2-D array, adding rows strictly first to last.

    numpy sums a single contiguous run pairwise, which would make results
    depend on how many (possibly zero) terms are present; a one-column input
    is therefore accumulated explicitly.
    """
    if m.shape[1] == 1:
        total = np.add.accumulate(m[:, 0])[-1:] if m.shape[0] else np.zeros(1, m.dtype)
        if out is None:
            return total
        out[...] = total
        return out
    return np.add.reduce(m, axis=0, out=out)


def gemm(a, b, out=None) -> np.ndarray:
    """``a @ b`` with the reduction over ``k`` performed in ascending order.

    Each step is an elementwise rank-1 update, so the value of ``c[i, j]`` is
    ``((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...`` regardless of how rows are
    distributed among workers.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check_matrix(a, "a")
    _check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm dimension mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    shape = (a.shape[0], b.shape[1])
    if out is None:
        out = np.zeros(shape, dtype=dtype)
    else:
        if out.shape != shape:
            raise ShapeError(f"out has shape {out.shape}, expected {shape}")
        out[...] = 0
    if out.size == 0:
        return out
    tmp = np.empty(shape, dtype=dtype)
    for k in range(a.shape[1]):
        np.multiply(a[:, k:k + 1], b[k:k + 1, :], out=tmp)
        out += tmp
    return out


def spmm(a: CsrMatrix, b, out=None, row_range=None) -> np.ndarray:
    """Sparse-times-dense product.

    Only stored entries are multiplied, in ascending column order per row.
    ``row_range=(start, stop)`` restricts the work to a band of output rows;
    the remaining rows of ``out`` are left untouched.
    """
    b = np.asarray(b)
    _check_matrix(b, "b")
    if a.cols != b.shape[0]:
        raise ShapeError(f"spmm dimension mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.values, b)
    if out is None:
        out = np.zeros((a.rows, b.shape[1]), dtype=dtype)
    start, stop = (0, a.rows) if row_range is None else row_range
    ptr = a.row_ptr
    for i in range(start, stop):
        lo, hi = int(ptr[i]), int(ptr[i + 1])
        if hi == lo:
            out[i] = 0
            continue
        gathered = b[a.col_idx[lo:hi].astype(np.intp)]
        gathered *= a.values[lo:hi, None]
        ordered_sum(gathered, out=out[i])
    return out
