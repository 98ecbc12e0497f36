"""
Deterministic dense and sparse linear-algebra primitives.

Dense matrices are plain float64 numpy arrays. Sparse matrices use a canonical
compressed-sparse-row layout (strictly increasing columns per row, no
duplicates). spmm and the dense matmul accumulate every output row in
ascending column order, so they agree exactly; transposed products used by
the backward passes go through scipy.sparse.
Everything downstream (attention, diffusion, encoder) builds on these.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Tuple

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp

from .errors import (
    DimensionMismatch,
    DuplicateEdge,
    EmptyRow,
    IndexOutOfRange,
    NonFiniteOutput,
)

logger = logging.getLogger(__name__)

# Type aliases for common types
DenseMatrix = npt.NDArray[np.float64]
IndexArray = npt.NDArray[np.int64]


def as_dense(data, name: str = "matrix") -> DenseMatrix:
    """Coerce array-like input into a 2-D float64 matrix."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def ensure_finite(arr: np.ndarray, operation: str) -> np.ndarray:
    """Raise NonFiniteOutput if arr contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteOutput(f"{operation} produced non-finite values", {"operation": operation})
    return arr


@dataclass(frozen=True)
class SparsityPattern:
    """Structure of a CSR matrix: row offsets and column indices, no values."""

    rows: int
    cols: int
    row_offsets: IndexArray
    col_indices: IndexArray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", np.asarray(self.row_offsets, dtype=np.int64))
        object.__setattr__(self, "col_indices", np.asarray(self.col_indices, dtype=np.int64))
        if self.validate:
            _validate_structure(self.rows, self.cols, self.row_offsets, self.col_indices)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @cached_property
    def row_ids(self) -> IndexArray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.row_offsets))

    @cached_property
    def row_lengths(self) -> IndexArray:
        return np.diff(self.row_offsets)

    def has_empty_row(self) -> bool:
        return bool(np.any(self.row_lengths == 0))

    def with_values(self, values) -> "CsrMatrix":
        """Attach values aligned with col_indices."""
        return CsrMatrix(
            self.rows, self.cols, self.row_offsets, self.col_indices,
            np.asarray(values, dtype=np.float64), validate=False,
        )

    def ones(self) -> "CsrMatrix":
        return self.with_values(np.ones(self.nnz))

    def is_symmetric(self) -> bool:
        if self.rows != self.cols:
            return False
        a = self.ones().to_scipy()
        return (a != a.T).nnz == 0

    def has_full_diagonal(self) -> bool:
        if self.rows != self.cols:
            return False
        return bool(np.all(self.ones().to_scipy().diagonal() == 1.0))


def _validate_structure(rows: int, cols: int, offsets: np.ndarray, col_indices: np.ndarray) -> None:
    if rows < 0 or cols < 0:
        raise DimensionMismatch(f"negative shape ({rows}, {cols})")
    if offsets.shape != (rows + 1,):
        raise DimensionMismatch(f"row_offsets must have length {rows + 1}, got {offsets.shape[0]}")
    if offsets[0] != 0 or np.any(np.diff(offsets) < 0):
        raise DimensionMismatch("row_offsets must start at 0 and be monotone")
    nnz = int(offsets[-1])
    if col_indices.shape != (nnz,):
        raise DimensionMismatch(f"expected {nnz} column indices, got {col_indices.shape[0]}")
    if nnz and (col_indices.min() < 0 or col_indices.max() >= cols):
        raise IndexOutOfRange("column index out of range", {"cols": cols})
    if nnz > 1:
        steps = np.diff(col_indices)
        row_start = np.zeros(nnz - 1, dtype=bool)
        boundaries = offsets[1:-1] - 1
        boundaries = boundaries[(boundaries >= 0) & (boundaries < nnz - 1)]
        row_start[boundaries] = True
        if np.any((steps <= 0) & ~row_start):
            raise DuplicateEdge("columns within a row must be strictly increasing")


@dataclass(frozen=True)
class CsrMatrix:
    """Canonical compressed-sparse-row matrix with float64 values."""

    rows: int
    cols: int
    row_offsets: IndexArray
    col_indices: IndexArray
    values: DenseMatrix
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", np.asarray(self.row_offsets, dtype=np.int64))
        object.__setattr__(self, "col_indices", np.asarray(self.col_indices, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.shape != self.col_indices.shape:
            raise DimensionMismatch("values must align with col_indices")
        if self.validate:
            _validate_structure(self.rows, self.cols, self.row_offsets, self.col_indices)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @cached_property
    def pattern(self) -> SparsityPattern:
        return SparsityPattern(self.rows, self.cols, self.row_offsets, self.col_indices, validate=False)

    @cached_property
    def _scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape, copy=False
        )

    def to_scipy(self) -> sp.csr_matrix:
        return self._scipy

    def to_dense(self) -> DenseMatrix:
        out = np.zeros(self.shape, dtype=np.float64)
        out[self.pattern.row_ids, self.col_indices] = self.values
        return out

    def with_values(self, values) -> "CsrMatrix":
        return self.pattern.with_values(values)


def csr_from_coo(rows: int, cols: int, row_idx, col_idx, values) -> CsrMatrix:
    """
    Build a canonical CSR matrix from coordinate arrays.

    Raises:
        IndexOutOfRange: If any coordinate falls outside (rows, cols)
        DuplicateEdge: If a (row, col) pair occurs twice
    """
    r = np.asarray(row_idx, dtype=np.int64).ravel()
    c = np.asarray(col_idx, dtype=np.int64).ravel()
    v = np.asarray(values, dtype=np.float64).ravel()
    if not (r.shape == c.shape == v.shape):
        raise DimensionMismatch("coordinate arrays must have equal length")
    if r.size and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
        bad = int(np.flatnonzero((r < 0) | (r >= rows) | (c < 0) | (c >= cols))[0])
        raise IndexOutOfRange(
            f"edge ({r[bad]}, {c[bad]}) outside shape ({rows}, {cols})",
            {"row": int(r[bad]), "col": int(c[bad])},
        )
    order = np.lexsort((c, r))
    r, c, v = r[order], c[order], v[order]
    if r.size > 1:
        dup = np.flatnonzero((r[1:] == r[:-1]) & (c[1:] == c[:-1]))
        if dup.size:
            i = int(dup[0])
            raise DuplicateEdge(f"duplicate edge ({r[i]}, {c[i]})", {"row": int(r[i]), "col": int(c[i])})
    offsets = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=rows), out=offsets[1:])
    return CsrMatrix(rows, cols, offsets, c, v, validate=False)


def csr_from_edges(rows: int, cols: int, edges: Iterable[Tuple[int, int, float]]) -> CsrMatrix:
    """Build a canonical CSR matrix from (row, col, value) triples."""
    triples = list(edges)
    if not triples:
        return csr_from_coo(rows, cols, [], [], [])
    r, c, v = zip(*triples)
    return csr_from_coo(rows, cols, r, c, v)


def spmm(a: CsrMatrix, b: DenseMatrix) -> DenseMatrix:
    """
    Sparse x dense product in O(nnz * b.cols).

    Each output row accumulates its stored entries in ascending column order,
    the same order `matmul` uses, so spmm(a, b) equals matmul(a.to_dense(), b)
    bit for bit.
    """
    b = as_dense(b, "b")
    if a.cols != b.shape[0]:
        raise DimensionMismatch(f"spmm: {a.shape} x {b.shape}")
    out = np.zeros((a.rows, b.shape[1]), dtype=np.float64)
    lengths = a.pattern.row_lengths
    starts = a.row_offsets[:-1]
    # step p adds the p-th stored entry of every row that has one
    for p in range(int(lengths.max(initial=0))):
        active = np.flatnonzero(lengths > p)
        slots = starts[active] + p
        out[active] += a.values[slots, None] * b[a.col_indices[slots]]
    return ensure_finite(out, "spmm")


def spmm_transposed(a: CsrMatrix, b: DenseMatrix) -> DenseMatrix:
    """aᵀ x dense, used by the backward passes."""
    if a.rows != b.shape[0]:
        raise DimensionMismatch(f"spmm_transposed: {a.shape}ᵀ x {b.shape}")
    return np.asarray(a.to_scipy().T @ b, dtype=np.float64)


def segment_softmax(values: np.ndarray, pattern: SparsityPattern) -> np.ndarray:
    """
    Softmax over each row's stored entries, stabilized by the row max.

    values may carry trailing axes (e.g. one column per attention head);
    the reduction always runs along axis 0 within row segments.
    """
    if pattern.nnz == 0:
        return np.array(values, dtype=np.float64, copy=True)
    if pattern.has_empty_row():
        row = int(np.flatnonzero(pattern.row_lengths == 0)[0])
        raise EmptyRow(f"row {row} has no structural entries", {"row": row})
    starts = pattern.row_offsets[:-1]
    row_ids = pattern.row_ids
    row_max = np.maximum.reduceat(values, starts, axis=0)
    shifted = np.exp(values - row_max[row_ids])
    sums = np.add.reduceat(shifted, starts, axis=0)
    return shifted / sums[row_ids]


def segment_sum(values: np.ndarray, pattern: SparsityPattern) -> np.ndarray:
    """Per-row sum of stored entries (rows must be nonempty)."""
    if pattern.nnz == 0:
        return np.zeros((pattern.rows,) + values.shape[1:])
    return np.add.reduceat(values, pattern.row_offsets[:-1], axis=0)


def masked_row_softmax(logits: CsrMatrix) -> CsrMatrix:
    """Row softmax restricted to structural entries; keeps the pattern."""
    probs = segment_softmax(logits.values, logits.pattern)
    return logits.with_values(ensure_finite(probs, "masked_row_softmax"))


# Dense reference operations

def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Row-major product accumulated over k in ascending order (see spmm)."""
    a, b = as_dense(a, "a"), as_dense(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"matmul: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k]
    return ensure_finite(out, "matmul")


def add(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    if a.shape != b.shape:
        raise DimensionMismatch(f"add: {a.shape} + {b.shape}")
    return ensure_finite(a + b, "add")


def scale(a: DenseMatrix, factor: float) -> DenseMatrix:
    return ensure_finite(a * factor, "scale")


def transpose(a: DenseMatrix) -> DenseMatrix:
    return np.ascontiguousarray(a.T)


def row_softmax(a: DenseMatrix) -> DenseMatrix:
    """Dense row softmax; -inf entries get zero weight."""
    row_max = np.max(a, axis=1, keepdims=True)
    if np.any(~np.isfinite(row_max)):
        raise EmptyRow("row softmax over a row with no finite entry")
    shifted = np.exp(a - row_max)
    return ensure_finite(shifted / shifted.sum(axis=1, keepdims=True), "row_softmax")


def fd_gradient(f: Callable[[np.ndarray], float], at: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Scalar-valued function of an array shaped like `at`
        at: Evaluation point (left untouched)
        eps: Perturbation size

    Returns:
        Array shaped like `at` with (f(x+eps e_i) - f(x-eps e_i)) / (2 eps)
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(at, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + eps
        f_plus = float(f(x))
        x[idx] = original - eps
        f_minus = float(f(x))
        x[idx] = original
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return ensure_finite(grad, "fd_gradient")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error used by the gradient checks."""
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    denom = max(float(np.linalg.norm(np.ravel(analytic))), float(np.linalg.norm(np.ravel(numeric))), 1e-12)
    return diff / denom


def block_diagonal(blocks) -> CsrMatrix:
    """Disjoint union of square CSR matrices; slot order follows block order."""
    blocks = list(blocks)
    if not blocks:
        return csr_from_coo(0, 0, [], [], [])
    offsets, cols, values = [np.zeros(1, dtype=np.int64)], [], []
    node_base = nnz_base = 0
    for block in blocks:
        if block.rows != block.cols:
            raise DimensionMismatch("block_diagonal expects square blocks")
        offsets.append(block.row_offsets[1:] + nnz_base)
        cols.append(block.col_indices + node_base)
        values.append(block.values)
        node_base += block.rows
        nnz_base += block.nnz
    return CsrMatrix(
        node_base, node_base, np.concatenate(offsets), np.concatenate(cols),
        np.concatenate(values), validate=False,
    )
