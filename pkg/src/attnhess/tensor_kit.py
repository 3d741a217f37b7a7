"""Dense Kronecker-family kernels under the row-major flattening convention.

Every matrix derivative in this package is written against ``vecr`` (row
stacking), so ``vecr(A @ X @ B) == kron(A, B.T) @ vecr(X)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_ELEMENT_CAP = 2**26


class SizeLimitError(ValueError):
    """A dense result would exceed the configured element cap."""


class PartitionError(ValueError):
    """Block partitions are inconsistent with each other or with a matrix."""


def _check_size(rows: int, cols: int, cap: int | None, what: str) -> None:
    cap = DEFAULT_ELEMENT_CAP if cap is None else cap
    if rows * cols > cap:
        raise SizeLimitError(
            f"{what} would be {rows}x{cols} = {rows * cols} scalars, "
            f"above the element cap of {cap}"
        )


def as_mat(m) -> np.ndarray:
    """Coerce to a finite float64 2-d array (1-d input becomes a row)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def vecr(m) -> np.ndarray:
    """Row-stacking flatten; entry (i, j) lands at ``i * cols + j``."""
    return as_mat(m).reshape(-1, 1)


def unvecr(v, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(rows, cols)


def kron(a, b, cap: int | None = None) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    _check_size(a.shape[0] * b.shape[0], a.shape[1] * b.shape[1], cap, "kron")
    return np.kron(a, b)


def eye(n: int) -> np.ndarray:
    return np.eye(n)


def commutation(n: int, m: int, cap: int | None = None) -> np.ndarray:
    """Commutation matrix ``K_{n,m}``.

    For any ``m x n`` matrix ``A``: ``commutation(n, m) @ vecr(A) == vecr(A.T)``.
    """
    if n < 1 or m < 1:
        raise ValueError("commutation sizes must be >= 1")
    _check_size(m * n, m * n, cap, "commutation")
    K = np.zeros((m * n, m * n))
    # vecr(A.T)[j*m + i] = A[i, j] = vecr(A)[i*n + j]
    i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    K[(j * m + i).ravel(), (i * n + j).ravel()] = 1.0
    return K


@dataclass(frozen=True)
class BlockPartition:
    """Row- and column-block sizes used to cut a matrix into a block grid."""

    row_sizes: tuple[int, ...]
    col_sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "row_sizes", tuple(int(s) for s in self.row_sizes))
        object.__setattr__(self, "col_sizes", tuple(int(s) for s in self.col_sizes))
        if not self.row_sizes or not self.col_sizes:
            raise PartitionError("partition needs at least one row and one column block")
        if min(self.row_sizes) < 1 or min(self.col_sizes) < 1:
            raise PartitionError("block sizes must be >= 1")

    @classmethod
    def uniform(cls, n_row_blocks: int, row_size: int, n_col_blocks: int, col_size: int):
        return cls((row_size,) * n_row_blocks, (col_size,) * n_col_blocks)

    @classmethod
    def trivial(cls, m) -> BlockPartition:
        m = as_mat(m)
        return cls((m.shape[0],), (m.shape[1],))

    @property
    def grid(self) -> tuple[int, int]:
        return len(self.row_sizes), len(self.col_sizes)

    @property
    def shape(self) -> tuple[int, int]:
        return sum(self.row_sizes), sum(self.col_sizes)

    def blocks(self, m: np.ndarray):
        if m.shape != self.shape:
            raise PartitionError(f"partition covers {self.shape}, matrix is {m.shape}")
        r_off = np.concatenate([[0], np.cumsum(self.row_sizes)])
        c_off = np.concatenate([[0], np.cumsum(self.col_sizes)])
        return [
            [m[r_off[i]:r_off[i + 1], c_off[j]:c_off[j + 1]] for j in range(len(self.col_sizes))]
            for i in range(len(self.row_sizes))
        ]


def khatri_rao(a, pa: BlockPartition, b, pb: BlockPartition, cap: int | None = None) -> np.ndarray:
    """Block-wise Kronecker product of two identically gridded block matrices."""
    a, b = as_mat(a), as_mat(b)
    if pa.grid != pb.grid:
        raise PartitionError(f"block grids differ: {pa.grid} vs {pb.grid}")
    rows = sum(r * s for r, s in zip(pa.row_sizes, pb.row_sizes))
    cols = sum(r * s for r, s in zip(pa.col_sizes, pb.col_sizes))
    _check_size(rows, cols, cap, "khatri_rao")
    ba, bb = pa.blocks(a), pb.blocks(b)
    return np.block([[np.kron(x, y) for x, y in zip(ra, rb)] for ra, rb in zip(ba, bb)])


def shuffle_S(d: int) -> np.ndarray:
    """``(I_d kron K_{d,d}) (vecr(I_d) kron I_d)``, a ``d^3 x d`` 0/1 matrix."""
    I = np.eye(d)
    return np.kron(I, commutation(d, d)) @ np.kron(vecr(I), I)


def shuffle_S_alt(d: int) -> np.ndarray:
    """Second construction of the same matrix: ``(K_{d,d} kron I_d)(I_d kron vecr(I_d))``."""
    I = np.eye(d)
    return np.kron(commutation(d, d), I) @ np.kron(I, vecr(I))


def block_diag(blocks: Sequence) -> np.ndarray:
    if len(blocks) == 0:
        raise ValueError("block_diag needs at least one block")
    mats = [as_mat(b) for b in blocks]
    out = np.zeros((sum(m.shape[0] for m in mats), sum(m.shape[1] for m in mats)))
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out
