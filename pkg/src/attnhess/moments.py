"""Attention moment matrices and the data matrices Z1, Z2 built from them.

Each attention row is a distribution over tokens; ``M1`` stacks its means,
``M2``/``M3`` its second/third central moments (flattened to ``L d_v^(k-1) x d_v``).
``Z1``/``Z2`` can be built either from the softmax derivatives directly or
from ``M2``/``M3`` via Khatri-Rao products; the two routes must agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_kit import BlockPartition, _check_size, as_mat, commutation, khatri_rao

STOCHASTIC_TOL = 1e-8


class NotStochasticError(ValueError):
    pass


@dataclass(frozen=True)
class MomentSet:
    M1: np.ndarray
    M2: np.ndarray
    M3: np.ndarray
    Z1: np.ndarray | None = None
    Z2: np.ndarray | None = None


def moments(A, X) -> MomentSet:
    """First moment and second/third central moments of every attention row."""
    A, X = as_mat(A), as_mat(X)
    L, d = X.shape
    if A.shape != (L, L):
        raise ValueError(f"A must be {L}x{L}, got {A.shape}")
    if np.max(np.abs(A.sum(axis=1) - 1.0)) > STOCHASTIC_TOL:
        raise NotStochasticError("attention rows must sum to 1")
    M1 = A @ X
    M2 = np.empty((L * d, d))
    M3 = np.empty((L * d * d, d))
    for i in range(L):
        C = X - M1[i]  # rows: x_j - m_i
        M2[i * d:(i + 1) * d] = np.einsum("j,ja,jb->ab", A[i], C, C)
        # (x_j - m_i) kron (x_j - m_i)(x_j - m_i)ᵀ, stacked (a, b) x c
        M3[i * d * d:(i + 1) * d * d] = np.einsum("j,ja,jb,jc->abc", A[i], C, C, C).reshape(d * d, d)
    return MomentSet(M1=M1, M2=M2, M3=M3)


def z1_direct(X, J, cap: int | None = None) -> np.ndarray:
    """``Z1 = (I_L kron Xᵀ) J (X kron X)`` for an activation Jacobian ``J``."""
    X = as_mat(X)
    L, d = X.shape
    _check_size(L * L, d * d, cap, "X kron X")
    return np.kron(np.eye(L), X.T) @ np.asarray(J) @ np.kron(X, X)


def z1_via_moments(X, M2) -> np.ndarray:
    """``Z1 = X * M2`` with ``X`` cut into rows and ``M2`` into ``d_v x d_v`` blocks."""
    X = as_mat(X)
    L, d = X.shape
    return khatri_rao(
        X, BlockPartition.uniform(L, 1, 1, d),
        M2, BlockPartition.uniform(L, d, 1, d),
    )


def z2_direct(X, H2, cap: int | None = None) -> np.ndarray:
    """``Z2 = (I_L kron Xᵀ kron Xᵀ kron Xᵀ) d²A/dT² (X kron X)``."""
    X = as_mat(X)
    L, d = X.shape
    _check_size(L * d**3, L**4, cap, "Z2 left factor I_L kron Xᵀ kron Xᵀ kron Xᵀ")
    _check_size(L * d**3, d * d, cap, "Z2")
    XtXtXt = np.kron(np.kron(X.T, X.T), X.T)
    left = np.kron(np.eye(L), XtXtXt)
    return left @ np.asarray(H2) @ np.kron(X, X)


def z2_via_moments(X, M3, cap: int | None = None) -> np.ndarray:
    """``Z2 = (I_L kron K_{d,d} kron I_d)(X * Xᵀ * M3)``.

    Block row ``i`` of ``X * Xᵀ`` is ``x_iᵀ kron x_i = x_i x_iᵀ``; the ``Xᵀ``
    factor is therefore cut into the ``d x 1`` columns ``x_i``.
    """
    X = as_mat(X)
    L, d = X.shape
    _check_size(L * d**3, d * d, cap, "Z2")
    xxT = khatri_rao(
        X, BlockPartition.uniform(L, 1, 1, d),
        X.reshape(L * d, 1), BlockPartition.uniform(L, d, 1, 1),
    )
    core = khatri_rao(
        xxT, BlockPartition.uniform(L, d, 1, d),
        M3, BlockPartition.uniform(L, d * d, 1, d),
        cap=cap,
    )
    perm = np.kron(np.kron(np.eye(L), commutation(d, d)), np.eye(d))
    return perm @ core
