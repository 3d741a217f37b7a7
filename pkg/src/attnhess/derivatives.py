"""Softmax derivatives and Jacobians of self-attention w.r.t. its weights.

Layouts follow the numerator convention with ``vecr`` flattening: a Jacobian
``dF/dW`` is ``(L d_v) x (rows(W) cols(W))`` and a second derivative stacks
the Hessians of every output entry into a block column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AttentionSpec, ForwardCache, ParameterizationError, Sequence
from .tensor_kit import DEFAULT_ELEMENT_CAP, SizeLimitError, block_diag, commutation


def softmax_row_jacobian(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    return np.diag(a) - np.outer(a, a)


def softmax_jacobian(A) -> np.ndarray:
    """``dA/dT`` for row-wise softmax: ``blockdiag(diag(a_i) - a_i a_iᵀ)``."""
    A = np.asarray(A, dtype=np.float64)
    return block_diag([softmax_row_jacobian(row) for row in A])


def softmax_entry_hessian(a: np.ndarray, j: int) -> np.ndarray:
    """Hessian of ``A_ij`` w.r.t. the i-th row of ``T`` given the row ``a = A_i``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    e = np.zeros_like(a)
    e[j] = 1.0
    return a[j] * (
        2.0 * np.outer(a, a) + np.outer(e, e) - np.diag(a) - np.outer(e, a) - np.outer(a, e)
    )


def softmax_second_row(A, i: int) -> np.ndarray:
    """The ``L^3 x L`` block ``D_i``: rows ``(j, k, l)`` hold ``[k == i] d²A_ij/dT_il dT_i·``."""
    A = np.asarray(A, dtype=np.float64)
    L = A.shape[0]
    D = np.zeros((L, L, L, L))
    for j in range(L):
        D[j, i] = softmax_entry_hessian(A[i], j)
    return D.reshape(L**3, L)


def softmax_second(A, cap: int | None = None) -> np.ndarray:
    """``d²A/dT²`` as a dense ``L^4 x L^2`` matrix, ``blockdiag(D_1, ..., D_L)``."""
    A = np.asarray(A, dtype=np.float64)
    L = A.shape[0]
    cap = DEFAULT_ELEMENT_CAP if cap is None else cap
    if L**6 > cap:
        raise SizeLimitError(
            f"softmax second derivative would be {L**4}x{L**2} scalars, above the cap {cap}; "
            "use softmax_second_row per row instead"
        )
    return block_diag([softmax_second_row(A, i) for i in range(L)])


@dataclass(frozen=True)
class SoftmaxJet:
    J: np.ndarray
    H2: np.ndarray


def activation_jet(activation: str, A, cap: int | None = None) -> SoftmaxJet:
    """First and second derivative of the activation at the attention matrix ``A``.

    For the identity activation these are ``I_{L^2}`` and zero.
    """
    A = np.asarray(A, dtype=np.float64)
    L = A.shape[0]
    if activation == "softmax":
        return SoftmaxJet(J=softmax_jacobian(A), H2=softmax_second(A, cap))
    return SoftmaxJet(J=np.eye(L * L), H2=np.zeros((L**4, L**2)))


def _jac_wrt_product(spec: AttentionSpec, seq: Sequence, cache: ForwardCache, head: int) -> np.ndarray:
    """Jacobian of ``F`` w.r.t. ``W = W_Q W_Kᵀ`` (or ``W_QK``), including the similarity scale."""
    X = seq.X
    L = seq.L
    W_V = spec.heads[head].W_V
    A = cache.heads[head].A
    left = np.kron(np.eye(L), W_V.T @ X.T)
    XX = np.kron(X, X)
    mid = softmax_jacobian(A) @ XX if spec.activation == "softmax" else XX
    return spec.similarity_scale() * (left @ mid)


def jac_value(spec: AttentionSpec, seq: Sequence, cache: ForwardCache, head: int = 0) -> np.ndarray:
    """``dF/dW_V = (A X) kron I_{d_v}``."""
    return np.kron(cache.heads[head].A @ seq.X, np.eye(seq.d_v))


def _require(spec: AttentionSpec, parameterization: str) -> None:
    if spec.parameterization != parameterization:
        raise ParameterizationError(
            f"operation needs {parameterization} parameterization, spec is {spec.parameterization}"
        )


def jac_query(spec: AttentionSpec, seq: Sequence, cache: ForwardCache, head: int = 0) -> np.ndarray:
    """``(I_L kron W_Vᵀ Xᵀ) dA/dT (X kron X W_K) / (t sqrt(d_k))``."""
    _require(spec, "classical")
    W_K = spec.heads[head].W_K
    return _jac_wrt_product(spec, seq, cache, head) @ np.kron(np.eye(seq.d_v), W_K)


def jac_key(spec: AttentionSpec, seq: Sequence, cache: ForwardCache, head: int = 0) -> np.ndarray:
    """``(I_L kron W_Vᵀ Xᵀ) dA/dT (X W_Q kron X) K_{d_k,d_v} / (t sqrt(d_k))``."""
    _require(spec, "classical")
    W_Q = spec.heads[head].W_Q
    d_v, d_k = W_Q.shape
    return _jac_wrt_product(spec, seq, cache, head) @ np.kron(W_Q, np.eye(d_v)) @ commutation(d_k, d_v)


def jac_qk_single(spec: AttentionSpec, seq: Sequence, cache: ForwardCache, head: int = 0) -> np.ndarray:
    """``(I_L kron W_Vᵀ Xᵀ) dA/dT (X kron X)`` (divided by ``t`` when a temperature is set)."""
    _require(spec, "single")
    return _jac_wrt_product(spec, seq, cache, head)


def jacobian(spec: AttentionSpec, seq: Sequence, cache: ForwardCache, key) -> np.ndarray:
    """Dispatch on a parameter key ``name`` or ``(head, name)``."""
    h, name = (0, key) if isinstance(key, str) else key
    fn = {"V": jac_value, "Q": jac_query, "K": jac_key, "QK": jac_qk_single}[name]
    return fn(spec, seq, cache, h)


@dataclass(frozen=True)
class JacobianSet:
    dF_dWV: np.ndarray
    dF_dWQ: np.ndarray | None = None
    dF_dWK: np.ndarray | None = None
    dF_dWQK: np.ndarray | None = None


def jacobians(spec: AttentionSpec, seq: Sequence, cache: ForwardCache, head: int = 0) -> JacobianSet:
    if spec.parameterization == "classical":
        return JacobianSet(
            dF_dWV=jac_value(spec, seq, cache, head),
            dF_dWQ=jac_query(spec, seq, cache, head),
            dF_dWK=jac_key(spec, seq, cache, head),
        )
    return JacobianSet(
        dF_dWV=jac_value(spec, seq, cache, head),
        dF_dWQK=jac_qk_single(spec, seq, cache, head),
    )
