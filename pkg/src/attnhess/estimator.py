"""Estimator-style front end: ``fit`` a batch of sequences, read the Hessian off fitted attributes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .hessian import HessianGrid, assemble, batch_mean
from .model import AttentionSpec, Head, Sequence, ShapeError, init_spec


def _as_batch(a, name: str) -> np.ndarray:
    a = check_array(a, allow_nd=True, ensure_2d=False, dtype=np.float64,
                    ensure_min_samples=1, input_name=name)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ShapeError(f"{name} must be (L, d_v) or (n_sequences, L, d_v), got ndim={a.ndim}")
    return a


class AttentionHessian(BaseEstimator):
    """Exact loss Hessian of one self-attention layer under square loss.

    ``fit(X, Y)`` takes one sequence ``(L, d_v)`` or a batch ``(n, L, d_v)``
    and stores the Hessian of the mean loss, split into its outer-product
    and functional parts. Weights are taken from the constructor or drawn
    from ``N(0, init_std^2)`` (default variance ``0.64 / d_v``).

    Attributes
    ----------
    spec_ : AttentionSpec
    grid_ : HessianGrid
    hessian_, outer_, functional_ : ndarray of shape (n_params_, n_params_)
    param_keys_ : list of (head, name)
    n_params_ : int
    n_features_in_ : int
    """

    def __init__(self, d_k=None, heads=1, activation="softmax", parameterization="classical",
                 temperature=1.0, init_std=None, random_state=None,
                 W_Q=None, W_K=None, W_V=None, W_QK=None, element_cap=None):
        self.d_k = d_k
        self.heads = heads
        self.activation = activation
        self.parameterization = parameterization
        self.temperature = temperature
        self.init_std = init_std
        self.random_state = random_state
        self.W_Q = W_Q
        self.W_K = W_K
        self.W_V = W_V
        self.W_QK = W_QK
        self.element_cap = element_cap

    def _make_spec(self, d_v: int) -> AttentionSpec:
        if self.W_V is None:
            rng = np.random.default_rng(check_random_state(self.random_state).randint(2**31 - 1))
            d_k = d_v if self.d_k is None else int(self.d_k)
            return init_spec(d_v, d_k, rng, std=self.init_std, heads=self.heads,
                             activation=self.activation, parameterization=self.parameterization,
                             temperature=self.temperature)
        if self.W_QK is not None:
            head = Head(W_V=self.W_V, W_QK=self.W_QK)
        else:
            head = Head(W_V=self.W_V, W_Q=self.W_Q, W_K=self.W_K)
        return AttentionSpec((head,), self.activation, self.temperature)

    def fit(self, X, Y):
        X = _as_batch(X, "X")
        Y = _as_batch(Y, "Y")
        if X.shape != Y.shape:
            raise ShapeError(f"X {X.shape} and Y {Y.shape} differ")
        self.spec_ = self._make_spec(X.shape[2])
        grids = [assemble(self.spec_, Sequence(x, y), cap=self.element_cap) for x, y in zip(X, Y)]
        self.grid_: HessianGrid = batch_mean(grids)
        self.hessian_ = self.grid_.matrix("full")
        self.outer_ = self.grid_.matrix("outer")
        self.functional_ = self.grid_.matrix("functional")
        self.param_keys_ = list(self.grid_.params)
        self.n_params_ = self.grid_.n_params
        self.n_features_in_ = X.shape[2]
        return self

    def block(self, row, col, part="full") -> np.ndarray:
        check_is_fitted(self, "grid_")
        return self.grid_.block(row, col, part).M

    def eigvalsh(self, part="full") -> np.ndarray:
        """Ascending eigenvalues of the fitted Hessian (or one of its parts)."""
        check_is_fitted(self, "grid_")
        return np.linalg.eigvalsh(self.grid_.matrix(part))
