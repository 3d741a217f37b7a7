"""Self-attention forward map ``f(X) = a(T(X)) X W_V`` and the square loss."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .tensor_kit import as_mat, vecr

ACTIVATIONS = ("softmax", "identity")


class ShapeError(ValueError):
    pass


class ParameterizationError(ValueError):
    """Operation requested for a parameterization the AttentionSpec does not use."""


@dataclass(frozen=True)
class Sequence:
    """One token sequence ``X`` (L x d_v) and its labels ``Y`` (same shape)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X, Y = as_mat(self.X), as_mat(self.Y)
        if X.shape != Y.shape:
            raise ShapeError(f"X is {X.shape} but Y is {Y.shape}")
        X.flags.writeable = False
        Y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def L(self) -> int:
        return self.X.shape[0]

    @property
    def d_v(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class Head:
    """Weights of one attention head.

    Either ``W_Q`` and ``W_K`` (classical, both d_v x d_k) or ``W_QK``
    (single matrix, d_v x d_v) must be given, never both.
    """

    W_V: np.ndarray
    W_Q: np.ndarray | None = None
    W_K: np.ndarray | None = None
    W_QK: np.ndarray | None = None

    def __post_init__(self):
        for name in ("W_V", "W_Q", "W_K", "W_QK"):
            w = getattr(self, name)
            if w is not None:
                w = as_mat(w)
                w.flags.writeable = False
                object.__setattr__(self, name, w)
        classical = self.W_Q is not None or self.W_K is not None
        if classical and self.W_QK is not None:
            raise ParameterizationError("give either W_Q/W_K or W_QK, not both")
        if classical and (self.W_Q is None or self.W_K is None):
            raise ParameterizationError("classical heads need both W_Q and W_K")
        if not classical and self.W_QK is None:
            raise ParameterizationError("head has no query-key weights")
        d_v = self.W_V.shape[0]
        if self.W_V.shape != (d_v, d_v):
            raise ShapeError(f"W_V must be square, got {self.W_V.shape}")
        if classical:
            if self.W_Q.shape != self.W_K.shape or self.W_Q.shape[0] != d_v:
                raise ShapeError(
                    f"W_Q {self.W_Q.shape} and W_K {self.W_K.shape} must both be {d_v} x d_k"
                )
        elif self.W_QK.shape != (d_v, d_v):
            raise ShapeError(f"W_QK must be {d_v} x {d_v}, got {self.W_QK.shape}")

    @property
    def parameterization(self) -> str:
        return "single" if self.W_QK is not None else "classical"

    @property
    def param_names(self) -> tuple[str, ...]:
        return ("QK", "V") if self.W_QK is not None else ("Q", "K", "V")

    def get(self, name: str) -> np.ndarray:
        try:
            w = getattr(self, "W_" + name)
        except AttributeError:
            raise KeyError(name) from None
        if w is None:
            raise ParameterizationError(f"{self.parameterization} head has no W_{name}")
        return w


@dataclass(frozen=True)
class AttentionSpec:
    """Weights plus variant flags selecting the model all formulas refer to."""

    heads: tuple[Head, ...]
    activation: str = "softmax"
    temperature: float = 1.0

    def __post_init__(self):
        heads = tuple(self.heads)
        if not heads:
            raise ValueError("need at least one head")
        object.__setattr__(self, "heads", heads)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        ref = heads[0]
        for h in heads[1:]:
            if h.parameterization != ref.parameterization:
                raise ParameterizationError("all heads must share one parameterization")
            for name in ref.param_names:
                if h.get(name).shape != ref.get(name).shape:
                    raise ShapeError(f"head weight W_{name} shapes differ across heads")

    @classmethod
    def classical(cls, W_Q, W_K, W_V, activation="softmax", temperature=1.0):
        return cls((Head(W_V=W_V, W_Q=W_Q, W_K=W_K),), activation, temperature)

    @classmethod
    def single(cls, W_QK, W_V, activation="softmax", temperature=1.0):
        return cls((Head(W_V=W_V, W_QK=W_QK),), activation, temperature)

    @property
    def parameterization(self) -> str:
        return self.heads[0].parameterization

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d_v(self) -> int:
        return self.heads[0].W_V.shape[0]

    @property
    def d_k(self) -> int:
        h = self.heads[0]
        return h.W_Q.shape[1] if h.W_QK is None else h.W_QK.shape[1]

    # single-head conveniences
    @property
    def W_V(self):
        return self.heads[0].W_V

    @property
    def W_Q(self):
        return self.heads[0].get("Q")

    @property
    def W_K(self):
        return self.heads[0].get("K")

    @property
    def W_QK(self):
        return self.heads[0].get("QK")

    def similarity_scale(self) -> float:
        """Scalar multiplying ``X W Xᵀ``: ``1/(t sqrt(d_k))`` classical, ``1/t`` single."""
        if self.parameterization == "classical":
            return 1.0 / (self.temperature * np.sqrt(self.d_k))
        return 1.0 / self.temperature

    def param_keys(self) -> list[tuple[int, str]]:
        """Canonical parameter ordering: per head, ``Q, K, V`` (or ``QK, V``)."""
        return [(h, name) for h, head in enumerate(self.heads) for name in head.param_names]

    def get_param(self, key) -> np.ndarray:
        h, name = _norm_key(key)
        return self.heads[h].get(name)

    def with_param(self, key, value) -> AttentionSpec:
        h, name = _norm_key(key)
        value = as_mat(value)
        if value.shape != self.get_param((h, name)).shape:
            raise ShapeError(f"W_{name} must keep shape {self.get_param((h, name)).shape}")
        heads = list(self.heads)
        heads[h] = replace(heads[h], **{"W_" + name: value})
        return replace(self, heads=tuple(heads))

    def with_temperature(self, t: float) -> AttentionSpec:
        return replace(self, temperature=t)

    def with_activation(self, activation: str) -> AttentionSpec:
        return replace(self, activation=activation)


def _norm_key(key) -> tuple[int, str]:
    if isinstance(key, str):
        return 0, key
    h, name = key
    return int(h), name


@dataclass(frozen=True)
class HeadCache:
    T: np.ndarray
    A: np.ndarray


@dataclass(frozen=True)
class ForwardCache:
    """Intermediates shared by every derivative formula.

    ``T`` and ``A`` are those of head 0; ``heads`` holds all of them.
    """

    F: np.ndarray
    delta: np.ndarray
    heads: tuple[HeadCache, ...] = field(repr=False)

    @property
    def T(self) -> np.ndarray:
        return self.heads[0].T

    @property
    def A(self) -> np.ndarray:
        return self.heads[0].A


def _check_conform(spec: AttentionSpec, seq: Sequence) -> None:
    if seq.d_v != spec.d_v:
        raise ShapeError(f"sequence has d_v={seq.d_v}, weights expect {spec.d_v}")


def similarity(spec: AttentionSpec, seq: Sequence, head: int = 0) -> np.ndarray:
    _check_conform(spec, seq)
    h = spec.heads[head]
    X = seq.X
    if h.W_QK is None:
        W = h.W_Q @ h.W_K.T
    else:
        W = h.W_QK
    return spec.similarity_scale() * (X @ W @ X.T)


def softmax_rows(T: np.ndarray) -> np.ndarray:
    Z = T - T.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def attend(spec: AttentionSpec | str, T) -> np.ndarray:
    """Row-wise activation; any number of rows is accepted."""
    activation = spec if isinstance(spec, str) else spec.activation
    T = as_mat(T)
    if activation == "softmax":
        return softmax_rows(T)
    return T.copy()


def forward(spec: AttentionSpec, seq: Sequence) -> ForwardCache:
    _check_conform(spec, seq)
    caches = []
    F = np.zeros_like(seq.X)
    for h, head in enumerate(spec.heads):
        T = similarity(spec, seq, h)
        A = attend(spec, T)
        F = F + A @ seq.X @ head.W_V
        caches.append(HeadCache(T=T, A=A))
    return ForwardCache(F=F, delta=vecr(F - seq.Y), heads=tuple(caches))


def loss(cache: ForwardCache, seq: Sequence) -> float:
    """``||F - Y||_F^2 / (L d_v)``."""
    R = cache.F - seq.Y
    return float(np.sum(R * R) / seq.X.size)


def loss_gradient(cache: ForwardCache, seq: Sequence) -> np.ndarray:
    """Gradient of the loss w.r.t. ``vecr(F)`` as an ``L d_v`` column."""
    return (2.0 / seq.X.size) * cache.delta


def loss_hessian(seq: Sequence) -> np.ndarray:
    return (2.0 / seq.X.size) * np.eye(seq.X.size)


def total_loss(spec: AttentionSpec, seq: Sequence) -> float:
    return loss(forward(spec, seq), seq)


def init_spec(
    d_v: int,
    d_k: int,
    rng: np.random.Generator,
    *,
    std: float | None = None,
    heads: int = 1,
    activation: str = "softmax",
    parameterization: str = "classical",
    temperature: float = 1.0,
) -> AttentionSpec:
    """Random weights from ``N(0, std^2)``; default variance ``0.64 / d_v``."""
    std = np.sqrt(0.64 / d_v) if std is None else std
    hs = []
    for _ in range(heads):
        if parameterization == "classical":
            hs.append(Head(
                W_Q=rng.normal(0.0, std, (d_v, d_k)),
                W_K=rng.normal(0.0, std, (d_v, d_k)),
                W_V=rng.normal(0.0, std, (d_v, d_v)),
            ))
        elif parameterization == "single":
            hs.append(Head(
                W_QK=rng.normal(0.0, std, (d_v, d_v)),
                W_V=rng.normal(0.0, std, (d_v, d_v)),
            ))
        else:
            raise ValueError(f"unknown parameterization {parameterization!r}")
    return AttentionSpec(tuple(hs), activation, temperature)


def sum_of_heads(specs: Iterable[AttentionSpec]) -> AttentionSpec:
    specs = list(specs)
    heads = tuple(h for s in specs for h in s.heads)
    return AttentionSpec(heads, specs[0].activation, specs[0].temperature)
