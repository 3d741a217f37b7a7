"""Closed-form loss Hessian of a self-attention layer under square loss.

The Hessian splits into an outer-product (Gauss-Newton) part
``Jᵀ (d²l/dF²) J`` and a functional part ``(dl/dF kron I) d²F/dW²``.
Blocks are indexed by parameter keys ``(head, name)`` with ``name`` in
``Q, K, V`` (classical) or ``QK, V`` (single matrix). Within a block,
parameters are flattened row-major.

Notation used below: ``s = 2 / (L d_v)`` is the loss curvature,
``c = 1 / (t sqrt(d_k))`` the similarity scale, ``P_Q = I kron W_K`` and
``P_K = (W_Q kron I) K_{d_k,d_v}`` map query/key perturbations onto the
product ``W_Q W_Kᵀ``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .derivatives import activation_jet, jacobian
from .model import (
    AttentionSpec,
    ForwardCache,
    ParameterizationError,
    Sequence,
    forward,
)
from .moments import MomentSet, moments as _moments, z1_direct, z2_direct
from .tensor_kit import commutation, kron, shuffle_S

PARTS = ("outer", "functional", "full")
GRID_SYMMETRY_TOL = 1e-12


def attention_moments(spec: AttentionSpec, seq: Sequence, cache: ForwardCache, head: int = 0,
                      with_z2: bool = True, cap: int | None = None) -> MomentSet:
    """Moments of one head's attention plus ``Z1``/``Z2`` built from the activation derivatives."""
    A = cache.heads[head].A
    X = seq.X
    if spec.activation == "softmax":
        base = _moments(A, X)
        M2, M3 = base.M2, base.M3
    else:
        # identity attention rows are not distributions; only the first moment is meaningful
        M2 = M3 = None
    L, d = X.shape
    if spec.activation == "softmax":
        jet = activation_jet("softmax", A, cap)
        Z1 = z1_direct(X, jet.J, cap)
        Z2 = z2_direct(X, jet.H2, cap) if with_z2 else None
    else:
        Z1 = z1_direct(X, np.eye(L * L), cap)
        Z2 = np.zeros((L * d**3, d * d)) if with_z2 else None
    return MomentSet(M1=A @ X, M2=M2, M3=M3, Z1=Z1, Z2=Z2)


@dataclass(frozen=True)
class HessianBlock:
    row_param: tuple[int, str]
    col_param: tuple[int, str]
    part: str
    M: np.ndarray


@dataclass
class HessianGrid:
    """Blocks for every ordered parameter pair and every part.

    ``blocks[(part, row_key, col_key)]`` holds the dense block; lower blocks
    are stored as transposes of the upper ones.
    """

    params: list[tuple[int, str]]
    sizes: dict[tuple[int, str], int]
    blocks: dict = field(repr=False)
    L: int = 0
    d_v: int = 0
    d_k: int = 0

    def block(self, row, col, part: str = "full") -> HessianBlock:
        r, c = _key(row), _key(col)
        return HessianBlock(r, c, part, self.blocks[(part, r, c)])

    def __getitem__(self, item) -> np.ndarray:
        """``grid["Q", "Q"]`` or ``grid["Q", "K", "outer"]``."""
        part = item[2] if len(item) == 3 else "full"
        return self.block(item[0], item[1], part).M

    def matrix(self, part: str = "full", params=None) -> np.ndarray:
        keys = self.params if params is None else [_key(p) for p in params]
        return np.block([[self.blocks[(part, r, c)] for c in keys] for r in keys])

    def offsets(self) -> dict[tuple[int, str], slice]:
        out, off = {}, 0
        for k in self.params:
            out[k] = slice(off, off + self.sizes[k])
            off += self.sizes[k]
        return out

    @property
    def n_params(self) -> int:
        return sum(self.sizes.values())

    def is_symmetric(self, tol: float = GRID_SYMMETRY_TOL) -> bool:
        H = self.matrix("full")
        return bool(np.max(np.abs(H - H.T)) <= tol * max(1.0, np.max(np.abs(H))))


def _key(k) -> tuple[int, str]:
    return (0, k) if isinstance(k, str) else (int(k[0]), k[1])


class _HeadTerms:
    """Per-head ingredients shared by the block formulas."""

    def __init__(self, spec: AttentionSpec, seq: Sequence, cache: ForwardCache, head: int,
                 mom: MomentSet | None = None, cap: int | None = None):
        self.spec, self.head = spec, head
        h = spec.heads[head]
        self.L, self.d_v = seq.L, seq.d_v
        self.s = 2.0 / (seq.L * seq.d_v)
        self.c = spec.similarity_scale()
        self.W_V = h.W_V
        self.W_Q, self.W_K, self.W_QK = h.W_Q, h.W_K, h.W_QK
        self.d_k = self.W_Q.shape[1] if self.W_Q is not None else self.d_v
        self.delta = cache.delta
        self.cap = cap
        self.mom = mom if mom is not None else attention_moments(spec, seq, cache, head, cap=cap)

    # layout factors -----------------------------------------------------
    def P(self, name: str) -> np.ndarray:
        d_v, d_k = self.d_v, self.d_k
        if name == "Q":
            return np.kron(np.eye(d_v), self.W_K)
        if name == "K":
            return np.kron(self.W_Q, np.eye(d_v)) @ commutation(d_k, d_v)
        if name == "QK":
            return np.eye(d_v * d_v)
        raise KeyError(name)

    def R(self, m: int) -> np.ndarray:
        return kron(self.delta.T, np.eye(m), self.cap)

    # data terms ---------------------------------------------------------
    def G(self) -> np.ndarray:
        """``Z1ᵀ (I_L kron W_V W_Vᵀ) Z1``."""
        Z1 = self.mom.Z1
        return Z1.T @ np.kron(np.eye(self.L), self.W_V @ self.W_V.T) @ Z1

    def Phi(self) -> np.ndarray:
        """``(δᵀ (I_L kron W_Vᵀ) kron I_{d_v^2}) Z2``."""
        u = self.delta.T @ np.kron(np.eye(self.L), self.W_V.T)
        return kron(u, np.eye(self.d_v**2), self.cap) @ self.mom.Z2

    def U(self) -> np.ndarray:
        return self.G() + self.Phi()

    def B(self) -> np.ndarray:
        """``R_{d_v} (I_L kron W_Vᵀ kron I_{d_v}) (Z1 kron I_{d_v}) S``, a ``d_v x d_v`` matrix."""
        d = self.d_v
        left = self.R(d) @ np.kron(np.kron(np.eye(self.L), self.W_V.T), np.eye(d))
        return left @ kron(self.mom.Z1, np.eye(d), self.cap) @ shuffle_S(d)

    # blocks ---------------------------------------------------------------
    def outer(self, a: str, b: str) -> np.ndarray:
        s, c, d_v = self.s, self.c, self.d_v
        M1, Z1 = self.mom.M1, self.mom.Z1
        if a == "V" and b == "V":
            return s * np.kron(M1.T @ M1, np.eye(d_v))
        if a == "V":
            # (M1ᵀ kron W_Vᵀ) Z1 P_b
            return s * c * np.kron(M1.T, self.W_V.T) @ Z1 @ self.P(b)
        if b == "V":
            return self.outer(b, a).T
        if a == "Q" and b == "Q":
            # (I kron W_Kᵀ) Z1ᵀ (I kron W_V W_Vᵀ) Z1 (I kron W_K)
            return s * c * c * np.kron(np.eye(d_v), self.W_K.T) @ self.G() @ np.kron(np.eye(d_v), self.W_K)
        if a == "Q" and b == "K":
            # (I kron W_Kᵀ) Z1ᵀ (I kron W_V W_Vᵀ) Z1 (W_Q kron I) K_{d_k,d_v}
            return s * c * c * np.kron(np.eye(d_v), self.W_K.T) @ self.G() @ self.P("K")
        return s * c * c * self.P(a).T @ self.G() @ self.P(b)

    def functional(self, a: str, b: str) -> np.ndarray:
        s, c, d_v, L = self.s, self.c, self.d_v, self.L
        if a == "V" and b == "V":
            return np.zeros((d_v * d_v, d_v * d_v))
        if a == "V":
            # R_{d_v^2} (I_L kron S) Z1 P_b
            return s * c * self.R(d_v * d_v) @ np.kron(np.eye(L), shuffle_S(d_v)) @ self.mom.Z1 @ self.P(b)
        if b == "V":
            return self.functional(b, a).T
        if a == "Q" and b in ("Q", "K"):
            d_k = self.d_k
            left = self.R(d_v * d_k) @ kron(
                np.kron(np.kron(np.eye(L), self.W_V.T), np.eye(d_v)), self.W_K.T, self.cap
            )
            H = s * c * c * left @ self.mom.Z2 @ self.P(b)
            if b == "K":
                H = H + s * c * np.kron(self.B(), np.eye(d_k))
            return H
        if a == "K" and b == "Q":
            return self.functional("Q", "K").T
        # (K, K) and (QK, QK): only the second-derivative-of-softmax term
        return s * c * c * self.P(a).T @ self.Phi() @ self.P(b)


def _sym(M: np.ndarray) -> np.ndarray:
    # (M + Mᵀ)/2 is exactly symmetric in floating point
    return 0.5 * (M + M.T)


def _check_pair(spec: AttentionSpec, pair) -> tuple[str, str]:
    a, b = pair
    names = spec.heads[0].param_names
    if a not in names or b not in names:
        raise ParameterizationError(
            f"block ({a}, {b}) does not exist for the {spec.parameterization} parameterization"
        )
    return a, b


def outer_block(pair, spec: AttentionSpec, seq: Sequence, cache: ForwardCache | None = None,
                moments: MomentSet | None = None, head: int = 0) -> HessianBlock:
    a, b = _check_pair(spec, pair)
    cache = forward(spec, seq) if cache is None else cache
    t = _HeadTerms(spec, seq, cache, head, moments)
    M = t.outer(a, b)
    return HessianBlock((head, a), (head, b), "outer", _sym(M) if a == b else M)


def functional_block(pair, spec: AttentionSpec, seq: Sequence, cache: ForwardCache | None = None,
                     moments: MomentSet | None = None, head: int = 0) -> HessianBlock:
    a, b = _check_pair(spec, pair)
    cache = forward(spec, seq) if cache is None else cache
    t = _HeadTerms(spec, seq, cache, head, moments)
    M = t.functional(a, b)
    return HessianBlock((head, a), (head, b), "functional", _sym(M) if a == b else M)


def multihead_assemble(spec: AttentionSpec, seq: Sequence, cap: int | None = None) -> HessianGrid:
    """Grid over ``(head, param)`` keys.

    Intra-head blocks use the closed forms; inter-head outer blocks are
    ``s J_aᵀ J_b`` and inter-head functional blocks are exact zeros.
    """
    cache = forward(spec, seq)
    terms = [_HeadTerms(spec, seq, cache, h, cap=cap) for h in range(spec.n_heads)]
    keys = spec.param_keys()
    sizes = {k: spec.get_param(k).size for k in keys}
    s = 2.0 / (seq.L * seq.d_v)
    jac = {}
    if spec.n_heads > 1:
        jac = {k: jacobian(spec, seq, cache, k) for k in keys}
    blocks = {}
    for i, r in enumerate(keys):
        for c in keys[i:]:
            if r[0] == c[0]:
                t = terms[r[0]]
                o, f = t.outer(r[1], c[1]), t.functional(r[1], c[1])
                if r == c:
                    o, f = _sym(o), _sym(f)
            else:
                o = s * jac[r].T @ jac[c]
                f = np.zeros((sizes[r], sizes[c]))
            for part, M in (("outer", o), ("functional", f), ("full", o + f)):
                blocks[(part, r, c)] = M
                blocks[(part, c, r)] = M.T
    return HessianGrid(params=keys, sizes=sizes, blocks=blocks,
                       L=seq.L, d_v=seq.d_v, d_k=spec.d_k)


def assemble(spec: AttentionSpec, seq: Sequence, cap: int | None = None) -> HessianGrid:
    """Outer, functional and full Hessian grid in the canonical ``[Q, K, V]`` ordering."""
    return multihead_assemble(spec, seq, cap)


def batch_mean(grids: list[HessianGrid]) -> HessianGrid:
    """Average per-sequence grids (the Hessian of the mean loss over sequences)."""
    if not grids:
        raise ValueError("need at least one grid")
    ref = grids[0]
    blocks = {k: np.mean([g.blocks[k] for g in grids], axis=0) for k in ref.blocks}
    return HessianGrid(params=list(ref.params), sizes=dict(ref.sizes), blocks=blocks,
                       L=ref.L, d_v=ref.d_v, d_k=ref.d_k)


# -- variants ------------------------------------------------------------------


def _require_activation(spec: AttentionSpec, activation: str) -> None:
    if spec.activation != activation:
        raise ValueError(f"needs {activation} activation, spec uses {spec.activation}")


def linear_blocks(spec: AttentionSpec, seq: Sequence) -> HessianGrid:
    """Identity-activation Hessian written through ``Σ_X = XᵀX / L``.

    Only the off-diagonal functional blocks are non-zero.
    """
    _require_activation(spec, "identity")
    if spec.parameterization != "classical" or spec.n_heads != 1:
        raise ParameterizationError("linear_blocks covers single-head classical attention")
    X, L, d = seq.X, seq.L, seq.d_v
    W_Q, W_K, W_V = spec.W_Q, spec.W_K, spec.W_V
    d_k = W_Q.shape[1]
    c = spec.similarity_scale()
    Sig = X.T @ X / L
    I = np.eye(d)
    Kc = commutation(d_k, d)
    S = shuffle_S(d)
    delta = forward(spec, seq).delta
    so = 2.0 * L * L * c * c / d
    sf = 2.0 * c / d
    VV = Sig @ W_V @ W_V.T @ Sig

    outer = {
        ("V", "V"): so * np.kron(Sig @ W_K @ W_Q.T @ Sig @ W_Q @ W_K.T @ Sig, I),
        ("Q", "Q"): so * np.kron(Sig, W_K.T @ VV @ W_K),
        ("K", "K"): so * np.kron(VV, W_Q.T @ Sig @ W_Q),
        ("V", "Q"): so * np.kron(Sig @ W_K @ W_Q.T @ Sig, W_V.T @ Sig @ W_K),
        ("V", "K"): so * np.kron(Sig @ W_K @ W_Q.T @ Sig @ W_Q, W_V.T @ Sig) @ Kc,
        ("Q", "K"): so * np.kron(Sig @ W_Q, W_K.T @ VV) @ Kc,
    }
    RS = np.kron(delta.T, np.eye(d * d)) @ np.kron(np.eye(L), S)
    functional = {
        ("V", "V"): np.zeros((d * d, d * d)),
        ("Q", "Q"): np.zeros((d * d_k, d * d_k)),
        ("K", "K"): np.zeros((d * d_k, d * d_k)),
        ("V", "Q"): sf * RS @ np.kron(X, Sig @ W_K),
        ("V", "K"): sf * RS @ np.kron(X @ W_Q, Sig) @ Kc,
        ("Q", "K"): sf * np.kron(np.kron(delta.T @ np.kron(X, W_V.T @ Sig), I) @ S, np.eye(d_k)),
    }
    return _grid_from_upper(spec, seq, outer, functional)


def _grid_from_upper(spec, seq, outer, functional) -> HessianGrid:
    keys = spec.param_keys()
    order = [k[1] for k in keys]
    sizes = {k: spec.get_param(k).size for k in keys}
    blocks = {}
    for i, a in enumerate(order):
        for b in order[i:]:
            pair = (a, b) if (a, b) in outer else (b, a)
            o, f = outer[pair], functional[pair]
            if pair != (a, b):
                o, f = o.T, f.T
            if a == b:
                o, f = _sym(o), _sym(f)
            for part, M in (("outer", o), ("functional", f), ("full", o + f)):
                blocks[(part, (0, a), (0, b))] = M
                blocks[(part, (0, b), (0, a))] = M.T
    return HessianGrid(params=keys, sizes=sizes, blocks=blocks, L=seq.L, d_v=seq.d_v, d_k=spec.d_k)


def single_matrix_block(spec: AttentionSpec, seq: Sequence, part: str = "full") -> HessianBlock:
    """``H(W_QK, W_QK) = s (Z1ᵀ (I kron W_V W_Vᵀ) Z1 + (δᵀ (I kron W_Vᵀ) kron I) Z2)``."""
    if spec.parameterization != "single":
        raise ParameterizationError("single_matrix_block needs the single-matrix parameterization")
    _require_activation(spec, "softmax")
    cache = forward(spec, seq)
    t = _HeadTerms(spec, seq, cache, 0)
    M = {"outer": _sym(t.outer("QK", "QK")), "functional": _sym(t.functional("QK", "QK"))}
    M["full"] = M["outer"] + M["functional"]
    return HessianBlock((0, "QK"), (0, "QK"), part, M[part])


# -- T-level decomposition -----------------------------------------------------


@dataclass(frozen=True)
class TDecomposition:
    """Query-key Hessian split at the similarity map ``T``.

    Rows/columns are ordered ``[vecr W_Q, vecr W_K]``. With
    ``V = [I kron W_K, (W_Q kron I) K_{d_k,d_v}]``::

        T_outer      = s c^2 Vᵀ U V
        T_functional = s c [[0, B], [Bᵀ, 0]] kron I_{d_k}

    where ``s = 2/(L d_v)`` and ``c = 1/(t sqrt(d_k))``.
    """

    T_outer: np.ndarray
    T_functional: np.ndarray
    V_factor: np.ndarray
    U_core: np.ndarray
    B_offdiag: np.ndarray
    loss_scale: float
    similarity_scale: float
    d_k: int
    assembly_residual: float = float("nan")

    @property
    def total(self) -> np.ndarray:
        return self.T_outer + self.T_functional


def _t_parts(V, U, B, s, c, d_k):
    T_outer = (s * c * c) * (V.T @ U @ V)
    Z = np.zeros_like(B)
    T_functional = (s * c) * np.kron(np.block([[Z, B], [B.T, Z]]), np.eye(d_k))
    return T_outer, T_functional


def t_decompose(spec: AttentionSpec, seq: Sequence, check_tol: float | None = 1e-10) -> TDecomposition:
    """Split the ``[Q, K] x [Q, K]`` Hessian into T-outer and T-functional parts.

    The sum is compared against :func:`assemble`; a relative mismatch above
    ``check_tol`` raises ``ArithmeticError``.
    """
    if spec.parameterization != "classical" or spec.n_heads != 1:
        raise ParameterizationError("t_decompose needs single-head classical attention")
    _require_activation(spec, "softmax")
    cache = forward(spec, seq)
    t = _HeadTerms(spec, seq, cache, 0)
    V = np.hstack([t.P("Q"), t.P("K")])
    U, B = t.U(), t.B()
    T_outer, T_functional = _t_parts(V, U, B, t.s, t.c, t.d_k)
    qk = assemble(spec, seq).matrix("full", ["Q", "K"])
    resid = float(np.max(np.abs(T_outer + T_functional - qk)) / max(1.0, np.max(np.abs(qk))))
    if check_tol is not None and resid > check_tol:
        raise ArithmeticError(f"T-decomposition does not reproduce the query-key Hessian (residual {resid:.3e})")
    return TDecomposition(T_outer, T_functional, V, U, B, t.s, t.c, t.d_k, resid)


@dataclass(frozen=True)
class FrozenTerms:
    """Softmax-derived quantities held fixed while the temperature prefactor varies."""

    V_factor: np.ndarray
    U_core: np.ndarray
    B_offdiag: np.ndarray
    loss_scale: float
    d_k: int

    @classmethod
    def from_decomposition(cls, dec: TDecomposition) -> FrozenTerms:
        return cls(dec.V_factor, dec.U_core, dec.B_offdiag, dec.loss_scale, dec.d_k)


def temperature_prefactors(frozen: FrozenTerms | TDecomposition, t: float):
    """``(T_outer, T_functional)`` with prefactors ``1/(t^2 d_k)`` and ``1/(t sqrt(d_k))``.

    Inputs are frozen, so ``T_outer(t) = T_outer(1) / t^2`` and
    ``T_functional(t) = T_functional(1) / t``.
    """
    if not t > 0:
        raise ValueError("temperature must be > 0")
    if isinstance(frozen, TDecomposition):
        frozen = FrozenTerms.from_decomposition(frozen)
    base_o, base_f = _t_parts(frozen.V_factor, frozen.U_core, frozen.B_offdiag,
                              frozen.loss_scale, 1.0 / np.sqrt(frozen.d_k), frozen.d_k)
    return base_o * (1.0 / (t * t)), base_f * (1.0 / t)
