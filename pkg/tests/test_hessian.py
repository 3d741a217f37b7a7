import numpy as np
import pytest

from attnhess.hessian import (
    FrozenTerms,
    assemble,
    functional_block,
    linear_blocks,
    multihead_assemble,
    outer_block,
    single_matrix_block,
    t_decompose,
    temperature_prefactors,
)
from attnhess.model import AttentionSpec, Head, ParameterizationError, Sequence, forward, init_spec
from attnhess.oracle import compare, fd_hessian, fd_jacobian

from conftest import make_instance

CLASSICAL_PAIRS = [(a, b) for a in "QKV" for b in "QKV"]


def gauss_newton_oracle(spec, seq, a, b):
    s = 2.0 / seq.X.size
    return s * fd_jacobian(spec, seq, a).T @ fd_jacobian(spec, seq, b)


@pytest.mark.parametrize("activation", ["softmax", "identity"])
def test_outer_blocks_match_gauss_newton(activation):
    spec, seq = make_instance(11, activation=activation)
    for a, b in CLASSICAL_PAIRS:
        blk = outer_block((a, b), spec, seq)
        assert blk.part == "outer" and blk.M.shape == (spec.get_param(a).size, spec.get_param(b).size)
        assert compare(blk.M, gauss_newton_oracle(spec, seq, a, b)).max_abs_error <= 1e-6


def test_functional_blocks_by_subtraction():
    spec, seq = make_instance(12)
    H = fd_hessian(spec, seq)
    off = assemble(spec, seq).offsets()
    for a, b in CLASSICAL_PAIRS:
        fd = H[off[(0, a)], off[(0, b)]] - outer_block((a, b), spec, seq).M
        assert compare(functional_block((a, b), spec, seq).M, fd).max_abs_error <= 1e-5


def test_value_block_examples(rng):
    # one-hot attention (A = I): outer (V,V) = s XᵀX kron I
    X = np.eye(3)
    spec = AttentionSpec.classical(1e3 * np.eye(3), 1e3 * np.eye(3), rng.normal(size=(3, 3)))
    seq = Sequence(X, rng.normal(size=(3, 3)))
    assert np.array_equal(forward(spec, seq).A, np.eye(3))
    want = (2.0 / 9) * np.kron(X.T @ X, np.eye(3))
    assert np.allclose(outer_block(("V", "V"), spec, seq).M, want, atol=1e-15)
    fb = functional_block(("V", "V"), spec, seq).M
    assert fb.shape == (9, 9) and not np.any(fb)


def test_zero_value_weight_kills_query_outer():
    spec, seq = make_instance(13)
    spec = spec.with_param("V", np.zeros((4, 4)))
    assert not np.any(outer_block(("Q", "Q"), spec, seq).M)


def test_zero_residual_kills_functional():
    spec, seq = make_instance(14)
    seq = Sequence(seq.X, forward(spec, seq).F)
    grid = assemble(spec, seq)
    for a, b in CLASSICAL_PAIRS:
        assert not np.any(grid[a, b, "functional"])


def test_zero_value_and_labels_leave_only_value_outer():
    spec, seq = make_instance(15)
    spec = spec.with_param("V", np.zeros((4, 4)))
    seq = Sequence(seq.X, np.zeros_like(seq.X))
    grid = assemble(spec, seq)
    for a, b in CLASSICAL_PAIRS:
        for part in ("outer", "functional", "full"):
            M = grid[a, b, part]
            if (a, b) == ("V", "V") and part != "functional":
                assert np.any(M)
            else:
                assert not np.any(M)


def test_grid_symmetry_and_parts():
    spec, seq = make_instance(16)
    grid = assemble(spec, seq)
    assert [k[1] for k in grid.params] == ["Q", "K", "V"]
    for a, b in CLASSICAL_PAIRS:
        assert np.array_equal(grid[a, b], grid[b, a].T)
        assert np.array_equal(grid[a, b, "full"], grid[a, b, "outer"] + grid[a, b, "functional"])
    for a in "QKV":
        D = grid[a, a]
        assert np.max(np.abs(D - D.T)) <= 1e-12
    H = grid.matrix()
    assert np.array_equal(H, H.T)
    assert grid.is_symmetric()


def test_small_instance_oracle():
    spec, seq = make_instance(0, L=2, d_v=2, d_k=1)
    rep = compare(assemble(spec, seq).matrix(), fd_hessian(spec, seq))
    assert rep.max_abs_error <= 1e-5


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("temperature", [1.0, 0.6])
def test_full_hessian_oracle(seed, temperature):
    spec, seq = make_instance(20 + seed, temperature=temperature)
    rep = compare(assemble(spec, seq).matrix(), fd_hessian(spec, seq))
    assert rep.max_abs_error <= 1e-5


def test_degenerate_key_dims():
    for d_k in (4, 5):
        spec, seq = make_instance(30 + d_k, L=3, d_v=4, d_k=d_k)
        assert compare(assemble(spec, seq).matrix(), fd_hessian(spec, seq)).max_abs_error <= 1e-5


def test_outer_grid_is_psd():
    spec, seq = make_instance(17)
    ev = np.linalg.eigvalsh(assemble(spec, seq).matrix("outer"))
    assert ev[0] >= -1e-8 * ev[-1]


def test_value_scaling_of_query_outer():
    spec, seq = make_instance(18)
    base = outer_block(("Q", "Q"), spec, seq).M
    scaled = outer_block(("Q", "Q"), spec.with_param("V", 2.0 * spec.W_V), seq).M
    assert np.array_equal(scaled, 4.0 * base)


def test_block_parameterization_errors():
    single, seq = make_instance(0, d_k=4, parameterization="single")
    with pytest.raises(ParameterizationError):
        outer_block(("Q", "Q"), single, seq)
    spec, seq = make_instance(0)
    with pytest.raises(ParameterizationError):
        functional_block(("QK", "V"), spec, seq)
    with pytest.raises(ParameterizationError):
        single_matrix_block(spec, seq)
    with pytest.raises(ParameterizationError):
        t_decompose(single, seq)


# -- linear attention ------------------------------------------------------------


def test_linear_blocks_structure_and_oracle():
    spec, seq = make_instance(40, activation="identity")
    lin = linear_blocks(spec, seq)
    gen = assemble(spec, seq)
    H = fd_hessian(spec, seq)
    off = lin.offsets()
    for a in "QKV":
        assert not np.any(lin[a, a, "functional"])
    for a, b in CLASSICAL_PAIRS:
        assert np.max(np.abs(lin[a, b, "outer"] - gen[a, b, "outer"])) <= 1e-12
        assert np.max(np.abs(lin[a, b, "functional"] - gen[a, b, "functional"])) <= 1e-12
        assert np.max(np.abs(lin[a, b] - H[off[(0, a)], off[(0, b)]])) <= 1e-6


def test_linear_value_block_unit_covariance():
    L = d = 3
    X = np.sqrt(L) * np.eye(3)
    I = np.eye(3)
    spec = AttentionSpec.classical(I, I, I, activation="identity")
    lin = linear_blocks(spec, Sequence(X, np.zeros((3, 3))))
    assert np.allclose(lin["V", "V", "outer"], 2 * L * L / (d * d) * np.eye(9), atol=1e-14)


def test_linear_blocks_needs_identity():
    spec, seq = make_instance(0)
    with pytest.raises(ValueError):
        linear_blocks(spec, seq)


# -- single matrix ---------------------------------------------------------------


def test_single_matrix_oracle():
    spec, seq = make_instance(41, L=3, d_v=3, d_k=3, parameterization="single")
    blk = single_matrix_block(spec, seq)
    H = fd_hessian(spec, seq, params=["QK"])
    assert compare(blk.M, H).max_abs_error <= 1e-5
    assert np.array_equal(blk.M, assemble(spec, seq)["QK", "QK"])


def test_single_matrix_zero_cases(rng):
    spec, seq = make_instance(42, L=3, d_v=3, d_k=3, parameterization="single")
    spec0 = spec.with_param("V", np.zeros((3, 3)))
    seq0 = Sequence(seq.X, np.zeros((3, 3)))
    assert not np.any(single_matrix_block(spec0, seq0).M)
    sat = AttentionSpec.single(1e4 * np.eye(3), rng.normal(size=(3, 3)))
    s3 = Sequence(np.eye(3), rng.normal(size=(3, 3)))
    assert not np.any(single_matrix_block(sat, s3).M)


# -- T-level decomposition -------------------------------------------------------


def test_t_decomposition_matches_grid_and_spectrum():
    spec, seq = make_instance(43)
    dec = t_decompose(spec, seq)
    qk = assemble(spec, seq).matrix("full", ["Q", "K"])
    assert np.max(np.abs(dec.total - qk)) <= 1e-10
    ev = np.sort(np.linalg.eigvalsh(dec.T_functional))
    assert np.max(np.abs(ev + ev[::-1])) <= 1e-8
    d_k = spec.d_k
    assert np.max(np.ptp(ev.reshape(-1, d_k), axis=1)) <= 1e-8
    n = dec.T_functional.shape[0] // 2
    assert not np.any(dec.T_functional[:n, :n]) and not np.any(dec.T_functional[n:, n:])


def test_t_decomposition_zero_residual():
    spec, seq = make_instance(44)
    seq = Sequence(seq.X, forward(spec, seq).F)
    dec = t_decompose(spec, seq)
    assert not np.any(dec.B_offdiag) and not np.any(dec.T_functional)


def test_t_outer_rank_bound():
    spec, seq = make_instance(45, L=6, d_v=4, d_k=2)
    sv = np.linalg.svd(t_decompose(spec, seq).T_outer, compute_uv=False)
    assert np.sum(sv > 1e-8 * sv[0]) <= 2 * 2 * 4 - 4


def test_temperature_prefactors():
    spec, seq = make_instance(46)
    dec = t_decompose(spec, seq)
    frozen = FrozenTerms.from_decomposition(dec)
    o1, f1 = temperature_prefactors(frozen, 1.0)
    assert np.allclose(o1, dec.T_outer, rtol=1e-14, atol=0)
    assert np.allclose(f1, dec.T_functional, rtol=1e-14, atol=0)
    o2, f2 = temperature_prefactors(frozen, 2.0)
    nz = o1 != 0
    assert np.max(np.abs(o2[nz] / o1[nz] - 0.25)) <= 1e-12
    nz = f1 != 0
    assert np.max(np.abs(f2[nz] / f1[nz] - 0.5)) <= 1e-12
    o10, f10 = temperature_prefactors(frozen, 10.0)
    r1 = np.linalg.norm(o1) / np.linalg.norm(f1)
    r10 = np.linalg.norm(o10) / np.linalg.norm(f10)
    assert np.isclose(r1 / r10, 10.0, rtol=1e-12)
    with pytest.raises(ValueError):
        temperature_prefactors(frozen, 0.0)


# -- multi-head ------------------------------------------------------------------


def test_single_head_multihead_identical():
    spec, seq = make_instance(47)
    a, b = assemble(spec, seq), multihead_assemble(spec, seq)
    assert np.array_equal(a.matrix(), b.matrix())


def test_two_heads_against_oracle():
    spec, seq = make_instance(48, L=3, d_v=3, d_k=2, heads=2)
    grid = multihead_assemble(spec, seq)
    H = fd_hessian(spec, seq)
    off = grid.offsets()
    s = 2.0 / seq.X.size
    for r in grid.params:
        for c in grid.params:
            if r[0] != c[0]:
                assert not np.any(grid[r, c, "functional"])
                gn = s * fd_jacobian(spec, seq, r).T @ fd_jacobian(spec, seq, c)
                assert np.max(np.abs(grid[r, c] - gn)) <= 1e-6
            assert np.max(np.abs(grid[r, c] - H[off[r], off[c]])) <= 1e-5


def test_zeroed_second_head(rng):
    spec, seq = make_instance(49, L=3, d_v=3, d_k=2)
    zero = Head(W_V=np.zeros((3, 3)), W_Q=np.zeros((3, 2)), W_K=np.zeros((3, 2)))
    both = AttentionSpec((spec.heads[0], zero), spec.activation)
    grid = multihead_assemble(both, seq)
    U = np.full((3, 3), 1 / 3)
    M1 = U @ seq.X
    want = (2.0 / 9) * np.kron(M1.T @ M1, np.eye(3))
    assert np.allclose(grid[(1, "V"), (1, "V"), "outer"], want, atol=1e-15)
    H = fd_hessian(both, seq)
    off = grid.offsets()
    for r in grid.params:
        assert np.max(np.abs(grid[r, (1, "V")] - H[off[r], off[(1, "V")]])) <= 1e-5
