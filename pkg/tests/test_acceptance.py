"""Acceptance criteria; each test prints one PASS/FAIL line (also collected in the terminal summary)."""

import time

import numpy as np

from attnhess.derivatives import softmax_jacobian, softmax_second
from attnhess.experiments import ExperimentConfig, cmd_histogram, run_depth, run_scaling
from attnhess.hessian import (
    FrozenTerms,
    assemble,
    linear_blocks,
    multihead_assemble,
    single_matrix_block,
    t_decompose,
    temperature_prefactors,
)
from attnhess.model import attend
from attnhess.moments import moments, z1_direct, z1_via_moments, z2_direct, z2_via_moments
from attnhess.oracle import compare, fd_hessian, fd_jacobian

from conftest import ACCEPTANCE_LINES, make_instance

SEEDS = range(10)


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _fro_rel(a, b):
    return np.linalg.norm(a - b) / max(1.0, np.linalg.norm(a))


def test_01_oracle_equivalence():
    t0 = time.perf_counter()
    worst_abs = worst_rel = 0.0
    for seed in SEEDS:
        spec, seq = make_instance(seed, L=3, d_v=4, d_k=2)
        rep = compare(assemble(spec, seq).matrix(), fd_hessian(spec, seq))
        worst_abs = max(worst_abs, rep.max_abs_error)
        worst_rel = max(worst_rel, rep.rel_frobenius_error)
    dt = time.perf_counter() - t0
    ok = worst_abs <= 1e-5 and worst_rel <= 1e-7 and dt <= 60
    record(1, "full Hessian vs finite differences", ok,
           f"max-abs {worst_abs:.2e}, rel-Frobenius {worst_rel:.2e}, {dt:.1f}s")


def test_02_value_functional_zero():
    exact_zero, worst = True, 0.0
    for seed in SEEDS:
        spec, seq = make_instance(seed, L=3, d_v=4, d_k=2)
        grid = assemble(spec, seq)
        exact_zero &= not np.any(grid["V", "V", "functional"])
        sl = grid.offsets()[(0, "V")]
        worst = max(worst, float(np.max(np.abs(fd_hessian(spec, seq)[sl, sl] - grid["V", "V", "outer"]))))
    record(2, "value-value functional block is zero", exact_zero and worst <= 1e-5,
           f"analytic exactly zero: {exact_zero}, oracle residual {worst:.2e}")


def test_03_moment_identities():
    worst = 0.0
    for seed in SEEDS:
        r = np.random.default_rng(1000 + seed)
        L, d = int(r.integers(2, 5)), int(r.integers(1, 4))
        X = r.normal(size=(L, d))
        A = attend("softmax", r.normal(size=(L, L)))
        m = moments(A, X)
        worst = max(worst,
                    _fro_rel(z1_direct(X, softmax_jacobian(A)), z1_via_moments(X, m.M2)),
                    _fro_rel(z2_direct(X, softmax_second(A)), z2_via_moments(X, m.M3)))
    record(3, "Z1/Z2 direct vs moment constructions", worst <= 1e-10, f"rel-Frobenius {worst:.2e}")


def test_04_linear_attention():
    diag_exact, diag_fd, outer_fd = True, 0.0, 0.0
    for seed in SEEDS:
        spec, seq = make_instance(seed, L=3, d_v=4, d_k=2, activation="identity")
        lin = linear_blocks(spec, seq)
        H = fd_hessian(spec, seq)
        off = lin.offsets()
        s = 2.0 / seq.X.size
        J = {k: fd_jacobian(spec, seq, k) for k in "QKV"}
        for a in "QKV":
            diag_exact &= not np.any(lin[a, a, "functional"])
            sl = off[(0, a)]
            diag_fd = max(diag_fd, float(np.max(np.abs(H[sl, sl] - lin[a, a, "outer"]))))
            for b in "QKV":
                outer_fd = max(outer_fd, float(np.max(np.abs(lin[a, b, "outer"] - s * J[a].T @ J[b]))))
    ok = diag_exact and diag_fd <= 1e-5 and outer_fd <= 1e-6
    record(4, "identity-activation closed forms", ok,
           f"functional diagonals exactly zero: {diag_exact}, oracle {diag_fd:.2e}; outer blocks {outer_fd:.2e}")


def test_05_single_matrix():
    worst = 0.0
    for seed in SEEDS:
        spec, seq = make_instance(seed, L=3, d_v=3, d_k=3, parameterization="single")
        worst = max(worst, compare(single_matrix_block(spec, seq).M,
                                   fd_hessian(spec, seq, params=["QK"])).max_abs_error)
    record(5, "single-matrix query-key block vs finite differences", worst <= 1e-5, f"max-abs {worst:.2e}")


def test_06_t_decomposition_spectrum():
    pair_res = mult_res = 0.0
    max_rank, bound = 0, 2 * 2 * 4 - 2 * 2
    for seed in SEEDS:
        spec, seq = make_instance(seed, L=3, d_v=4, d_k=2)
        dec = t_decompose(spec, seq)
        ev = np.sort(np.linalg.eigvalsh(dec.T_functional))
        pair_res = max(pair_res, float(np.max(np.abs(ev + ev[::-1]))))
        mult_res = max(mult_res, float(np.max(np.ptp(ev.reshape(-1, 2), axis=1))))
        sv = np.linalg.svd(dec.T_outer, compute_uv=False)
        max_rank = max(max_rank, int(np.sum(sv > 1e-8 * sv[0])))
    ok = pair_res <= 1e-8 and mult_res <= 1e-8 and max_rank <= bound
    record(6, "T-functional pairs and T-outer rank", ok,
           f"pairing {pair_res:.1e}, multiplicity {mult_res:.1e}, rank {max_rank} <= {bound}")


def test_07_scaling_slopes():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(L=4, d_v=6, d_k=3, seeds=list(range(20)))
    res = run_scaling(cfg, threads=1)
    dt = time.perf_counter() - t0
    vv, qq, qqf = res.slope("V/V", "outer"), res.slope("Q/Q", "outer"), res.slope("Q/Q", "functional")
    ok = abs(vv - 2) <= 0.5 and abs(qq - 6) <= 0.5 and abs(qqf - 5) <= 0.5 and dt <= 600
    record(7, "data-scaling slopes", ok,
           f"outer V/V {vv:.3f}, outer Q/Q {qq:.3f}, functional Q/Q {qqf:.3f}, {dt:.1f}s")


def test_08_heterogeneity_medians(tmp_path):
    summary = cmd_histogram(ExperimentConfig(L=4, d_v=6, d_k=3, seeds=list(range(5)), histogram_sigma=0.3),
                            tmp_path)
    sm, idn = summary["variants"]["softmax"], summary["variants"]["identity"]
    q_s, v_s = sm["Q/Q"]["median_abs_nonzero"], sm["V/V"]["median_abs_nonzero"]
    q_i, v_i = idn["Q/Q"]["median_abs_nonzero"], idn["V/V"]["median_abs_nonzero"]
    ratio = max(q_i, v_i) / min(q_i, v_i)
    ok = q_s < v_s and ratio <= 10
    record(8, "entry-magnitude heterogeneity", ok,
           f"softmax medians Q {q_s:.2e} < V {v_s:.2e}; identity ratio {ratio:.2f}")


def test_09_multihead():
    exact, worst = True, 0.0
    for seed in range(3):
        spec, seq = make_instance(seed, L=3, d_v=4, d_k=2, heads=2)
        grid = multihead_assemble(spec, seq)
        H = fd_hessian(spec, seq)
        off = grid.offsets()
        for r in grid.params:
            for c in grid.params:
                if r[0] != c[0]:
                    exact &= not np.any(grid[r, c, "functional"])
                    worst = max(worst, float(np.max(np.abs(grid[r, c] - H[off[r], off[c]]))))
    record(9, "inter-head blocks", exact and worst <= 1e-5,
           f"functional exactly zero: {exact}, full vs oracle {worst:.2e}")


def test_10_depth_growth():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(L=3, d_v=4, d_k=2, seeds=[0, 1, 2], depths=[1, 2, 3])
    res = run_depth(cfg)
    dt = time.perf_counter() - t0
    a1, a2 = res.slope("attention/D1", "value"), res.slope("attention/D2", "value")
    mlp = [res.slope(f"mlp/D{d}", "value") for d in cfg.depths]
    ok = abs(a1 - 6) <= 0.5 and abs(a2 - 18) <= 1.5 and all(abs(m - 2) <= 0.3 for m in mlp) and dt <= 900
    record(10, "depth growth of the value block", ok,
           f"attention D1 {a1:.3f}, D2 {a2:.3f}; chain {', '.join(f'{m:.3f}' for m in mlp)}; {dt:.1f}s")


def test_11_temperature_prefactors():
    worst = 0.0
    for seed in range(3):
        spec, seq = make_instance(seed, L=3, d_v=4, d_k=2)
        frozen = FrozenTerms.from_decomposition(t_decompose(spec, seq))
        o1, f1 = temperature_prefactors(frozen, 1.0)
        for t in (1.0, 2.0, 10.0):
            o, f = temperature_prefactors(frozen, t)
            mo, mf = o1 != 0, f1 != 0
            worst = max(worst,
                        float(np.max(np.abs(o[mo] / o1[mo] - 1 / t**2))),
                        float(np.max(np.abs(f[mf] / f1[mf] - 1 / t))))
    record(11, "temperature prefactors 1/t^2 and 1/t", worst <= 1e-12, f"max ratio error {worst:.1e}")
