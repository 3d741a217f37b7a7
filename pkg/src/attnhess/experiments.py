"""Desk-scale experiments: oracle verification, data-scaling slopes, spectra, entry histograms, depth growth.

Every command writes CSV rows (per point) and a JSON summary into an
output directory. Randomness flows from ``numpy.random.default_rng([seed, tag])``
so reruns are bit-identical.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import svg
from .hessian import assemble, linear_blocks, single_matrix_block, t_decompose
from .model import AttentionSpec, Sequence, forward, init_spec
from .oracle import DEFAULT_PARAM_CAP, OracleError, compare, fd_hessian, fd_hessian_fn, fd_jacobian
from .tensor_kit import DEFAULT_ELEMENT_CAP

VERIFY_TOL = 1e-5
RANK_RTOL = 1e-8
HIST_BINS = 64
_TAGS = {"verify": 0, "scaling": 1, "spectrum": 2, "histogram": 3, "depth": 4}


class ConfigError(ValueError):
    pass


def default_sigma_grid() -> list[float]:
    return [float(s) for s in np.geomspace(0.05, 0.5, 12)]


@dataclass
class ExperimentConfig:
    """Settings shared by all commands.

    ``weight_init_std`` of ``None`` means ``sqrt(0.64 / d_v)``.
    ``probe_sigma`` is the input scale for verify/spectrum,
    ``histogram_sigma`` the one for histogram.
    """

    L: int = 3
    d_v: int = 4
    d_k: int = 2
    heads: int = 1
    activation: str = "softmax"
    parameterization: str = "classical"
    temperature: float = 1.0
    sigma_grid: list = field(default_factory=default_sigma_grid)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    weight_init_std: float | None = None
    output_path: str = "results"
    element_cap: int = DEFAULT_ELEMENT_CAP
    probe_sigma: float = 1.0
    histogram_sigma: float = 0.3
    depths: list = field(default_factory=lambda: [1, 2])
    max_resamples: int = 20
    saturation_threshold: float = 0.9

    def __post_init__(self):
        for name in ("L", "d_v", "d_k", "heads"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if self.activation not in ("softmax", "identity"):
            raise ConfigError(f"activation must be softmax or identity, got {self.activation!r}")
        if self.parameterization not in ("classical", "single"):
            raise ConfigError(f"parameterization must be classical or single, got {self.parameterization!r}")
        if self.parameterization == "single" and self.d_k != self.d_v:
            raise ConfigError("single-matrix parameterization needs d_k == d_v")
        for name in ("temperature", "probe_sigma", "histogram_sigma", "saturation_threshold"):
            if not _positive(getattr(self, name)):
                raise ConfigError(f"{name} must be > 0")
        if self.weight_init_std is not None and not _positive(self.weight_init_std):
            raise ConfigError("weight_init_std must be > 0 or null")
        if not self.sigma_grid or not all(_positive(s) for s in self.sigma_grid):
            raise ConfigError("sigma_grid must be a nonempty list of positive numbers")
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of non-negative integers")
        if not self.depths or not all(isinstance(d, int) and d >= 1 for d in self.depths):
            raise ConfigError("depths must be a nonempty list of integers >= 1")
        if not isinstance(self.element_cap, int) or self.element_cap < 1:
            raise ConfigError("element_cap must be a positive integer")
        if not isinstance(self.max_resamples, int) or self.max_resamples < 0:
            raise ConfigError("max_resamples must be a non-negative integer")
        self.sigma_grid = [float(s) for s in self.sigma_grid]
        self.seeds = list(self.seeds)
        self.depths = list(self.depths)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> ExperimentConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @property
    def weight_std(self) -> float:
        return math.sqrt(0.64 / self.d_v) if self.weight_init_std is None else self.weight_init_std

    def shifted(self, offset: int) -> ExperimentConfig:
        d = asdict(self)
        d["seeds"] = [s + offset for s in self.seeds]
        return ExperimentConfig(**d)


def _positive(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) and v > 0


# -- io --------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _json_safe(o):
    if isinstance(o, dict):
        return {k: _json_safe(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_safe(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else None
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _pmap(fn, items, threads: int):
    items = list(items)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- instances ---------------------------------------------------------------------


def draw_instance(cfg: ExperimentConfig, seed: int, command: str, activation: str | None = None):
    """Weights, a unit-scale token matrix ``Z`` and labels ``Y`` for one seed."""
    rng = np.random.default_rng([seed, _TAGS[command]])
    spec = init_spec(cfg.d_v, cfg.d_k, rng, std=cfg.weight_std, heads=cfg.heads,
                     activation=activation or cfg.activation,
                     parameterization=cfg.parameterization, temperature=cfg.temperature)
    Z = rng.normal(size=(cfg.L, cfg.d_v))
    Y = rng.normal(size=(cfg.L, cfg.d_v))
    return spec, Z, Y, rng


def key_label(k, heads: int) -> str:
    return k[1] if heads == 1 else f"{k[0]}:{k[1]}"


def block_label(r, c, heads: int) -> str:
    return f"{key_label(r, heads)}/{key_label(c, heads)}"


def upper_pairs(params):
    return [(r, c) for i, r in enumerate(params) for c in params[i:]]


def fit_slope(sigmas, values) -> tuple[float, float]:
    """Least-squares slope of ``log value`` vs ``log sigma``; NaN if any value is non-positive."""
    x, y = np.asarray(sigmas, float), np.asarray(values, float)
    if len(x) < 2 or np.any(~np.isfinite(y)) or np.any(y <= 0):
        return float("nan"), float("nan")
    r = stats.linregress(np.log(x), np.log(y))
    return float(r.slope), float(r.stderr)


def _mean_sem(vals):
    v = np.asarray(vals, float)
    sem = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.mean(v)), sem


# -- verify ------------------------------------------------------------------------


@dataclass
class CheckRecord:
    check: str
    seed: int
    row: str
    col: str
    part: str
    max_abs_error: float
    rel_frobenius_error: float
    passed: bool


def _record(check, seed, row, col, part, analytic, oracle, tol=VERIFY_TOL) -> CheckRecord:
    rep = compare(analytic, oracle)
    return CheckRecord(check, seed, row, col, part, rep.max_abs_error, rep.rel_frobenius_error,
                       rep.passed(tol))


def _exact_zero(check, seed, row, col, M) -> CheckRecord:
    m = float(np.max(np.abs(M))) if M.size else 0.0
    return CheckRecord(check, seed, row, col, "functional", m, m, m == 0.0)


def verify_instance(cfg: ExperimentConfig, seed: int) -> list[CheckRecord]:
    spec, Z, Y, _ = draw_instance(cfg, seed, "verify")
    seq = Sequence(cfg.probe_sigma * Z, Y)
    n = sum(spec.get_param(k).size for k in spec.param_keys())
    if n > DEFAULT_PARAM_CAP:
        raise OracleError(f"{n} parameters exceed the oracle cap of {DEFAULT_PARAM_CAP}; reduce d_v, d_k or heads")
    grid = assemble(spec, seq, cap=cfg.element_cap)
    H_fd = fd_hessian(spec, seq)
    J = {k: fd_jacobian(spec, seq, k) for k in grid.params}
    s = 2.0 / (seq.L * seq.d_v)
    off = grid.offsets()
    recs = []
    for r, c in upper_pairs(grid.params):
        lab_r, lab_c = key_label(r, cfg.heads), key_label(c, cfg.heads)
        fd_full = H_fd[off[r], off[c]]
        fd_outer = s * J[r].T @ J[c]
        recs.append(_record("full", seed, lab_r, lab_c, "full", grid[r, c, "full"], fd_full))
        recs.append(_record("gauss_newton", seed, lab_r, lab_c, "outer", grid[r, c, "outer"], fd_outer))
        recs.append(_record("subtraction", seed, lab_r, lab_c, "functional",
                            grid[r, c, "functional"], fd_full - grid[r, c, "outer"]))
        if r[1] == "V" and c[1] == "V" and r[0] == c[0]:
            recs.append(_exact_zero("value_functional_zero", seed, lab_r, lab_c, grid[r, c, "functional"]))
        if r[0] != c[0]:
            recs.append(_exact_zero("interhead_functional_zero", seed, lab_r, lab_c, grid[r, c, "functional"]))
    if cfg.activation == "identity" and cfg.parameterization == "classical" and cfg.heads == 1:
        lin = linear_blocks(spec, seq)
        for r, c in upper_pairs(lin.params):
            lab_r, lab_c = r[1], c[1]
            if r == c:
                recs.append(_exact_zero("linear_functional_diag_zero", seed, lab_r, lab_c, lin[r, c, "functional"]))
                recs.append(_record("linear_functional_diag_oracle", seed, lab_r, lab_c, "functional",
                                    np.zeros_like(lin[r, c, "outer"]), H_fd[off[r], off[c]] - lin[r, c, "outer"]))
            recs.append(_record("linear_outer_closed_form", seed, lab_r, lab_c, "outer",
                                lin[r, c, "outer"], s * J[r].T @ J[c], tol=1e-6))
            recs.append(_record("linear_full_closed_form", seed, lab_r, lab_c, "full",
                                lin[r, c, "full"], H_fd[off[r], off[c]]))
    if cfg.parameterization == "single" and cfg.activation == "softmax" and cfg.heads == 1:
        blk = single_matrix_block(spec, seq)
        k = (0, "QK")
        recs.append(_record("single_matrix", seed, "QK", "QK", "full", blk.M, H_fd[off[k], off[k]]))
    return recs


def cmd_verify(cfg: ExperimentConfig, out: Path, threads: int = 1, make_svg: bool = False) -> bool:
    out.mkdir(parents=True, exist_ok=True)
    recs = [r for batch in _pmap(lambda s: verify_instance(cfg, s), cfg.seeds, threads) for r in batch]
    names = [f.name for f in fields(CheckRecord)]
    write_csv(out / "verify.csv", names, [[getattr(r, n) for n in names] for r in recs])
    failed = [r for r in recs if not r.passed]
    write_json(out / "verify.json", {
        "command": "verify",
        "config": asdict(cfg),
        "tolerance": VERIFY_TOL,
        "n_checks": len(recs),
        "n_failed": len(failed),
        "passed": not failed,
        "worst_max_abs_error": max(r.max_abs_error for r in recs),
        "failures": [asdict(r) for r in failed],
    })
    return not failed


# -- scaling -----------------------------------------------------------------------


@dataclass
class ScalingResult:
    """Per (block, part): one ``(sigma, mean_norm, sem)`` record per sigma and a fitted slope."""

    records: list = field(default_factory=list)  # (block, part, sigma, mean_norm, sem, n_flagged)
    slopes: dict = field(default_factory=dict)   # (block, part) -> (slope, stderr)

    def series(self, block: str, part: str):
        rows = [r for r in self.records if r[0] == block and r[1] == part]
        return [r[2] for r in rows], [r[3] for r in rows]

    def slope(self, block: str, part: str) -> float:
        return self.slopes[(block, part)][0]

    def summary_rows(self):
        return [{"block": b, "part": p, "slope": s, "slope_stderr": e}
                for (b, p), (s, e) in self.slopes.items()]


def _max_attention(spec: AttentionSpec, seq: Sequence) -> float:
    return max(float(np.max(h.A)) for h in forward(spec, seq).heads)


def _scaling_seed(cfg: ExperimentConfig, seed: int):
    spec, Z, Y, rng = draw_instance(cfg, seed, "scaling")
    flagged = True
    for _ in range(cfg.max_resamples + 1):
        if cfg.activation != "softmax" or all(
            _max_attention(spec, Sequence(s * Z, Y)) <= cfg.saturation_threshold for s in cfg.sigma_grid
        ):
            flagged = False
            break
        spec = init_spec(cfg.d_v, cfg.d_k, rng, std=cfg.weight_std, heads=cfg.heads,
                         activation=cfg.activation, parameterization=cfg.parameterization,
                         temperature=cfg.temperature)
        Z = rng.normal(size=(cfg.L, cfg.d_v))
    norms = []
    for s in cfg.sigma_grid:
        grid = assemble(spec, Sequence(s * Z, Y), cap=cfg.element_cap)
        norms.append({(block_label(r, c, cfg.heads), part): float(np.linalg.norm(grid[r, c, part]))
                      for r, c in upper_pairs(grid.params) for part in ("outer", "functional", "full")})
    return norms, flagged


def run_scaling(cfg: ExperimentConfig, threads: int = 1) -> ScalingResult:
    per_seed = _pmap(lambda s: _scaling_seed(cfg, s), cfg.seeds, threads)
    n_flagged = sum(f for _, f in per_seed)
    keys = list(per_seed[0][0][0].keys())
    res = ScalingResult()
    for key in keys:
        means = []
        for i, s in enumerate(cfg.sigma_grid):
            m, e = _mean_sem([norms[i][key] for norms, _ in per_seed])
            means.append(m)
            res.records.append((key[0], key[1], s, m, e, n_flagged))
        res.slopes[key] = fit_slope(cfg.sigma_grid, means)
    return res


def cmd_scaling(cfg: ExperimentConfig, out: Path, threads: int = 1, make_svg: bool = False) -> ScalingResult:
    out.mkdir(parents=True, exist_ok=True)
    res = run_scaling(cfg, threads)
    write_csv(out / "scaling.csv", ["block", "part", "sigma", "mean_norm", "sem", "n_flagged"], res.records)
    write_json(out / "scaling.json", {
        "command": "scaling",
        "config": asdict(cfg),
        "n_flagged_seeds": res.records[0][5] if res.records else 0,
        "slopes": res.summary_rows(),
    })
    if make_svg:
        for part in ("outer", "functional", "full"):
            series = {b: res.series(b, p) for (b, p) in res.slopes if p == part}
            (out / f"scaling_{part}.svg").write_text(
                svg.line_chart(series, f"{part} block norms vs input scale", "sigma", "mean Frobenius norm",
                               logx=True, logy=True), encoding="utf-8")
    return res


# -- spectrum ----------------------------------------------------------------------


def numerical_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def rank_bound(d_k: int, d_v: int) -> int:
    """Upper bound on the rank of the T-outer Hessian."""
    return 2 * d_k * d_v - d_k * d_k if d_k < d_v else d_v * d_v


def pairing_residuals(eig: np.ndarray) -> np.ndarray:
    """``|λ_i + λ_{n-1-i}|`` for ascending eigenvalues."""
    e = np.sort(eig)
    return np.abs(e + e[::-1])


def multiplicity_residual(eig: np.ndarray, m: int) -> float:
    e = np.sort(eig)
    if e.size % m:
        return float("inf")
    return float(np.max(np.ptp(e.reshape(-1, m), axis=1)))


def spectrum_instance(cfg: ExperimentConfig, seed: int):
    if cfg.parameterization != "classical" or cfg.heads != 1 or cfg.activation != "softmax":
        raise ConfigError("spectrum needs single-head classical softmax attention")
    spec, Z, Y, _ = draw_instance(cfg, seed, "spectrum")
    seq = Sequence(cfg.probe_sigma * Z, Y)
    dec = t_decompose(spec, seq)
    full = assemble(spec, seq, cap=cfg.element_cap).matrix("full")
    mats = {"T_functional": dec.T_functional, "T_outer": dec.T_outer, "full": full}
    rows, info = [], {"seed": seed}
    for name, M in mats.items():
        M = 0.5 * (M + M.T)
        eig = np.linalg.eigvalsh(M)
        sv = np.sort(np.linalg.svd(M, compute_uv=False))[::-1]
        rk = numerical_rank(M)
        pr = pairing_residuals(eig)
        for i, (lam, p) in enumerate(zip(eig, pr)):
            rows.append((seed, name, i, float(lam), float(sv[i]), float(p), rk))
        info[name] = {"rank": rk, "max_pairing_residual": float(np.max(pr)),
                      "min_eigenvalue": float(eig[0]), "max_eigenvalue": float(eig[-1])}
    info["T_functional"]["multiplicity_residual"] = multiplicity_residual(np.linalg.eigvalsh(dec.T_functional), cfg.d_k)
    info["T_outer"]["rank_bound"] = rank_bound(cfg.d_k, cfg.d_v)
    info["assembly_residual"] = dec.assembly_residual
    return rows, info


def cmd_spectrum(cfg: ExperimentConfig, out: Path, threads: int = 1, make_svg: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    results = _pmap(lambda s: spectrum_instance(cfg, s), cfg.seeds, threads)
    rows = [r for rs, _ in results for r in rs]
    write_csv(out / "spectrum.csv",
              ["seed", "matrix", "index", "eigenvalue", "singular_value", "pairing_residual", "numerical_rank"], rows)
    per_seed = [info for _, info in results]
    summary = {
        "command": "spectrum",
        "config": asdict(cfg),
        "rank_bound": rank_bound(cfg.d_k, cfg.d_v),
        "max_pairing_residual": max(i["T_functional"]["max_pairing_residual"] for i in per_seed),
        "max_multiplicity_residual": max(i["T_functional"]["multiplicity_residual"] for i in per_seed),
        "max_T_outer_rank": max(i["T_outer"]["rank"] for i in per_seed),
        "per_seed": per_seed,
    }
    write_json(out / "spectrum.json", summary)
    if make_svg:
        series = {}
        for name in ("T_functional", "T_outer", "full"):
            pts = [(r[2], r[3]) for r in rows if r[0] == cfg.seeds[0] and r[1] == name]
            series[name] = ([p[0] for p in pts], [p[1] for p in pts])
        (out / "spectrum.svg").write_text(
            svg.line_chart(series, f"sorted eigenvalues, seed {cfg.seeds[0]}", "index", "eigenvalue"),
            encoding="utf-8")
    return summary


# -- histogram ---------------------------------------------------------------------


def log_histogram(values: np.ndarray, bins: int = HIST_BINS):
    """Counts of ``values`` over ``bins`` log-spaced bins spanning the positive range.

    Zeros are reported separately. With no positive values (or a single
    distinct one) a single bin is returned.
    """
    v = np.asarray(values, float).ravel()
    pos = v[v > 0]
    n_zero = int(np.sum(v == 0))
    if pos.size == 0:
        return np.array([0.0, 0.0]), np.array([0]), n_zero
    lo, hi = float(pos.min()), float(pos.max())
    if lo == hi:
        return np.array([lo, hi]), np.array([pos.size]), n_zero
    edges = np.geomspace(lo, hi, bins + 1)
    counts, _ = np.histogram(pos, bins=edges)
    return edges, counts, n_zero


def _median_stats(v: np.ndarray) -> dict:
    nz = v[v > 0]
    return {
        "median_abs_nonzero": float(np.median(nz)) if nz.size else 0.0,
        "median_abs_all": float(np.median(v)),
        "n_entries": int(v.size),
        "n_zero": int(v.size - nz.size),
    }


def histogram_entries(cfg: ExperimentConfig, activation: str) -> dict[str, np.ndarray]:
    if cfg.parameterization != "classical":
        raise ConfigError("histogram compares query and value blocks of classical attention")
    out = {"Q/Q": [], "V/V": []}
    for seed in cfg.seeds:
        spec, Z, Y, _ = draw_instance(cfg, seed, "histogram", activation=activation)
        grid = assemble(spec, Sequence(cfg.histogram_sigma * Z, Y), cap=cfg.element_cap)
        out["Q/Q"].append(np.abs(grid["Q", "Q"]).ravel())
        out["V/V"].append(np.abs(grid["V", "V"]).ravel())
    return {k: np.concatenate(v) for k, v in out.items()}


def cmd_histogram(cfg: ExperimentConfig, out: Path, threads: int = 1, make_svg: bool = False) -> dict:
    """Histograms of absolute (Q,Q) and (V,V) full-block entries for softmax and identity attention.

    Medians are taken over non-zero entries: the value block is a Kronecker
    product with the identity, so most of its entries are structural zeros.
    """
    out.mkdir(parents=True, exist_ok=True)
    variants = ("softmax", "identity")
    entries = _pmap(lambda a: histogram_entries(cfg, a), variants, threads)
    summary = {"command": "histogram", "config": asdict(cfg), "bins": HIST_BINS, "variants": {}}
    for act, ent in zip(variants, entries):
        edges, _, _ = log_histogram(np.concatenate(list(ent.values())))
        rows, series = [], {}
        for block, v in ent.items():
            pos = v[v > 0]
            if edges.size > 2:
                counts, _ = np.histogram(pos, bins=edges)
            else:
                counts = np.array([pos.size])
            for lo, hi, n in zip(edges[:-1], edges[1:], counts):
                rows.append((block, float(lo), float(hi), int(n)))
            rows.append((block, 0.0, 0.0, int(v.size - pos.size)))  # zero entries
            series[block] = (list(np.sqrt(edges[:-1] * edges[1:])), list(counts.astype(float)))
        write_csv(out / f"histogram_{act}.csv", ["block", "bin_lo", "bin_hi", "count"], rows)
        stats_ = {b: _median_stats(v) for b, v in ent.items()}
        q, val = stats_["Q/Q"]["median_abs_nonzero"], stats_["V/V"]["median_abs_nonzero"]
        stats_["median_ratio_V_over_Q"] = val / q if q > 0 else None
        summary["variants"][act] = stats_
        if make_svg:
            (out / f"histogram_{act}.svg").write_text(
                svg.line_chart(series, f"|entries| of full blocks ({act})", "|entry|", "count", logx=True),
                encoding="utf-8")
    write_json(out / "histogram.json", summary)
    return summary


# -- depth -------------------------------------------------------------------------


def _depth_check(depth: int, sigma_min: float) -> None:
    # the value-block Hessian norm scales like sigma^(2 * 3^D)
    if 2 * 3**depth * math.log10(sigma_min) < -280:
        raise ConfigError(f"depth {depth} underflows double precision at sigma={sigma_min}")


def stacked_attention_loss(layers, X: np.ndarray, W_V_last: np.ndarray) -> float:
    """Square loss against zero labels of ``len(layers)`` identity-attention layers; the last value weight is free."""
    H = X
    zeros = np.zeros_like(X)
    for spec in layers[:-1]:
        H = forward(spec, Sequence(H, zeros)).F
    last = layers[-1].with_param("V", W_V_last)
    F = forward(last, Sequence(H, zeros)).F
    return float(np.sum(F * F) / F.size)


def chain_loss(Ws, X: np.ndarray, W_last: np.ndarray) -> float:
    H = X
    for W in Ws[:-1]:
        H = H @ W
    F = H @ W_last
    return float(np.sum(F * F) / F.size)


def _depth_seed(cfg: ExperimentConfig, seed: int, depth: int):
    rng = np.random.default_rng([seed, _TAGS["depth"], depth])
    std = cfg.weight_std
    layers = [init_spec(cfg.d_v, cfg.d_k, rng, std=std, activation="identity", temperature=cfg.temperature)
              for _ in range(depth)]
    Ws = [rng.normal(0.0, std, (cfg.d_v, cfg.d_v)) for _ in range(depth)]
    Z = rng.normal(size=(cfg.L, cfg.d_v))
    att, mlp = [], []
    for s in cfg.sigma_grid:
        X = s * Z
        Ha = fd_hessian_fn(lambda th: stacked_attention_loss(layers, X, th.reshape(cfg.d_v, cfg.d_v)),
                           layers[-1].W_V.ravel())
        Hm = fd_hessian_fn(lambda th: chain_loss(Ws, X, th.reshape(cfg.d_v, cfg.d_v)), Ws[-1].ravel())
        att.append(float(np.linalg.norm(Ha)))
        mlp.append(float(np.linalg.norm(Hm)))
    return att, mlp


def run_depth(cfg: ExperimentConfig, threads: int = 1) -> ScalingResult:
    if cfg.d_v**2 > DEFAULT_PARAM_CAP:
        raise OracleError(f"value block has {cfg.d_v ** 2} parameters, above the oracle cap {DEFAULT_PARAM_CAP}")
    for D in cfg.depths:
        _depth_check(D, min(cfg.sigma_grid))
    res = ScalingResult()
    cells = [(D, s) for D in cfg.depths for s in cfg.seeds]
    outs = dict(zip(cells, _pmap(lambda c: _depth_seed(cfg, c[1], c[0]), cells, threads)))
    for D in cfg.depths:
        for model, idx in (("attention", 0), ("mlp", 1)):
            block = f"{model}/D{D}"
            means = []
            for i, sg in enumerate(cfg.sigma_grid):
                m, e = _mean_sem([outs[(D, s)][idx][i] for s in cfg.seeds])
                means.append(m)
                res.records.append((block, "value", sg, m, e, 0))
            res.slopes[(block, "value")] = fit_slope(cfg.sigma_grid, means)
    return res


def cmd_depth(cfg: ExperimentConfig, out: Path, threads: int = 1, make_svg: bool = False) -> ScalingResult:
    """Last-layer value-block Hessian norm vs input scale for stacked linear attention and a linear chain.

    Labels are zero so the loss is exactly quadratic in the value weight and
    the finite-difference Hessian is not swamped by a constant loss offset.
    """
    out.mkdir(parents=True, exist_ok=True)
    res = run_depth(cfg, threads)
    write_csv(out / "depth.csv", ["model", "depth", "sigma", "mean_norm", "sem"],
              [(r[0].split("/")[0], int(r[0].split("D")[-1]), r[2], r[3], r[4]) for r in res.records])
    slopes = []
    for (block, _), (sl, se) in res.slopes.items():
        model, D = block.split("/")[0], int(block.split("D")[-1])
        slopes.append({"model": model, "depth": D, "slope": sl, "slope_stderr": se,
                       "expected_slope": 2.0 * 3**D if model == "attention" else 2.0})
    write_json(out / "depth.json", {"command": "depth", "config": asdict(cfg), "slopes": slopes})
    if make_svg:
        series = {b: res.series(b, p) for (b, p) in res.slopes}
        (out / "depth.svg").write_text(
            svg.line_chart(series, "last-layer value block norm vs input scale", "sigma", "Frobenius norm",
                           logx=True, logy=True), encoding="utf-8")
    return res


def schema_path(command: str) -> Path:
    """Path of the shipped JSON schema for a command's summary file."""
    return Path(__file__).with_name("schemas") / f"{command}.schema.json"


COMMANDS = {
    "verify": cmd_verify,
    "scaling": cmd_scaling,
    "spectrum": cmd_spectrum,
    "histogram": cmd_histogram,
    "depth": cmd_depth,
}
