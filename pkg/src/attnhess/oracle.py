"""Finite-difference ground truth for Jacobians and loss Hessians."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import AttentionSpec, Sequence, forward, total_loss

EPS = np.finfo(np.float64).eps
DEFAULT_PARAM_CAP = 4096


class OracleError(ValueError):
    pass


def _steps(theta: np.ndarray, power: float) -> np.ndarray:
    h = EPS**power * np.maximum(1.0, np.abs(theta))
    # exactly representable step: (theta + h) - theta
    return (theta + h) - theta


def _mixed_second(ev, theta, i, j, hi, hj) -> float:
    vals = []
    for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        p = theta.copy()
        p[i] += si * hi
        p[j] += sj * hj
        vals.append(ev(p))
    return (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * hi * hj)


def fd_hessian_fn(f: Callable[[np.ndarray], float], theta, cap: int = DEFAULT_PARAM_CAP,
                  n_jobs: int = 1) -> np.ndarray:
    """Central second differences of a scalar function, Richardson-extrapolated and symmetrized.

    Each entry combines the central stencil at steps ``h`` and ``2h``
    (``(4 D_h - D_2h) / 3``), cancelling the ``h^2`` truncation term; with
    ``h ~ eps^(1/6)`` truncation and rounding are both near ``1e-10``.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    n = theta.size
    if n > cap:
        raise OracleError(f"{n} parameters exceed the oracle cap of {cap}")
    h = _steps(theta, 1.0 / 6.0)

    def ev(p):
        v = f(p)
        if not np.isfinite(v):
            raise OracleError("non-finite loss evaluation")
        return v

    def row(i):
        out = np.empty(n - i)
        for j in range(i, n):
            d1 = _mixed_second(ev, theta, i, j, h[i], h[j])
            d2 = _mixed_second(ev, theta, i, j, 2.0 * h[i], 2.0 * h[j])
            out[j - i] = (4.0 * d1 - d2) / 3.0
        return out

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(row, range(n)))
    else:
        rows = [row(i) for i in range(n)]
    H = np.zeros((n, n))
    for i, r in enumerate(rows):
        H[i, i:] = r
        H[i:, i] = r
    return 0.5 * (H + H.T)


def fd_jacobian_fn(g: Callable[[np.ndarray], np.ndarray], theta, cap: int = DEFAULT_PARAM_CAP) -> np.ndarray:
    """Central first differences of a vector-valued function; columns are parameters."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    n = theta.size
    if n > cap:
        raise OracleError(f"{n} parameters exceed the oracle cap of {cap}")
    h = _steps(theta, 1.0 / 3.0)
    cols = []
    for i in range(n):
        p, m = theta.copy(), theta.copy()
        p[i] += h[i]
        m[i] -= h[i]
        gp, gm = np.ravel(g(p)), np.ravel(g(m))
        if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
            raise OracleError("non-finite function evaluation")
        cols.append((gp - gm) / (2.0 * h[i]))
    return np.stack(cols, axis=1)


def _norm_keys(spec: AttentionSpec, params) -> list[tuple[int, str]]:
    if params is None:
        return spec.param_keys()
    return [(0, k) if isinstance(k, str) else (int(k[0]), k[1]) for k in params]


def pack(spec: AttentionSpec, params=None) -> np.ndarray:
    keys = _norm_keys(spec, params)
    return np.concatenate([spec.get_param(k).ravel() for k in keys])


def unpack(spec: AttentionSpec, theta, params=None) -> AttentionSpec:
    keys = _norm_keys(spec, params)
    off = 0
    for k in keys:
        shape = spec.get_param(k).shape
        n = shape[0] * shape[1]
        spec = spec.with_param(k, np.asarray(theta[off:off + n]).reshape(shape))
        off += n
    return spec


def fd_hessian(spec: AttentionSpec, seq: Sequence, params=None, cap: int = DEFAULT_PARAM_CAP,
               n_jobs: int = 1) -> np.ndarray:
    """Finite-difference Hessian of the loss w.r.t. the row-major flattened ``params``.

    ``params`` defaults to the canonical ordering (per head ``Q, K, V``).
    """
    keys = _norm_keys(spec, params)
    return fd_hessian_fn(lambda th: total_loss(unpack(spec, th, keys), seq), pack(spec, keys), cap, n_jobs)


def fd_jacobian(spec: AttentionSpec, seq: Sequence, param, cap: int = DEFAULT_PARAM_CAP) -> np.ndarray:
    """Finite-difference Jacobian of ``vecr(F)`` w.r.t. ``vecr(param)``."""
    keys = _norm_keys(spec, [param])
    return fd_jacobian_fn(lambda th: forward(unpack(spec, th, keys), seq).F.ravel(), pack(spec, keys), cap)


@dataclass(frozen=True)
class OracleReport:
    max_abs_error: float
    rel_frobenius_error: float
    worst_index: tuple[int, int]
    analytic_norm: float
    oracle_norm: float

    def passed(self, max_abs: float, rel_fro: float | None = None) -> bool:
        ok = self.max_abs_error <= max_abs
        if rel_fro is not None:
            ok = ok and self.rel_frobenius_error <= rel_fro
        return ok


def compare(analytic, oracle) -> OracleReport:
    a = np.atleast_2d(np.asarray(analytic, dtype=np.float64))
    o = np.atleast_2d(np.asarray(oracle, dtype=np.float64))
    if a.shape != o.shape:
        raise ValueError(f"shape mismatch: analytic {a.shape} vs oracle {o.shape}")
    diff = np.abs(a - o)
    worst = np.unravel_index(int(np.argmax(diff)), diff.shape)
    o_norm = float(np.linalg.norm(o))
    return OracleReport(
        max_abs_error=float(diff[worst]),
        rel_frobenius_error=float(np.linalg.norm(a - o) / max(1.0, o_norm)),
        worst_index=(int(worst[0]), int(worst[1])),
        analytic_norm=float(np.linalg.norm(a)),
        oracle_norm=o_norm,
    )
