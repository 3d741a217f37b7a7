import numpy as np
import pytest

from attnhess.model import total_loss
from attnhess.oracle import (
    OracleError,
    compare,
    fd_hessian,
    fd_hessian_fn,
    fd_jacobian_fn,
    pack,
    unpack,
)

from conftest import make_instance


def test_quadratic_exact(rng):
    A = rng.normal(size=(5, 5))
    Q = A + A.T
    b = rng.normal(size=5)
    H = fd_hessian_fn(lambda x: 0.5 * x @ Q @ x + b @ x, rng.normal(size=5))
    assert np.max(np.abs(H - Q)) <= 1e-8
    assert np.array_equal(H, H.T)


def test_smooth_function_accuracy():
    f = lambda x: np.exp(x[0]) * np.sin(x[1]) + x[0] ** 3 * x[1]
    x = np.array([0.3, -0.7])
    want = np.array([
        [np.exp(x[0]) * np.sin(x[1]) + 6 * x[0] * x[1], np.exp(x[0]) * np.cos(x[1]) + 3 * x[0] ** 2],
        [np.exp(x[0]) * np.cos(x[1]) + 3 * x[0] ** 2, -np.exp(x[0]) * np.sin(x[1])],
    ])
    assert np.max(np.abs(fd_hessian_fn(f, x) - want)) <= 1e-9


def test_jacobian_linear_map(rng):
    M = rng.normal(size=(3, 4))
    J = fd_jacobian_fn(lambda x: M @ x, rng.normal(size=4))
    assert np.max(np.abs(J - M)) <= 1e-9


def test_pack_roundtrip():
    spec, seq = make_instance(0)
    theta = pack(spec)
    assert theta.size == 8 + 8 + 16
    back = unpack(spec, theta)
    assert total_loss(back, seq) == total_loss(spec, seq)
    assert np.array_equal(pack(spec, ["V"]), spec.W_V.ravel())


def test_threads_do_not_change_result():
    spec, seq = make_instance(1, L=2, d_v=2, d_k=1)
    assert np.array_equal(fd_hessian(spec, seq), fd_hessian(spec, seq, n_jobs=3))


def test_caps_and_nonfinite():
    with pytest.raises(OracleError, match="cap"):
        fd_hessian_fn(lambda x: 0.0, np.zeros(10), cap=5)
    with pytest.raises(OracleError):
        fd_jacobian_fn(lambda x: x, np.zeros(10), cap=5)
    with pytest.raises(OracleError, match="non-finite"):
        fd_hessian_fn(lambda x: np.inf, np.zeros(2))


def test_compare_report():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = a.copy()
    b[1, 0] += 0.5
    rep = compare(a, b)
    assert rep.max_abs_error == 0.5 and rep.worst_index == (1, 0)
    assert rep.passed(0.6) and not rep.passed(0.4)
    assert not rep.passed(0.6, rel_fro=1e-3)
    with pytest.raises(ValueError):
        compare(a, np.ones((3, 3)))
