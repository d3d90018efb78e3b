import numpy as np
import pytest

from rpf.network import case9, network_from_json
from rpf.residual import ControlLayout


def make_two_bus(x: float = 0.2, r: float = 0.0, k_v: float = 20.0,
                 p: float = 0.8, q: float = 0.3, p_m: float = 0.85,
                 v_ref: float = 1.02):
    """Generator at bus 1, load at bus 2, one lossless-by-default line.
    Small enough that the balanced state has a closed form."""
    return network_from_json({
        "name": "two_bus",
        "base_mva": 100.0,
        "buses": [{"id": 1, "v_min": 0.9, "v_max": 1.1},
                  {"id": 2, "v_min": 0.9, "v_max": 1.1}],
        "branches": [{"from": 1, "to": 2, "r": r, "x": x}],
        "loads": [{"bus": 2, "p": p, "q": q}],
        "generators": [{"bus": 1, "p_m": p_m, "v_ref": v_ref, "k_v": k_v,
                        "p_rated": 2.0, "cost": [0.1, 1.0, 100.0]}],
    })


@pytest.fixture
def two_bus():
    return make_two_bus()


@pytest.fixture(scope="session")
def net9():
    return case9()


@pytest.fixture(scope="session")
def layout9(net9):
    return ControlLayout.for_network(net9)


def fd_jacobian(fn, x0: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a vector function, column per input."""
    x0 = np.asarray(x0, dtype=float)
    f0 = np.atleast_1d(fn(x0))
    J = np.zeros((f0.shape[0], x0.shape[0]))
    for k in range(x0.shape[0]):
        dx = np.zeros_like(x0)
        dx[k] = eps
        J[:, k] = (np.atleast_1d(fn(x0 + dx)) - np.atleast_1d(fn(x0 - dx))) / (2 * eps)
    return J


def assert_close(got, want, tol: float, what: str = ""):
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    scale = max(1.0, float(np.max(np.abs(want))) if want.size else 1.0)
    err = float(np.max(np.abs(got - want))) if want.size else 0.0
    assert err <= tol * scale, f"{what}: |err|={err:.3e} > {tol:.1e} (scale {scale:.3g})"
