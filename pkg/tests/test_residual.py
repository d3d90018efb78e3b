import numpy as np
import pytest

from rpf.errors import AngleInconsistency, ValidationError
from rpf.residual import (
    ControlLayout,
    SlackSpec,
    VoltageState,
    assemble_residual,
    default_controls,
    flat_state,
    n_residuals,
    n_variables,
    reconstruct_bus_angles,
    residual_jacobian,
    residual_labels,
    residual_norm,
    ybus_oracle_mismatch,
)
from rpf.solver import solve_rpf

from conftest import fd_jacobian, assert_close, make_two_bus


def rand_state(rng, net) -> VoltageState:
    return VoltageState(
        rng.uniform(0.85, 1.15, net.n_bus),
        rng.uniform(-0.4, 0.4, net.n_branch),
    )


def closed_state(rng, net) -> VoltageState:
    """Random state whose cycle sums vanish, so bus angles exist."""
    theta = rng.uniform(-0.5, 0.5, net.n_bus)
    phi = np.array([theta[br.to_bus] - theta[br.from_bus]
                    for br in net.branches])
    return VoltageState(rng.uniform(0.85, 1.15, net.n_bus), phi)


def test_dimensions(net9):
    assert n_variables(net9) == 18
    assert n_residuals(net9) == 19
    labels = residual_labels(net9)
    assert len(labels) == 19
    assert labels[:2] == ["re_kcl_bus1", "re_kcl_bus2"]
    assert labels[9] == "im_kcl_bus1"
    assert labels[-1] == "kvl_cycle0"


def test_layout_indices(net9, layout9):
    assert layout9.size == 12
    assert len(layout9.labels) == 12
    # loads first (p, q interleaved), then generators (p_m, v_ref)
    assert layout9.labels[0] == "p_load_bus5"
    assert layout9.labels[1] == "q_load_bus5"
    assert layout9.labels[6] == "p_m_bus1"
    assert layout9.labels[7] == "v_ref_bus1"
    u = default_controls(net9)
    assert u[layout9.gen_p_m[1]] == pytest.approx(1.63)
    assert u[layout9.load_p[0]] == pytest.approx(0.9)


def test_state_vector_roundtrip(net9):
    rng = np.random.default_rng(0)
    v = rand_state(rng, net9)
    again = VoltageState.from_vector(v.to_vector(), net9.n_bus)
    assert np.array_equal(again.magnitudes, v.magnitudes)
    assert np.array_equal(again.branch_angles, v.branch_angles)
    assert flat_state(net9).in_domain


def test_residual_zero_iff_balanced(two_bus):
    layout = ControlLayout.for_network(two_bus)
    u = default_controls(two_bus)
    sol = solve_rpf(two_bus, u)
    r = assemble_residual(two_bus, sol.v_star, u)
    # feasible-by-construction controls rarely balance exactly, but the
    # solver's minimum tells us what zero looks like
    assert residual_norm(r) == pytest.approx(sol.rho, abs=1e-14)
    v_off = sol.v_star.copy()
    v_off.magnitudes[1] += 0.01
    assert residual_norm(assemble_residual(two_bus, v_off, u)) > sol.rho


def test_kvl_residual_is_scaled_cycle_sum(net9, layout9):
    rng = np.random.default_rng(1)
    u = default_controls(net9)
    v = rand_state(rng, net9)
    r = assemble_residual(net9, v, u)
    cyc = net9.cycles[0]
    raw = sum(s * v.branch_angles[b] for b, s in zip(cyc.branches, cyc.signs))
    assert r[-1] == pytest.approx(cyc.y_scale * raw, rel=1e-12)


def test_residual_against_ybus_oracle(net9, layout9):
    """KCL entries must match the admittance-matrix mismatch computed on a
    closed state through absolute angles."""
    rng = np.random.default_rng(2)
    for _ in range(25):
        v = closed_state(rng, net9)
        u = default_controls(net9)
        u = u * rng.uniform(0.5, 1.5, u.shape)
        r = assemble_residual(net9, v, u)
        mism = ybus_oracle_mismatch(net9, v, u)
        got = np.concatenate([r[:9] - mism.real, r[9:18] - mism.imag])
        assert_close(got, np.zeros(18), 1e-12, "ybus oracle")


def test_jacobian_voltage_fd(net9, layout9):
    rng = np.random.default_rng(3)
    u = default_controls(net9)
    for _ in range(10):
        v = rand_state(rng, net9)
        J = residual_jacobian(net9, v, u, "voltage")
        assert J.shape == (19, 18)

        def f(x):
            return assemble_residual(net9, VoltageState.from_vector(x, 9), u)

        Jfd = fd_jacobian(f, v.to_vector())
        assert_close(J, Jfd, 1e-6, "voltage jacobian")


def test_jacobian_control_fd(net9, layout9):
    rng = np.random.default_rng(4)
    v = rand_state(rng, net9)
    u0 = default_controls(net9)
    idx = np.arange(layout9.size)
    J = residual_jacobian(net9, v, u0, idx)
    assert J.shape == (19, 12)

    def f(u):
        return assemble_residual(net9, v, u)

    Jfd = fd_jacobian(f, u0)
    assert_close(J, Jfd, 1e-6, "control jacobian")
    # a subset of columns
    sub = np.array([1, 7, 10])
    assert_close(residual_jacobian(net9, v, u0, sub), Jfd[:, sub], 1e-6,
                 "control subset")


def test_kvl_rows_have_no_magnitude_dependence(net9, layout9):
    rng = np.random.default_rng(5)
    v = rand_state(rng, net9)
    u = default_controls(net9)
    J = residual_jacobian(net9, v, u, "voltage")
    assert np.all(J[18, :9] == 0.0)
    Ju = residual_jacobian(net9, v, u, np.arange(12))
    assert np.all(Ju[18] == 0.0)


def test_weights_scale_residual_norm(net9, layout9):
    rng = np.random.default_rng(6)
    v = rand_state(rng, net9)
    u = default_controls(net9)
    r = assemble_residual(net9, v, u)
    w = rng.uniform(0.5, 2.0, r.shape[0])
    assert residual_norm(r, w) == pytest.approx(0.5 * float(r @ (w * r)))
    assert residual_norm(r) == pytest.approx(0.5 * float(r @ r))
    with pytest.raises(ValidationError):
        residual_norm(r, -np.ones(r.shape[0]))
    with pytest.raises(ValidationError):
        residual_norm(r, w[:-1])


def test_angle_reconstruction_roundtrip(net9):
    rng = np.random.default_rng(7)
    theta = rng.uniform(-0.8, 0.8, 9)
    theta -= theta[0]
    phi = np.array([theta[br.to_bus] - theta[br.from_bus]
                    for br in net9.branches])
    got = reconstruct_bus_angles(net9, phi)
    assert_close(got, theta, 1e-12, "angle reconstruction")


def test_angle_reconstruction_rejects_open_cycles(net9):
    phi = np.zeros(9)
    phi[net9.cycles[0].branches[0]] = 0.05  # breaks the loop closure
    with pytest.raises(AngleInconsistency):
        reconstruct_bus_angles(net9, phi)
    # a tree network never raises
    two = make_two_bus()
    assert reconstruct_bus_angles(two, np.array([0.3]))[1] == pytest.approx(0.3)


def test_slack_spec_validation():
    with pytest.raises(ValidationError):
        SlackSpec(np.array([0.5, 0.4]))
    with pytest.raises(ValidationError):
        SlackSpec(np.array([1.5, -0.5]))
    s = SlackSpec.single(1, 3)
    assert s.factors.tolist() == [0.0, 1.0, 0.0]
    d = SlackSpec.distributed(np.array([0.2, 0.3, 0.5]))
    assert d.factors.sum() == 1.0


def test_slack_direction(net9, layout9):
    d = SlackSpec.single(2, 3).direction(layout9)
    assert d.shape == (12,)
    assert d[layout9.gen_p_m[2]] == 1.0
    assert np.count_nonzero(d) == 1
