import cmath

import numpy as np
import pytest

from rpf.errors import DegenerateVoltage
from rpf.injectors import (
    GeneratorControl,
    GeneratorParams,
    LoadControl,
    branch_partials,
    branch_terminal_currents,
    generator_current,
    generator_partials,
    load_current,
    load_partials,
)
from rpf.network import make_branch

from conftest import fd_jacobian, assert_close


def test_load_current_signs():
    i = load_current(LoadControl(p=0.8, q=0.3), v=1.0)
    # consumption: both parts pull current out of the bus
    assert i.real == pytest.approx(-0.8)
    assert i.imag == pytest.approx(-0.3)
    # drawn power p = -v * re(i), q = -v * im(i) recovers the setpoint
    v = 0.93
    i = load_current(LoadControl(p=0.8, q=0.3), v)
    assert -v * i.real == pytest.approx(0.8)
    assert -v * i.imag == pytest.approx(0.3)


def test_generator_current_signs():
    g = GeneratorControl(p_m=0.7, v_ref=1.02)
    params = GeneratorParams(k_v=20.0)
    i = generator_current(g, params, v=1.0)
    assert i.real == pytest.approx(0.7)
    # sagging voltage -> positive reactive injection (q = -v im(i) > 0)
    assert i.imag == pytest.approx(20.0 * (1.0 - 1.02))
    assert -1.0 * i.imag > 0
    # at v = v_ref the reactive channel is quiet
    assert generator_current(g, params, v=1.02).imag == pytest.approx(0.0)


def test_voltage_floor_raises():
    with pytest.raises(DegenerateVoltage):
        load_current(LoadControl(0.1, 0.1), v=1e-3)
    with pytest.raises(DegenerateVoltage):
        generator_current(GeneratorControl(0.1, 1.0), GeneratorParams(10.0), v=0.0)


def test_load_partials_fd():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p, q = rng.uniform(0.1, 2.0, 2)
        v = rng.uniform(0.5, 1.3)
        ctrl = LoadControl(p, q)
        got = load_partials(ctrl, v)

        def f(z):
            i = load_current(LoadControl(z[1], z[2]), z[0])
            return np.array([i.real, i.imag])

        J = fd_jacobian(f, np.array([v, p, q]))
        for k, key in enumerate(("v", "p", "q")):
            assert_close([got[key].real, got[key].imag], J[:, k], 1e-8,
                         f"load d/d{key}")


def test_generator_partials_fd():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p_m, v_ref = rng.uniform(0.1, 2.0), rng.uniform(0.95, 1.05)
        k_v = rng.uniform(5.0, 100.0)
        v = rng.uniform(0.5, 1.3)
        got = generator_partials(GeneratorControl(p_m, v_ref),
                                 GeneratorParams(k_v), v)

        def f(z):
            i = generator_current(GeneratorControl(z[1], z[2]),
                                  GeneratorParams(k_v), z[0])
            return np.array([i.real, i.imag])

        J = fd_jacobian(f, np.array([v, p_m, v_ref]))
        for k, key in enumerate(("v", "p_m", "v_ref")):
            assert_close([got[key].real, got[key].imag], J[:, k], 1e-8,
                         f"gen d/d{key}")


def test_branch_currents_match_phasor_model():
    """The local-frame expressions equal the absolute-frame pi model rotated
    into each terminal's own frame."""
    rng = np.random.default_rng(2)
    for _ in range(50):
        br = make_branch(0, 0, 1, r=rng.uniform(0, 0.1),
                         x=rng.uniform(0.05, 0.3), b_c=rng.uniform(0, 0.3),
                         tap=rng.uniform(0.9, 1.1))
        v_f, v_t = rng.uniform(0.8, 1.2, 2)
        th_f, th_t = rng.uniform(-1.0, 1.0, 2)
        phi = th_t - th_f
        V_f = v_f * cmath.exp(1j * th_f)
        V_t = v_t * cmath.exp(1j * th_t)
        # current the branch draws out of each bus, absolute frame
        into_f = -(br.y_ff * V_f + br.y_ft * V_t)
        into_t = -(br.y_tf * V_f + br.y_tt * V_t)
        i_f, i_t = branch_terminal_currents(br, v_f, v_t, phi)
        assert i_f == pytest.approx(into_f * cmath.exp(-1j * th_f))
        assert i_t == pytest.approx(into_t * cmath.exp(-1j * th_t))


def test_branch_partials_fd():
    rng = np.random.default_rng(3)
    br = make_branch(0, 0, 1, r=0.017, x=0.092, b_c=0.158)
    for _ in range(50):
        v_f, v_t = rng.uniform(0.8, 1.2, 2)
        phi = rng.uniform(-1.4, 1.4)
        got = branch_partials(br, v_f, v_t, phi)

        def f(z):
            i_f, i_t = branch_terminal_currents(br, z[0], z[1], z[2])
            return np.array([i_f.real, i_f.imag, i_t.real, i_t.imag])

        J = fd_jacobian(f, np.array([v_f, v_t, phi]))
        for k, (kf, kt) in enumerate((("f_vf", "t_vf"), ("f_vt", "t_vt"),
                                      ("f_phi", "t_phi"))):
            want = J[:, k]
            assert_close([got[kf].real, got[kf].imag,
                          got[kt].real, got[kt].imag], want, 1e-7,
                         f"branch col {k}")


def test_branch_symmetry_under_flip():
    """Swapping the endpoint roles and negating phi swaps the terminal
    currents (no tap, so the branch is symmetric)."""
    br = make_branch(0, 0, 1, r=0.01, x=0.1, b_c=0.2)
    flipped = make_branch(0, 1, 0, r=0.01, x=0.1, b_c=0.2)
    i_f, i_t = branch_terminal_currents(br, 1.04, 0.97, 0.3)
    j_f, j_t = branch_terminal_currents(flipped, 0.97, 1.04, -0.3)
    assert i_f == pytest.approx(j_t)
    assert i_t == pytest.approx(j_f)
