"""Injector current models in bus-local rotating frames.

Every component attached to a bus contributes a complex current, expressed in
the frame rotating with that bus's voltage phasor (so the local voltage is the
real magnitude v). Currents flowing into the bus are positive. Branches see
the two terminal frames separated by the branch angle phi, positive in the
from -> to direction.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass
from typing import Protocol

from .errors import DegenerateVoltage

# Magnitudes at or below this floor are outside the model's domain.
VOLTAGE_FLOOR = 1e-3


@dataclass(frozen=True)
class LoadControl:
    p: float
    q: float


@dataclass(frozen=True)
class GeneratorControl:
    p_m: float
    v_ref: float


@dataclass(frozen=True)
class GeneratorParams:
    k_v: float
    p_rated: float = 1.0


def _check_voltage(v: float) -> None:
    if v <= VOLTAGE_FLOOR:
        raise DegenerateVoltage(f"voltage magnitude {v} at or below floor {VOLTAGE_FLOOR}")


def load_current(ctrl: LoadControl, v: float) -> complex:
    """Constant-power load drawing (p, q): i = -p/v - j q/v."""
    _check_voltage(v)
    return complex(-ctrl.p / v, -ctrl.q / v)


def load_partials(ctrl: LoadControl, v: float) -> dict[str, complex]:
    """d(current)/d{v, p, q}; each entry packs d(re) + j d(im)."""
    _check_voltage(v)
    v2 = v * v
    return {
        "v": complex(ctrl.p / v2, ctrl.q / v2),
        "p": complex(-1.0 / v, 0.0),
        "q": complex(0.0, -1.0 / v),
    }


def generator_current(ctrl: GeneratorControl, params: GeneratorParams, v: float) -> complex:
    """Droop generator: i = p_m/v + j k_v (v - v_ref).

    The reactive term's sign makes a sagging magnitude (v < v_ref) inject
    supporting reactive power into the bus.
    """
    _check_voltage(v)
    return complex(ctrl.p_m / v, params.k_v * (v - ctrl.v_ref))


def generator_partials(ctrl: GeneratorControl, params: GeneratorParams,
                       v: float) -> dict[str, complex]:
    """d(current)/d{v, p_m, v_ref}."""
    _check_voltage(v)
    return {
        "v": complex(-ctrl.p_m / (v * v), params.k_v),
        "p_m": complex(1.0 / v, 0.0),
        "v_ref": complex(0.0, -params.k_v),
    }


def branch_terminal_currents(branch, v_f: float, v_t: float, phi: float) -> tuple[complex, complex]:
    """Currents the branch injects into its terminal buses, each in that
    bus's local frame. phi rotates the remote terminal: the to-side phasor
    appears as v_t e^{j phi} from the from side, and vice versa."""
    e = cmath.exp(1j * phi)
    i_f = -branch.y_ff * v_f - branch.y_ft * v_t * e
    i_t = -branch.y_tf * v_f * e.conjugate() - branch.y_tt * v_t
    return i_f, i_t


def branch_partials(branch, v_f: float, v_t: float, phi: float) -> dict[str, complex]:
    """Partials of both terminal currents wrt (v_f, v_t, phi)."""
    e = cmath.exp(1j * phi)
    ec = e.conjugate()
    return {
        "f_vf": -branch.y_ff,
        "f_vt": -branch.y_ft * e,
        "f_phi": -1j * branch.y_ft * v_t * e,
        "t_vf": -branch.y_tf * ec,
        "t_vt": -branch.y_tt,
        "t_phi": 1j * branch.y_tf * v_f * ec,
    }


class SteadyStateInjector(Protocol):
    """Extension point for components whose current comes from an internal
    steady-state equilibrium. Implementations resolve their internal state to
    a terminal current and its partials; the residual assembly only ever sees
    this interface. None are shipped."""

    def current(self, v: float, ctrl) -> complex: ...

    def partials(self, v: float, ctrl) -> dict[str, complex]: ...
