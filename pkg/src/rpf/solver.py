"""Damped least-squares solution of the residual equations.

solve_rpf drives the residual norm rho = 1/2 r'Wr to a stationary point over
the voltage variables. solve_feasible additionally frees one scalar power
adjustment, spread over generator setpoints by a SlackSpec, and solves
jointly so the result is a true operating point (rho ~ 0) whenever one is
reachable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVoltage, InfeasibleRegion, NotConverged
from .injectors import VOLTAGE_FLOOR
from .network import Network
from .residual import (
    ANGLE_LIMIT,
    ControlLayout,
    SlackSpec,
    VoltageState,
    assemble_residual,
    check_weights,
    flat_state,
    residual_jacobian,
)


@dataclass
class SolverConfig:
    max_iter: int = 200
    grad_tol: float = 1e-10
    step_tol: float = 1e-12
    lm_lambda0: float = 1e-3
    lm_factor: float = 10.0
    lm_lambda_max: float = 1e12
    feas_tol: float = 1e-10  # rho at or below this counts as a physical operating point
    angle_margin: float = 1e-6


@dataclass
class RpfSolution:
    v_star: VoltageState
    rho: float
    residual: np.ndarray
    iterations: int
    converged: bool
    grad_norm: float
    rho_history: tuple[float, ...] = field(default_factory=tuple)


@dataclass
class FeasibleSolution:
    v_star: VoltageState
    u_adjusted: np.ndarray
    slack_value: float
    rho: float
    iterations: int
    feasible: bool


def _clip_state_partial(x, n_bus_clip, cfg):
    """Clamp magnitudes to the floor and branch angles inside the open
    interval; trailing entries (slack scalar) pass through untouched."""
    n_bus, n_angle_end = n_bus_clip
    y = x.copy()
    np.clip(y[:n_bus], VOLTAGE_FLOOR, None, out=y[:n_bus])
    hi = ANGLE_LIMIT - cfg.angle_margin
    np.clip(y[n_bus:n_angle_end], -hi, hi, out=y[n_bus:n_angle_end])
    return y, bool(np.any(y != x))


def _lm_minimize(res_fn, jac_fn, x0, n_bus_clip, cfg: SolverConfig, w):
    """Levenberg-Marquardt on rho(x) = 1/2 r(x)'Wr(x).

    n_bus_clip: leading entries treated as magnitudes for domain clipping;
    entries from n_bus_clip up to the angle block end are branch angles; any
    trailing entries (e.g. a slack scalar) are unconstrained.
    """
    x, _ = _clip_state_partial(x0, n_bus_clip, cfg)
    r = res_fn(x)
    w = check_weights(w, r.shape[0])
    rho = 0.5 * float(np.dot(r, w * r))
    history = [rho]
    lam = cfg.lm_lambda0
    n = x.shape[0]
    grad_norm = math.inf
    converged = False
    it = 0

    while it < cfg.max_iter:
        it += 1
        J = jac_fn(x)
        g = J.T @ (w * r)
        grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
        if grad_norm <= cfg.grad_tol:
            converged = True
            break
        H = J.T @ (w[:, None] * J)

        accepted = False
        step_norm = 0.0
        while lam <= cfg.lm_lambda_max:
            try:
                delta = np.linalg.solve(H + lam * np.eye(n), -g)
            except np.linalg.LinAlgError:
                lam *= cfg.lm_factor
                continue
            x_new, clamped = _clip_state_partial(x + delta, n_bus_clip, cfg)
            r_new = res_fn(x_new)
            rho_new = 0.5 * float(np.dot(r_new, w * r_new))
            if rho_new < rho:
                step_norm = float(np.linalg.norm(x_new - x))
                x, r, rho = x_new, r_new, rho_new
                history.append(rho)
                # clamping means the quadratic model overshot the domain:
                # keep damping up instead of relaxing it
                lam = lam * cfg.lm_factor if clamped else max(lam / cfg.lm_factor, 1e-14)
                accepted = True
                break
            lam *= cfg.lm_factor
        if not accepted:
            break  # damping exhausted; gradient is the verdict below
        if step_norm <= cfg.step_tol * (cfg.step_tol + float(np.linalg.norm(x))):
            converged = True
            break

    if not converged:
        # recompute the gradient at the final iterate
        J = jac_fn(x)
        g = J.T @ (w * r)
        grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
        converged = grad_norm <= cfg.grad_tol

    # rho can stall at its floating-point floor while the gradient is still
    # polishable: damped steps judged on the gradient norm finish the job
    # (rho differences down here are sub-ulp, the gradient is not)
    lam_p = cfg.lm_lambda0
    while not converged and grad_norm < 1e-4 and it < cfg.max_iter:
        it += 1
        H = J.T @ (w[:, None] * J)
        improved = False
        while lam_p <= cfg.lm_lambda_max:
            try:
                delta = np.linalg.solve(H + lam_p * np.eye(n), -g)
            except np.linalg.LinAlgError:
                lam_p *= cfg.lm_factor
                continue
            x_new, _ = _clip_state_partial(x + delta, n_bus_clip, cfg)
            r_new = res_fn(x_new)
            J_new = jac_fn(x_new)
            g_new = J_new.T @ (w * r_new)
            gn_new = float(np.max(np.abs(g_new))) if g_new.size else 0.0
            if np.isfinite(gn_new) and gn_new < grad_norm:
                x, r, J, g, grad_norm = x_new, r_new, J_new, g_new, gn_new
                lam_p = max(lam_p / cfg.lm_factor, 1e-14)
                improved = True
                break
            lam_p *= cfg.lm_factor
        if not improved:
            break
        rho = 0.5 * float(np.dot(r, w * r))
        if rho < history[-1]:
            history.append(rho)
        converged = grad_norm <= cfg.grad_tol
    return x, r, rho, it, converged, grad_norm, tuple(history)


def solve_rpf(network: Network, u: np.ndarray, cfg: SolverConfig | None = None,
              v0: VoltageState | None = None, weights=None) -> RpfSolution:
    """Minimize the residual norm over the voltage variables for fixed u.

    Starts from v0 (default: flat). Never raises on a residual plateau: an
    infeasible u legitimately ends at rho > 0 with a vanishing gradient.
    Raises DegenerateVoltage if the accepted iterate sits on the magnitude
    floor, and returns converged=False when the iteration budget runs out.
    """
    cfg = cfg or SolverConfig()
    layout = ControlLayout.for_network(network)
    N, B = network.n_bus, network.n_branch
    x0 = (v0 or flat_state(network)).to_vector()

    def res(x):
        return assemble_residual(network, VoltageState.from_vector(x, N), u, layout)

    def jac(x):
        return residual_jacobian(network, VoltageState.from_vector(x, N), u, "voltage", layout)

    x, r, rho, it, converged, gnorm, hist = _lm_minimize(
        res, jac, x0, (N, N + B), cfg, weights
    )
    if np.any(x[:N] <= VOLTAGE_FLOOR):
        raise DegenerateVoltage("solution collapsed onto the voltage magnitude floor")
    return RpfSolution(
        v_star=VoltageState.from_vector(x, N),
        rho=rho,
        residual=r,
        iterations=it,
        converged=converged,
        grad_norm=gnorm,
        rho_history=hist,
    )


def solve_feasible(network: Network, u0: np.ndarray, slack: SlackSpec,
                   cfg: SolverConfig | None = None, v0: VoltageState | None = None,
                   weights=None) -> FeasibleSolution:
    """Joint solve over (voltage variables, scalar slack adjustment).

    The slack scalar shifts generator setpoints along slack.direction, which
    enters the least-squares problem as one extra Jacobian column. Raises
    NotConverged when the iteration budget runs out and InfeasibleRegion when
    the solve stalls at rho above feas_tol with a vanishing gradient.
    """
    cfg = cfg or SolverConfig()
    layout = ControlLayout.for_network(network)
    N, B = network.n_bus, network.n_branch
    d = slack.direction(layout)
    x0 = np.concatenate([(v0 or flat_state(network)).to_vector(), [0.0]])

    def res(x):
        v = VoltageState.from_vector(x[:-1], N)
        return assemble_residual(network, v, u0 + x[-1] * d, layout)

    def jac(x):
        v = VoltageState.from_vector(x[:-1], N)
        u = u0 + x[-1] * d
        Jv = residual_jacobian(network, v, u, "voltage", layout)
        Ju = residual_jacobian(network, v, u, np.arange(layout.size), layout)
        return np.hstack([Jv, (Ju @ d)[:, None]])

    x, r, rho, it, converged, gnorm, _ = _lm_minimize(
        res, jac, x0, (N, N + B), cfg, weights
    )
    v_star = VoltageState.from_vector(x[:-1], N)
    s = float(x[-1])
    sol = FeasibleSolution(
        v_star=v_star,
        u_adjusted=u0 + s * d,
        slack_value=s,
        rho=rho,
        iterations=it,
        feasible=rho <= cfg.feas_tol,
    )
    if not converged:
        raise NotConverged(
            f"no stationary point within {cfg.max_iter} iterations (rho={rho:.3e})",
            best=sol,
        )
    if not sol.feasible:
        raise InfeasibleRegion(
            f"solve stalled at rho={rho:.3e} with gradient {gnorm:.3e}; "
            "no operating point in this basin",
            best=sol,
        )
    return sol
