"""Predict-then-optimize: tasks that adjust controls using a fast surrogate
of the voltage solution.

A Predictor maps controls to a voltage state and exposes the infeasibility
measure rho with its exact control-gradient. NeuralPredictor wraps a trained
model; ExactPredictor wraps the iterative solver (at a minimizer over v the
total derivative of rho wrt u reduces to the direct partial, so its gradient
is cheap). Tasks: single-scalar feasibility restoration (slack direction or
frequency droop) and a box-constrained quadratic-cost dispatch with penalized
infeasibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import (
    InfeasibleStart,
    NonDescent,
    NotConverged,
    RpfError,
    ValidationError,
)
from .injectors import branch_partials, branch_terminal_currents
from .network import Network
from .neural import NeuralSolver, input_jacobian, predict, predict_residual_and_grad
from .residual import (
    ControlLayout,
    SlackSpec,
    VoltageState,
    assemble_residual,
    residual_jacobian,
    residual_norm,
)
from .solver import SolverConfig, solve_rpf


class Predictor(Protocol):
    def predict(self, u: np.ndarray) -> VoltageState: ...

    def rho_and_grad(self, u: np.ndarray, indices) -> tuple[float, np.ndarray, VoltageState]: ...

    def output_jacobian(self, u: np.ndarray, indices) -> np.ndarray: ...


class NeuralPredictor:
    def __init__(self, solver: NeuralSolver, network: Network, weights=None):
        self.solver = solver
        self.network = network
        self.weights = weights

    def predict(self, u: np.ndarray) -> VoltageState:
        return predict(self.solver, u)

    def rho_and_grad(self, u, indices):
        rho, grad, v = predict_residual_and_grad(
            self.solver, self.network, u, indices, self.weights,
            return_state=True)
        return rho, grad, v

    def output_jacobian(self, u, indices):
        return input_jacobian(self.solver, u)[:, np.asarray(indices, dtype=int)]


class ExactPredictor:
    """Drop-in replacement that solves the voltage problem iteratively. Used
    to separate task-level from approximation-level error."""

    def __init__(self, network: Network, cfg: SolverConfig | None = None,
                 weights=None, warm_start: bool = True):
        self.network = network
        self.cfg = cfg or SolverConfig()
        self.weights = weights
        self.warm_start = warm_start
        self._last_v: VoltageState | None = None

    def _solve(self, u):
        v0 = self._last_v if self.warm_start else None
        sol = solve_rpf(self.network, u, v0=v0, cfg=self.cfg, weights=self.weights)
        if self.warm_start:
            self._last_v = sol.v_star
        return sol

    def predict(self, u: np.ndarray) -> VoltageState:
        return self._solve(u).v_star

    def rho_and_grad(self, u, indices):
        # at the inner minimum the v-gradient vanishes, so only the direct
        # control partial survives
        sol = self._solve(u)
        r = sol.residual
        w = (np.ones(r.shape[0]) if self.weights is None
             else np.asarray(self.weights, dtype=float))
        Ju = residual_jacobian(self.network, sol.v_star, u,
                               np.asarray(indices, dtype=int))
        return sol.rho, Ju.T @ (w * r), sol.v_star

    def output_jacobian(self, u, indices):
        # implicit differentiation of the stationarity condition with the
        # Gauss-Newton curvature (exact in the feasible limit)
        sol = self._solve(u)
        r = sol.residual
        w = (np.ones(r.shape[0]) if self.weights is None
             else np.asarray(self.weights, dtype=float))
        Jv = residual_jacobian(self.network, sol.v_star, u, "voltage")
        Ju = residual_jacobian(self.network, sol.v_star, u,
                               np.asarray(indices, dtype=int))
        H = Jv.T @ (w[:, None] * Jv)
        H[np.diag_indices_from(H)] += 1e-12
        return -np.linalg.solve(H, Jv.T @ (w[:, None] * Ju))


def as_predictor(solver_or_predictor, network: Network) -> Predictor:
    if isinstance(solver_or_predictor, NeuralSolver):
        return NeuralPredictor(solver_or_predictor, network)
    return solver_or_predictor


# ---------------------------------------------------------------------------
# task configuration types


@dataclass(frozen=True)
class ControlPartition:
    """Split of the control entries into decision and fixed sets."""

    decision: tuple[int, ...]
    n_controls: int

    def __post_init__(self):
        dec = tuple(int(i) for i in self.decision)
        if len(set(dec)) != len(dec):
            raise ValidationError("duplicate decision indices")
        if dec and (min(dec) < 0 or max(dec) >= self.n_controls):
            raise ValidationError("decision index out of range")
        object.__setattr__(self, "decision", dec)

    @property
    def fixed(self) -> tuple[int, ...]:
        dec = set(self.decision)
        return tuple(i for i in range(self.n_controls) if i not in dec)


@dataclass(frozen=True)
class DroopConfig:
    p_rated: tuple[float, ...]
    r: float = 0.04
    omega0: float = 1.0

    def __post_init__(self):
        if self.r <= 0 or self.omega0 <= 0:
            raise ValidationError("droop needs r > 0 and omega0 > 0")
        if any(p <= 0 for p in self.p_rated):
            raise ValidationError("rated powers must be positive")

    @classmethod
    def for_network(cls, network: Network, r: float = 0.04,
                    omega0: float = 1.0) -> "DroopConfig":
        return cls(tuple(g.p_rated for g in network.generators), r, omega0)

    def deltas(self, omega: float) -> np.ndarray:
        """Per-generator active-power adjustment at frequency omega."""
        return np.array(
            [-(1.0 / self.r) * ((omega - self.omega0) / self.omega0) * p
             for p in self.p_rated])

    def slope(self) -> np.ndarray:
        """d(delta)/d(omega) per generator."""
        return np.array([-p / (self.r * self.omega0) for p in self.p_rated])


@dataclass
class PoResult:
    u_solution: np.ndarray
    v_hat: VoltageState
    rho_hat: float
    objective: float
    violations: dict
    iterations: int
    method: str
    aux: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# one-dimensional engine


def _minimize_scalar(f_df, s0: float, step0: float = 0.05,
                     bound: float = 1e3, gtol: float = 1e-12,
                     xtol: float = 1e-13, max_iter: int = 200,
                     max_expand: int = 70):
    """Minimize a smooth scalar function given values and derivatives.

    Expands a derivative sign-change bracket from s0 and closes it with
    secant steps on the derivative, falling back to bisection whenever the
    secant step is not strictly inside. Returns the best evaluated point.
    """
    history: list[tuple[float, float, float]] = []

    def ev(s):
        f, g = f_df(s)
        history.append((s, f, g))
        return f, g

    def best():
        s, f, g = min(history, key=lambda t: t[1])
        return s, f, g

    f0, g0 = ev(s0)
    if abs(g0) <= gtol:
        return {"s": s0, "f": f0, "df": g0, "history": history,
                "converged": True, "iterations": 1, "status": "stationary"}

    # expansion, walking downhill
    h = -np.sign(g0) * abs(step0)
    lo_s, lo_g = s0, g0
    hi = None
    s_cur, g_cur = s0, g0
    for _ in range(max_expand):
        s_next = float(np.clip(s_cur + h, s0 - bound, s0 + bound))
        f_n, g_n = ev(s_next)
        if np.sign(g_n) != np.sign(g0) or g_n == 0.0:
            hi = (s_next, g_n)
            lo_s, lo_g = s_cur, g_cur
            break
        s_cur, g_cur = s_next, g_n
        if s_next in (s0 - bound, s0 + bound):
            bs, bf, bg = best()
            return {"s": bs, "f": bf, "df": bg, "history": history,
                    "converged": False, "iterations": len(history),
                    "status": "bound"}
        h *= 2.0
    if hi is None:
        bs, bf, bg = best()
        if bf >= f0 - 1e-15:
            raise NonDescent("no descent found from the start point", history)
        return {"s": bs, "f": bf, "df": bg, "history": history,
                "converged": False, "iterations": len(history),
                "status": "no_bracket"}

    a, ga = lo_s, lo_g
    b, gb = hi
    side = 0  # Illinois bookkeeping
    converged = False
    status = "max_iter"
    for _ in range(max_iter):
        if abs(b - a) <= xtol * max(1.0, abs(a), abs(b)):
            converged = True
            status = "xtol"
            break
        denom = gb - ga
        if denom == 0.0:
            c = 0.5 * (a + b)
        else:
            c = b - gb * (b - a) / denom
            if not (min(a, b) < c < max(a, b)) or \
                    abs(c - a) < 1e-16 or abs(c - b) < 1e-16:
                c = 0.5 * (a + b)
        fc, gc = ev(c)
        if abs(gc) <= gtol:
            converged = True
            status = "gtol"
            a, ga = c, gc
            break
        if np.sign(gc) == np.sign(ga):
            a, ga = c, gc
            if side == -1:
                gb *= 0.5
            side = -1
        else:
            b, gb = c, gc
            if side == 1:
                ga *= 0.5
            side = 1
    bs, bf, bg = best()
    return {"s": bs, "f": bf, "df": bg, "history": history,
            "converged": converged, "iterations": len(history),
            "status": status}


# ---------------------------------------------------------------------------
# feasibility restoration over a slack direction


def solve_po_pf(solver_or_predictor, network: Network, u0: np.ndarray,
                slack: SlackSpec | None = None,
                layout: ControlLayout | None = None,
                step0: float = 0.05, gtol: float = 1e-12,
                max_iter: int = 200) -> PoResult:
    """Scalar feasibility restoration: moves the controls along the slack
    direction until the predicted infeasibility is minimal."""
    pred = as_predictor(solver_or_predictor, network)
    layout = layout or ControlLayout.for_network(network)
    slack = slack or SlackSpec.single(0, len(network.generators))
    direction = slack.direction(layout)
    idx = np.array(layout.gen_p_m, dtype=int)
    factors = np.asarray(slack.factors, dtype=float)

    def f_df(s):
        u = np.array(u0, dtype=float)
        u[idx] += s * factors
        rho, grad, _ = pred.rho_and_grad(u, idx)
        return rho, float(factors @ grad)

    res = _minimize_scalar(f_df, 0.0, step0=step0, gtol=gtol,
                           max_iter=max_iter)
    if not res["converged"]:
        raise NotConverged(
            f"slack search stopped with status {res['status']!r}", res)
    s_star = res["s"]
    u_sol = np.array(u0, dtype=float)
    u_sol[idx] += s_star * factors
    v_hat = pred.predict(u_sol)
    rho_hat = residual_norm(assemble_residual(network, v_hat, u_sol))
    return PoResult(
        u_solution=u_sol, v_hat=v_hat, rho_hat=rho_hat, objective=rho_hat,
        violations={}, iterations=res["iterations"], method="po_pf",
        aux={"slack_value": s_star, "direction": direction,
             "history": res["history"]},
    )


def solve_po_qss(solver_or_predictor, network: Network, u0: np.ndarray,
                 droop: DroopConfig | None = None,
                 layout: ControlLayout | None = None,
                 step0: float = 0.002, gtol: float = 1e-12,
                 max_iter: int = 200) -> PoResult:
    """Steady-state frequency deviation: every generator responds to the
    frequency through its droop, and the frequency settles where the
    predicted infeasibility is minimal."""
    pred = as_predictor(solver_or_predictor, network)
    layout = layout or ControlLayout.for_network(network)
    droop = droop or DroopConfig.for_network(network)
    if len(droop.p_rated) != len(network.generators):
        raise ValidationError("droop entries must match the generators")
    idx = np.array(layout.gen_p_m, dtype=int)
    slope = droop.slope()

    def apply(omega):
        u = np.array(u0, dtype=float)
        u[idx] += droop.deltas(omega)
        return u

    def f_df(omega):
        u = apply(omega)
        rho, grad, _ = pred.rho_and_grad(u, idx)
        return rho, float(slope @ grad)

    res = _minimize_scalar(f_df, droop.omega0, step0=step0, gtol=gtol,
                           max_iter=max_iter)
    if not res["converged"]:
        raise NotConverged(
            f"frequency search stopped with status {res['status']!r}", res)
    omega = res["s"]
    u_sol = apply(omega)
    v_hat = pred.predict(u_sol)
    rho_hat = residual_norm(assemble_residual(network, v_hat, u_sol))
    return PoResult(
        u_solution=u_sol, v_hat=v_hat, rho_hat=rho_hat, objective=rho_hat,
        violations={}, iterations=res["iterations"], method="po_qss",
        aux={"omega": omega, "omega0": droop.omega0,
             "deviation": omega - droop.omega0, "history": res["history"]},
    )


# ---------------------------------------------------------------------------
# dispatch with quadratic cost


@dataclass
class OpfSpec:
    q_matrix: np.ndarray  # (m, m)
    q_linear: np.ndarray  # (m,)
    cost_const: float
    lam: float
    u_min: np.ndarray
    u_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    phi_max: np.ndarray
    i_max: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.q_matrix, dtype=float)
        if not np.allclose(Q, Q.T):
            raise ValidationError("cost matrix must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValidationError("cost matrix must be positive semidefinite")
        if self.lam <= 0:
            raise ValidationError("lam must be positive")

    @classmethod
    def for_network(cls, network: Network, layout: ControlLayout | None = None,
                    lam: float = 1e3) -> "OpfSpec":
        layout = layout or ControlLayout.for_network(network)
        m = layout.size
        Q = np.zeros((m, m))
        q = np.zeros(m)
        const = 0.0
        base = network.base_mva
        u_min = np.zeros(m)
        u_max = np.full(m, np.inf)
        for g, gen in enumerate(network.generators):
            k = layout.gen_p_m[g]
            if gen.cost is not None:
                c2, c1, c0 = gen.cost
                Q[k, k] = c2 * base * base
                q[k] = c1 * base
                const += c0
            u_max[k] = gen.p_rated
            kr = layout.gen_v_ref[g]
            u_min[kr], u_max[kr] = 0.9, 1.1
        v_min = np.array([b.v_min for b in network.buses])
        v_max = np.array([b.v_max for b in network.buses])
        phi_max = np.full(network.n_branch, np.pi / 2)
        i_max = np.array([br.rate if br.rate > 0 else np.inf
                          for br in network.branches])
        return cls(Q, q, const, lam, u_min, u_max, v_min, v_max, phi_max, i_max)

    def cost(self, u: np.ndarray) -> float:
        return float(u @ self.q_matrix @ u + self.q_linear @ u + self.cost_const)

    def cost_grad(self, u: np.ndarray) -> np.ndarray:
        return 2.0 * (self.q_matrix @ u) + self.q_linear


def constraint_values(network: Network, spec: OpfSpec,
                      v: VoltageState) -> tuple[np.ndarray, list[str]]:
    """Stacked operational constraints g(v) with g <= 0 satisfied:
    magnitude bounds, branch-angle bounds, terminal-current limits."""
    V, phi = v.magnitudes, v.branch_angles
    vals = []
    labels = []
    for n in range(network.n_bus):
        vals += [V[n] - spec.v_max[n], spec.v_min[n] - V[n]]
        labels += [f"v_max_bus{n + 1}", f"v_min_bus{n + 1}"]
    for br in network.branches:
        vals.append(abs(phi[br.index]) - spec.phi_max[br.index])
        labels.append(f"phi_max_br{br.index + 1}")
    for br in network.branches:
        i_f, i_t = branch_terminal_currents(br, V[br.from_bus], V[br.to_bus],
                                            phi[br.index])
        lim = spec.i_max[br.index]
        vals += [abs(i_f) - lim, abs(i_t) - lim]
        labels += [f"i_from_br{br.index + 1}", f"i_to_br{br.index + 1}"]
    return np.array(vals), labels


def constraint_jacobian(network: Network, spec: OpfSpec,
                        v: VoltageState) -> np.ndarray:
    """d(constraint)/d(state vector), rows matching constraint_values."""
    N, B = network.n_bus, network.n_branch
    V, phi = v.magnitudes, v.branch_angles
    rows = []
    for n in range(N):
        up = np.zeros(N + B); up[n] = 1.0
        rows.append(up)
        rows.append(-up)
    for br in network.branches:
        row = np.zeros(N + B)
        row[N + br.index] = np.sign(phi[br.index]) if phi[br.index] != 0 else 0.0
        rows.append(row)
    for br in network.branches:
        f, t, k = br.from_bus, br.to_bus, br.index
        i_f, i_t = branch_terminal_currents(br, V[f], V[t], phi[k])
        parts = branch_partials(br, V[f], V[t], phi[k])
        for tag, i_val in (("f", i_f), ("t", i_t)):
            row = np.zeros(N + B)
            mag = abs(i_val)
            if mag > 1e-12:
                u_conj = np.conj(i_val) / mag
                row[f] = (u_conj * parts[f"{tag}_vf"]).real
                row[t] = (u_conj * parts[f"{tag}_vt"]).real
                row[N + k] = (u_conj * parts[f"{tag}_phi"]).real
            rows.append(row)
    return np.array(rows)


def solve_po_opf(solver_or_predictor, network: Network, spec: OpfSpec,
                 partition: ControlPartition, u0: np.ndarray,
                 penalty0: float = 1e2, penalty_factor: float = 10.0,
                 penalty_rounds: int = 5, max_iter: int = 200,
                 step_tol: float = 1e-10, layout: ControlLayout | None = None
                 ) -> PoResult:
    """Quadratic-cost dispatch over the decision entries with penalized
    predicted infeasibility and exterior quadratic penalties on operational
    constraints; projected gradient descent with backtracking."""
    pred = as_predictor(solver_or_predictor, network)
    layout = layout or ControlLayout.for_network(network)
    dec = np.array(partition.decision, dtype=int)
    if dec.size == 0:
        raise ValidationError("empty decision set")
    lo, hi = spec.u_min[dec], spec.u_max[dec]
    u = np.array(u0, dtype=float)
    if np.any(u[dec] < lo - 1e-12) or np.any(u[dec] > hi + 1e-12):
        raise InfeasibleStart("start point violates the control bounds")

    def project(x):
        return np.clip(x, lo, hi)

    def evaluate(u_full, mu):
        rho, grho, v_hat = pred.rho_and_grad(u_full, dec)
        g, labels = constraint_values(network, spec, v_hat)
        act = np.maximum(g, 0.0)
        obj = spec.cost(u_full) + spec.lam * rho + mu * float(act @ act)
        grad = spec.cost_grad(u_full)[dec] + spec.lam * grho
        if act.any():
            Jg = constraint_jacobian(network, spec, v_hat)
            dv_du = pred.output_jacobian(u_full, dec)
            grad = grad + mu * 2.0 * ((act @ Jg) @ dv_du)
        return obj, grad, rho, v_hat, g, labels

    mu = penalty0
    total_iters = 0
    t = 1e-2
    obj_curve = []
    for _ in range(penalty_rounds):
        obj, grad, rho, v_hat, g, labels = evaluate(u, mu)
        for _ in range(max_iter):
            total_iters += 1
            obj_curve.append(obj)
            # projected gradient step with backtracking
            accepted = False
            tk = t
            for _ in range(60):
                u_new = np.array(u)
                u_new[dec] = project(u[dec] - tk * grad)
                step = u_new[dec] - u[dec]
                if np.linalg.norm(step, np.inf) <= step_tol:
                    break
                obj_new, grad_new, rho_new, v_new, g_new, _ = evaluate(u_new, mu)
                if obj_new <= obj - 1e-4 / max(tk, 1e-16) * float(step @ step):
                    accepted = True
                    break
                tk *= 0.5
            if not accepted:
                break
            tiny = obj - obj_new <= 1e-14 * max(1.0, abs(obj))
            u, obj, grad, rho, v_hat, g = (u_new, obj_new, grad_new, rho_new,
                                           v_new, g_new)
            if tiny:
                break
            t = tk * 1.5
        mu *= penalty_factor
    mu_final = mu / penalty_factor
    rho_hat = residual_norm(assemble_residual(network, v_hat, u))
    g, labels = constraint_values(network, spec, v_hat)
    viol = {lab: float(max(val, 0.0)) for lab, val in zip(labels, g)
            if val > 0.0}
    return PoResult(
        u_solution=u, v_hat=v_hat, rho_hat=rho_hat,
        objective=spec.cost(u) + spec.lam * rho_hat,
        violations=viol, iterations=total_iters, method="po_opf",
        aux={"cost": spec.cost(u), "penalty_final": mu_final,
             "objective_curve": obj_curve,
             "max_violation": float(max([v for v in viol.values()], default=0.0))},
    )


# ---------------------------------------------------------------------------
# exhaustive low-dimensional oracle


def grid_search_oracle(network: Network, spec: OpfSpec,
                       partition: ControlPartition, u0: np.ndarray,
                       ranges, n_points: int = 50,
                       predictor: Predictor | None = None,
                       solver_cfg: SolverConfig | None = None,
                       penalty: float = 1e6) -> dict:
    """Dense evaluation of the dispatch objective over a 1-D or 2-D decision
    grid with the iterative solver as ground truth. Failed solves are
    recorded as missing values."""
    dec = np.array(partition.decision, dtype=int)
    if dec.size not in (1, 2):
        raise ValidationError("grid oracle supports 1 or 2 decision entries")
    axes = [np.linspace(lo, hi, n_points) for lo, hi in ranges]
    if len(axes) != dec.size:
        raise ValidationError("one range per decision entry")
    cfg = solver_cfg or SolverConfig()
    grids = np.meshgrid(*axes, indexing="ij")
    shape = grids[0].shape
    rows = []
    best = {"objective": np.inf, "point": None}
    for flat_idx in range(grids[0].size):
        ij = np.unravel_index(flat_idx, shape)
        u = np.array(u0, dtype=float)
        for d, g in zip(dec, grids):
            u[d] = g[ij]
        row = {"i": int(ij[0]), "j": int(ij[1]) if len(ij) > 1 else 0}
        for a, d in enumerate(dec):
            row[f"u{a + 1}"] = float(u[d])
        try:
            sol = solve_rpf(network, u, cfg=cfg)
            gvals, _ = constraint_values(network, spec, sol.v_star)
            act = np.maximum(gvals, 0.0)
            cost = spec.cost(u)
            obj = cost + spec.lam * sol.rho + penalty * float(act @ act)
            row.update(rho_exact=sol.rho, cost=cost,
                       max_violation=float(act.max()), objective=obj,
                       converged=bool(sol.converged))
            if predictor is not None:
                rho_hat, _, _ = predictor.rho_and_grad(u, dec)
                row["rho_hat"] = float(rho_hat)
            if obj < best["objective"]:
                best = {"objective": obj, "point": (row["i"], row["j"]),
                        "u": [float(u[d]) for d in dec]}
        except (RpfError, np.linalg.LinAlgError):
            row.update(rho_exact=float("nan"), cost=float("nan"),
                       max_violation=float("nan"), objective=float("nan"),
                       converged=False)
            if predictor is not None:
                row["rho_hat"] = float("nan")
        rows.append(row)
    for row in rows:
        row["is_argmin"] = int((row["i"], row["j"]) == best["point"])
    return {"rows": rows, "axes": [ax.tolist() for ax in axes],
            "argmin": best, "penalty": penalty, "lam": spec.lam}
