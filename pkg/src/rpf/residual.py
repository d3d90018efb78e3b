"""Residual formulation of the network equations.

State: per-bus voltage magnitudes plus per-branch angle differences (the
angle across each branch, positive from -> to). Residual vector, length
2|N| + |C|: real parts of the bus current sums, then imaginary parts, then
one scaled angle sum per independent cycle. A state/control pair is a
physical operating point exactly when the residual vanishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import injectors
from .errors import AngleInconsistency, ValidationError
from .network import Network, spanning_tree

ANGLE_LIMIT = math.pi / 2.0


@dataclass
class VoltageState:
    magnitudes: np.ndarray  # (n_bus,)
    branch_angles: np.ndarray  # (n_branch,)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.magnitudes, self.branch_angles])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_bus: int) -> "VoltageState":
        vec = np.asarray(vec, dtype=float)
        return cls(magnitudes=vec[:n_bus].copy(), branch_angles=vec[n_bus:].copy())

    @property
    def in_domain(self) -> bool:
        """True when magnitudes are above the floor and branch angles lie in
        the open interval (-pi/2, pi/2)."""
        return bool(
            np.all(self.magnitudes > injectors.VOLTAGE_FLOOR)
            and np.all(np.abs(self.branch_angles) < ANGLE_LIMIT)
        )

    def copy(self) -> "VoltageState":
        return VoltageState(self.magnitudes.copy(), self.branch_angles.copy())


def flat_state(network: Network) -> VoltageState:
    """Unit magnitudes, zero branch angles."""
    return VoltageState(np.ones(network.n_bus), np.zeros(network.n_branch))


def n_variables(network: Network) -> int:
    return network.n_bus + network.n_branch


def n_residuals(network: Network) -> int:
    return 2 * network.n_bus + network.n_cycle


# ---------------------------------------------------------------------------
# control vector layout


@dataclass(frozen=True)
class ControlLayout:
    """Flat ordering of the control vector u: loads first (sorted by bus),
    interleaved (p, q); then generators (sorted by bus), interleaved
    (p_m, v_ref)."""

    load_p: np.ndarray
    load_q: np.ndarray
    gen_p_m: np.ndarray
    gen_v_ref: np.ndarray
    labels: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.labels)

    @classmethod
    def for_network(cls, network: Network) -> "ControlLayout":
        labels = []
        load_p, load_q, gen_pm, gen_vref = [], [], [], []
        for l in network.loads:
            load_p.append(len(labels))
            labels.append(f"p_load_{network.buses[l.bus].name}")
            load_q.append(len(labels))
            labels.append(f"q_load_{network.buses[l.bus].name}")
        for g in network.generators:
            gen_pm.append(len(labels))
            labels.append(f"p_m_{network.buses[g.bus].name}")
            gen_vref.append(len(labels))
            labels.append(f"v_ref_{network.buses[g.bus].name}")
        return cls(
            load_p=np.array(load_p, dtype=int),
            load_q=np.array(load_q, dtype=int),
            gen_p_m=np.array(gen_pm, dtype=int),
            gen_v_ref=np.array(gen_vref, dtype=int),
            labels=tuple(labels),
        )


def default_controls(network: Network) -> np.ndarray:
    """Control vector holding the case-file setpoints."""
    lay = ControlLayout.for_network(network)
    u = np.zeros(lay.size)
    for i, l in enumerate(network.loads):
        u[lay.load_p[i]] = l.p
        u[lay.load_q[i]] = l.q
    for i, g in enumerate(network.generators):
        u[lay.gen_p_m[i]] = g.p_m
        u[lay.gen_v_ref[i]] = g.v_ref
    return u


@dataclass(frozen=True)
class SlackSpec:
    """How a scalar power adjustment is spread over generator setpoints:
    factors[i] scales the adjustment applied to generator i's p_m. Factors
    are non-negative and sum to one."""

    factors: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.factors, dtype=float)
        if np.any(f < 0) or not math.isclose(f.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValidationError("slack factors must be non-negative and sum to 1")
        object.__setattr__(self, "factors", f)

    @classmethod
    def single(cls, gen_index: int, n_gen: int) -> "SlackSpec":
        f = np.zeros(n_gen)
        f[gen_index] = 1.0
        return cls(f)

    @classmethod
    def distributed(cls, factors) -> "SlackSpec":
        return cls(np.asarray(factors, dtype=float))

    def direction(self, layout: ControlLayout) -> np.ndarray:
        """Unit adjustment expressed in control space."""
        d = np.zeros(layout.size)
        d[layout.gen_p_m] = self.factors
        return d


# ---------------------------------------------------------------------------
# residual assembly


def _load_controls(network, layout, u):
    for i, l in enumerate(network.loads):
        yield l.bus, injectors.LoadControl(p=u[layout.load_p[i]], q=u[layout.load_q[i]])


def _gen_controls(network, layout, u):
    for i, g in enumerate(network.generators):
        ctrl = injectors.GeneratorControl(p_m=u[layout.gen_p_m[i]], v_ref=u[layout.gen_v_ref[i]])
        yield g.bus, ctrl, injectors.GeneratorParams(k_v=g.k_v, p_rated=g.p_rated)


def bus_current_sums(network: Network, v: VoltageState, u: np.ndarray,
                     layout: ControlLayout | None = None) -> np.ndarray:
    """Complex current sum per bus (all injectors plus branch terminals), in
    each bus's local frame."""
    layout = layout or ControlLayout.for_network(network)
    V = v.magnitudes
    phi = v.branch_angles
    c = np.zeros(network.n_bus, dtype=complex)
    for bus, ctrl in _load_controls(network, layout, u):
        c[bus] += injectors.load_current(ctrl, V[bus])
    for bus, ctrl, params in _gen_controls(network, layout, u):
        c[bus] += injectors.generator_current(ctrl, params, V[bus])
    for s in network.shunts:
        c[s.bus] += -complex(s.g, s.b) * V[s.bus]
    for br in network.branches:
        i_f, i_t = injectors.branch_terminal_currents(
            br, V[br.from_bus], V[br.to_bus], phi[br.index]
        )
        c[br.from_bus] += i_f
        c[br.to_bus] += i_t
    return c


def cycle_sums(network: Network, branch_angles: np.ndarray) -> np.ndarray:
    """Raw oriented angle sum per cycle (unscaled)."""
    out = np.zeros(network.n_cycle)
    for cyc in network.cycles:
        out[cyc.index] = sum(
            s * branch_angles[k] for k, s in zip(cyc.branches, cyc.signs)
        )
    return out


def assemble_residual(network: Network, v: VoltageState, u: np.ndarray,
                      layout: ControlLayout | None = None) -> np.ndarray:
    """Residual vector [Re(c_1..c_N), Im(c_1..c_N), d_1..d_C]."""
    c = bus_current_sums(network, v, u, layout)
    d = cycle_sums(network, v.branch_angles)
    for cyc in network.cycles:
        d[cyc.index] *= cyc.y_scale
    return np.concatenate([c.real, c.imag, d])


def residual_labels(network: Network) -> list[str]:
    names = [b.name for b in network.buses]
    return (
        [f"re_kcl_{n}" for n in names]
        + [f"im_kcl_{n}" for n in names]
        + [f"kvl_cycle{c.index}" for c in network.cycles]
    )


def check_weights(weights, m: int) -> np.ndarray:
    """Validate a diagonal weight vector (only diagonal weights exist)."""
    if weights is None:
        return np.ones(m)
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.shape[0] != m:
        raise ValidationError(f"weights must be a 1-d vector of length {m}")
    if np.any(w <= 0):
        raise ValidationError("weights must be strictly positive")
    return w


def residual_norm(r: np.ndarray, weights=None) -> float:
    """Scalar residual size: rho = 1/2 sum_i w_i r_i^2."""
    r = np.asarray(r, dtype=float)
    w = check_weights(weights, r.shape[0])
    return 0.5 * float(np.dot(r, w * r))


# ---------------------------------------------------------------------------
# jacobians (dense)


def residual_jacobian(network: Network, v: VoltageState, u: np.ndarray,
                      wrt: str | np.ndarray = "voltage",
                      layout: ControlLayout | None = None) -> np.ndarray:
    """Jacobian of the residual vector.

    wrt="voltage": derivatives wrt [magnitudes, branch_angles],
    shape (2N+C, N+B). wrt=<index array>: derivatives wrt those control
    entries, shape (2N+C, len(indices)).
    """
    layout = layout or ControlLayout.for_network(network)
    N, B, C = network.n_bus, network.n_branch, network.n_cycle
    V = v.magnitudes
    phi = v.branch_angles

    if isinstance(wrt, str):
        if wrt != "voltage":
            raise ValidationError(f"unknown wrt {wrt!r}")
        dC = np.zeros((N, N + B), dtype=complex)
        for bus, ctrl in _load_controls(network, layout, u):
            dC[bus, bus] += injectors.load_partials(ctrl, V[bus])["v"]
        for bus, ctrl, params in _gen_controls(network, layout, u):
            dC[bus, bus] += injectors.generator_partials(ctrl, params, V[bus])["v"]
        for s in network.shunts:
            dC[s.bus, s.bus] += -complex(s.g, s.b)
        for br in network.branches:
            p = injectors.branch_partials(br, V[br.from_bus], V[br.to_bus], phi[br.index])
            f, t, k = br.from_bus, br.to_bus, br.index
            dC[f, f] += p["f_vf"]
            dC[f, t] += p["f_vt"]
            dC[f, N + k] += p["f_phi"]
            dC[t, f] += p["t_vf"]
            dC[t, t] += p["t_vt"]
            dC[t, N + k] += p["t_phi"]
        K = np.zeros((C, N + B))
        for cyc in network.cycles:
            for k, s in zip(cyc.branches, cyc.signs):
                K[cyc.index, N + k] += cyc.y_scale * s
        return np.vstack([dC.real, dC.imag, K])

    sel = np.asarray(wrt, dtype=int)
    dCu = np.zeros((N, layout.size), dtype=complex)
    for i, (bus, ctrl) in enumerate(_load_controls(network, layout, u)):
        p = injectors.load_partials(ctrl, V[bus])
        dCu[bus, layout.load_p[i]] += p["p"]
        dCu[bus, layout.load_q[i]] += p["q"]
    for i, (bus, ctrl, params) in enumerate(_gen_controls(network, layout, u)):
        p = injectors.generator_partials(ctrl, params, V[bus])
        dCu[bus, layout.gen_p_m[i]] += p["p_m"]
        dCu[bus, layout.gen_v_ref[i]] += p["v_ref"]
    full = np.vstack([dCu.real, dCu.imag, np.zeros((C, layout.size))])
    return full[:, sel]


# ---------------------------------------------------------------------------
# independent nodal-balance oracle


def reconstruct_bus_angles(network: Network, branch_angles: np.ndarray,
                           kvl_tol: float = 1e-9) -> np.ndarray:
    """Absolute bus angles from branch angles, integrated along the BFS
    spanning tree with the root at zero. Requires every cycle's raw angle
    sum to be below kvl_tol, otherwise the angles are path-dependent and
    AngleInconsistency is raised."""
    sums = cycle_sums(network, branch_angles)
    if network.n_cycle and np.max(np.abs(sums)) > kvl_tol:
        raise AngleInconsistency(
            f"cycle angle sums up to {np.max(np.abs(sums)):.3e} exceed {kvl_tol:.1e}"
        )
    parent_bus, parent_branch, order = spanning_tree(network.n_bus, network.branches)
    theta = np.zeros(network.n_bus)
    for b in order[1:]:
        k = parent_branch[b]
        br = network.branches[k]
        if br.to_bus == b:  # walked from -> to: angle adds
            theta[b] = theta[parent_bus[b]] + branch_angles[k]
        else:
            theta[b] = theta[parent_bus[b]] - branch_angles[k]
    return theta


def ybus_matrix(network: Network) -> np.ndarray:
    """Complex bus admittance matrix (branch blocks plus bus shunts)."""
    N = network.n_bus
    Y = np.zeros((N, N), dtype=complex)
    for br in network.branches:
        f, t = br.from_bus, br.to_bus
        Y[f, f] += br.y_ff
        Y[f, t] += br.y_ft
        Y[t, f] += br.y_tf
        Y[t, t] += br.y_tt
    for s in network.shunts:
        Y[s.bus, s.bus] += complex(s.g, s.b)
    return Y


def ybus_oracle_mismatch(network: Network, v: VoltageState, u: np.ndarray,
                         layout: ControlLayout | None = None,
                         kvl_tol: float = 1e-9) -> np.ndarray:
    """Nodal current mismatch computed through an independent path: absolute
    bus angles from the spanning tree, complex phasors, and the assembled
    admittance matrix. Returns the per-bus complex mismatch rotated into the
    local frames; it equals the KCL residuals when both are correct."""
    layout = layout or ControlLayout.for_network(network)
    theta = reconstruct_bus_angles(network, v.branch_angles, kvl_tol=kvl_tol)
    rot = np.exp(1j * theta)
    vc = v.magnitudes * rot
    drawn = ybus_matrix(network) @ vc  # current drawn into the network per bus

    inj = np.zeros(network.n_bus, dtype=complex)
    for bus, ctrl in _load_controls(network, layout, u):
        inj[bus] += injectors.load_current(ctrl, v.magnitudes[bus])
    for bus, ctrl, params in _gen_controls(network, layout, u):
        inj[bus] += injectors.generator_current(ctrl, params, v.magnitudes[bus])
    return inj - drawn * np.conj(rot)


# ---------------------------------------------------------------------------
# csv helpers


def residual_rows(network: Network, r: np.ndarray) -> list[tuple[str, float]]:
    """(label, value) rows for serialization."""
    return list(zip(residual_labels(network), map(float, r)))


def state_rows(network: Network, v: VoltageState) -> list[tuple[str, float]]:
    rows = [(f"v_{b.name}", float(v.magnitudes[b.index])) for b in network.buses]
    rows += [
        (f"phi_{network.buses[br.from_bus].name}_{network.buses[br.to_bus].name}",
         float(v.branch_angles[br.index]))
        for br in network.branches
    ]
    return rows
