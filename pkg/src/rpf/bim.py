"""Classical bus-type encoding (slack / PV / PQ) used as a baseline.

Re-expresses control -> voltage data in the conventional power-flow layout:
inputs are (P, Q) at PQ buses, (P, V) at PV buses and (theta_ref, V) at the
slack bus; targets are bus angles at non-slack buses and magnitudes at PQ
buses. After predicting, the quantities the encoding leaves free (P, Q at the
slack bus; Q at PV buses) are backed out from the predicted voltages, which
zeroes the corresponding balance entries by construction and hides their
error in the adjusted controls instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import ValidationError
from .injectors import generator_current, load_current
from .network import Network
from .neural import NeuralSolver, TrainConfig, TrainingReport, train_arrays
from .residual import (
    ControlLayout,
    VoltageState,
    assemble_residual,
    reconstruct_bus_angles,
    residual_labels,
    ybus_matrix,
)


@dataclass(frozen=True)
class BimEncoding:
    slack_bus: int
    pv_buses: tuple[int, ...]
    pq_buses: tuple[int, ...]
    input_labels: tuple[str, ...] = field(default=(), compare=False)
    target_labels: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def for_network(cls, network: Network, slack_gen: int = 0) -> "BimEncoding":
        if not network.generators:
            raise ValidationError("bus-type encoding needs at least one generator")
        if not 0 <= slack_gen < len(network.generators):
            raise ValidationError(f"no generator {slack_gen}")
        slack = network.generators[slack_gen].bus
        gen_buses = {g.bus for g in network.generators}
        pv = tuple(sorted(gen_buses - {slack}))
        pq = tuple(b for b in range(network.n_bus)
                   if b != slack and b not in gen_buses)
        inp = []
        for b in pq:
            inp += [f"p_bus{b + 1}", f"q_bus{b + 1}"]
        for b in pv:
            inp += [f"p_bus{b + 1}", f"v_bus{b + 1}"]
        inp += [f"theta_bus{slack + 1}", f"v_bus{slack + 1}"]
        tgt = [f"theta_bus{b + 1}" for b in sorted(pv + pq)]
        tgt += [f"v_bus{b + 1}" for b in pq]
        return cls(slack, pv, pq, tuple(inp), tuple(tgt))

    @property
    def non_slack(self) -> tuple[int, ...]:
        return tuple(sorted(self.pv_buses + self.pq_buses))

    @property
    def n_inputs(self) -> int:
        return 2 * len(self.pq_buses) + 2 * len(self.pv_buses) + 2

    @property
    def n_targets(self) -> int:
        return len(self.non_slack) + len(self.pq_buses)

    def to_meta(self) -> dict:
        return {"slack_bus": self.slack_bus,
                "pv_buses": list(self.pv_buses),
                "pq_buses": list(self.pq_buses)}

    @classmethod
    def from_meta(cls, meta: dict) -> "BimEncoding":
        return cls(int(meta["slack_bus"]), tuple(meta["pv_buses"]),
                   tuple(meta["pq_buses"]))


def _bus_injections(network: Network, u: np.ndarray,
                    layout: ControlLayout) -> tuple[np.ndarray, np.ndarray]:
    """Net P, Q setpoint injections per bus (loads negative, generation
    positive; generator Q left at zero since it is not a setpoint)."""
    p = np.zeros(network.n_bus)
    q = np.zeros(network.n_bus)
    for k, load in enumerate(network.loads):
        p[load.bus] -= u[layout.load_p[k]]
        q[load.bus] -= u[layout.load_q[k]]
    for g, gen in enumerate(network.generators):
        p[gen.bus] += u[layout.gen_p_m[g]]
    return p, q


def encode(enc: BimEncoding, network: Network, u: np.ndarray,
           v: VoltageState, layout: ControlLayout | None = None,
           kvl_tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """One record (u, v) -> (input, target) rows of the bus-type layout.
    Needs a state with closed cycles so bus angles exist."""
    layout = layout or ControlLayout.for_network(network)
    theta = reconstruct_bus_angles(network, v.branch_angles, kvl_tol=kvl_tol)
    theta = theta - theta[enc.slack_bus]
    p, q = _bus_injections(network, u, layout)
    x = []
    for b in enc.pq_buses:
        x += [p[b], q[b]]
    for b in enc.pv_buses:
        x += [p[b], v.magnitudes[b]]
    x += [0.0, v.magnitudes[enc.slack_bus]]
    y = [theta[b] for b in enc.non_slack]
    y += [v.magnitudes[b] for b in enc.pq_buses]
    return np.array(x), np.array(y)


def decode(enc: BimEncoding, network: Network, x: np.ndarray,
           y: np.ndarray) -> VoltageState:
    """Rebuild a full voltage state from an input row and (predicted or true)
    targets. Magnitudes at PV and slack buses pass through from the inputs."""
    n = network.n_bus
    theta = np.zeros(n)
    mags = np.zeros(n)
    for i, b in enumerate(enc.non_slack):
        theta[b] = y[i]
    off = len(enc.non_slack)
    for i, b in enumerate(enc.pq_buses):
        mags[b] = y[off + i]
    base = 2 * len(enc.pq_buses)
    for i, b in enumerate(enc.pv_buses):
        mags[b] = x[base + 2 * i + 1]
    mags[enc.slack_bus] = x[base + 2 * len(enc.pv_buses) + 1]
    phi = np.array([theta[br.to_bus] - theta[br.from_bus]
                    for br in network.branches])
    return VoltageState(mags, phi)


def bim_transform(dataset: Dataset, network: Network,
                  enc: BimEncoding | None = None,
                  kvl_tol: float = 1e-9):
    """Dataset -> (X, Y) arrays in the bus-type layout."""
    enc = enc or BimEncoding.for_network(network)
    layout = ControlLayout.for_network(network)
    X = np.zeros((len(dataset), enc.n_inputs))
    Y = np.zeros((len(dataset), enc.n_targets))
    for i, rec in enumerate(dataset.records):
        X[i], Y[i] = encode(enc, network, rec.u, rec.v_star, layout, kvl_tol)
    return X, Y, enc


def derived_quantities(enc: BimEncoding, network: Network,
                       v: VoltageState, theta: np.ndarray | None = None) -> dict:
    """Quantities the encoding computes after the fact: net P, Q injection at
    the slack bus and net Q at PV buses, from the admittance matrix."""
    if theta is None:
        theta = reconstruct_bus_angles(network, v.branch_angles, kvl_tol=np.inf)
        theta = theta - theta[enc.slack_bus]
    vc = v.magnitudes * np.exp(1j * theta)
    s = vc * np.conj(ybus_matrix(network) @ vc)
    out = {f"p_bus{enc.slack_bus + 1}": float(s[enc.slack_bus].real),
           f"q_bus{enc.slack_bus + 1}": float(s[enc.slack_bus].imag)}
    for b in enc.pv_buses:
        out[f"q_bus{b + 1}"] = float(s[b].imag)
    return out


def patched_controls(enc: BimEncoding, network: Network, v: VoltageState,
                     u: np.ndarray, layout: ControlLayout | None = None) -> np.ndarray:
    """Adjust generator controls so the balance entries the encoding treats
    as derived vanish at the state v: the slack generator absorbs both parts
    of its bus balance, PV generators absorb the imaginary part."""
    layout = layout or ControlLayout.for_network(network)
    u_hat = np.array(u, dtype=float)
    # current imbalance per bus at (v, u)
    r = assemble_residual(network, v, u_hat)
    n = network.n_bus
    first_gen = {}
    for g, gen in enumerate(network.generators):
        first_gen.setdefault(gen.bus, g)
    for bus in (enc.slack_bus, *enc.pv_buses):
        g = first_gen[bus]
        gen = network.generators[g]
        vm = v.magnitudes[bus]
        u_hat[layout.gen_v_ref[g]] += r[n + bus] / gen.k_v
        if bus == enc.slack_bus:
            u_hat[layout.gen_p_m[g]] -= vm * r[bus]
    return u_hat


def zero_mask(enc: BimEncoding, network: Network) -> np.ndarray:
    """Residual entries the encoding satisfies by construction."""
    n, c = network.n_bus, network.n_cycle
    mask = np.zeros(2 * n + c, dtype=bool)
    mask[enc.slack_bus] = True
    mask[n + enc.slack_bus] = True
    for b in enc.pv_buses:
        mask[n + b] = True
    mask[2 * n:] = True
    return mask


def bim_residual(enc: BimEncoding, network: Network, v: VoltageState,
                 u: np.ndarray, layout: ControlLayout | None = None):
    """Residual vector of a decoded prediction after the post-hoc control
    adjustment, plus the adjusted controls."""
    layout = layout or ControlLayout.for_network(network)
    u_hat = patched_controls(enc, network, v, u, layout)
    return assemble_residual(network, v, u_hat), u_hat


def nonzero_count(enc: BimEncoding, network: Network) -> int:
    return int((~zero_mask(enc, network)).sum())


def train_bim(network: Network, dataset: Dataset,
              cfg: TrainConfig | None = None,
              enc: BimEncoding | None = None
              ) -> tuple[NeuralSolver, TrainingReport, BimEncoding]:
    """Fit a model on the bus-type layout of a dataset."""
    cfg = cfg or TrainConfig()
    X, Y, enc = bim_transform(dataset, network, enc)
    meta = {
        "formulation": "bim",
        "n_bus": network.n_bus,
        "n_branch": network.n_branch,
        "dataset_fingerprint": dataset.network_fingerprint,
        "encoding": enc.to_meta(),
    }
    solver, report = train_arrays(X, Y, cfg, meta)
    return solver, report, enc


def predict_bim(solver: NeuralSolver, network: Network,
                x: np.ndarray) -> VoltageState:
    """Decoded voltage state for one input row of a bus-type model."""
    if solver.meta.get("formulation") != "bim":
        raise ValidationError("model was not trained on the bus-type layout")
    enc = BimEncoding.from_meta(solver.meta["encoding"])
    y = solver.predict_matrix(x)[0]
    return decode(enc, network, x, y)


def residual_group(label: str) -> str:
    """Coarse grouping of residual labels: re_kcl, im_kcl or kvl."""
    return label.rsplit("_", 1)[0]


def group_labels(network: Network) -> list[str]:
    return [residual_group(lab) for lab in residual_labels(network)]
