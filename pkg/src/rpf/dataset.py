"""Operating-condition sampling and dataset serialization.

An operating condition (OC) is one control vector u. Feasible-mode records
come from the joint slack solve, so their u is already adjusted and their
state is a physical operating point; infeasible-mode records keep the raw
sample and store the best-reachable state and its residual norm.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateVoltage,
    FingerprintMismatch,
    FormatError,
    GenerationError,
    InfeasibleRegion,
    NotConverged,
)
from .network import Network, network_fingerprint
from .residual import (
    ControlLayout,
    SlackSpec,
    VoltageState,
    assemble_residual,
    residual_norm,
)
from .solver import SolverConfig, solve_feasible, solve_rpf

FORMAT_NAME = "rpf-dataset-v1"
RHO_DRIFT_TOL = 1e-9


@dataclass
class SamplingConfig:
    n_samples: int
    seed: int = 0
    stream: int = 0  # sub-stream so several files can share one base seed
    mode: str = "feasible"  # "feasible" | "infeasible"
    s_range: tuple[float, float] = (1.0, 4.0)  # total demand scale, pu
    pf_range: tuple[float, float] = (0.9, 1.0)  # per-load power factor
    vref_range: tuple[float, float] = (1.0, 1.05)
    gen_scale_range: tuple[float, float] = (1.0, 1.08)  # infeasible mode only
    slack_gen: int = 0  # generator receiving the slack adjustment
    max_drop_fraction: float = 0.05

    def echo(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "seed": self.seed,
            "stream": self.stream,
            "mode": self.mode,
            "s_range": list(self.s_range),
            "pf_range": list(self.pf_range),
            "vref_range": list(self.vref_range),
            "gen_scale_range": list(self.gen_scale_range),
            "slack_gen": self.slack_gen,
        }


@dataclass
class DatasetRecord:
    u: np.ndarray
    v_star: VoltageState
    rho: float
    feasible: bool


@dataclass
class Dataset:
    records: list[DatasetRecord]
    network_fingerprint: str
    config: dict
    columns: tuple[str, ...]
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def to_arrays(self):
        """(U, V, rho, feasible) matrices with one row per record; V stacks
        magnitudes then branch angles."""
        U = np.array([rec.u for rec in self.records])
        V = np.array([rec.v_star.to_vector() for rec in self.records])
        rho = np.array([rec.rho for rec in self.records])
        feas = np.array([rec.feasible for rec in self.records], dtype=bool)
        return U, V, rho, feas


def sample_oc(rng: np.random.Generator, network: Network,
              cfg: SamplingConfig) -> np.ndarray:
    """Draw one control vector. Fixed draw order: demand scale, load shares,
    power factors, generator shares, generator scale (infeasible mode only),
    reference voltages."""
    lay = ControlLayout.for_network(network)
    nl, ng = len(network.loads), len(network.generators)
    u = np.zeros(lay.size)
    s = rng.uniform(*cfg.s_range)
    shares = rng.dirichlet(np.ones(nl))
    pf = rng.uniform(cfg.pf_range[0], cfg.pf_range[1], nl)
    u[lay.load_p] = s * shares * pf
    u[lay.load_q] = s * shares * np.sqrt(1.0 - pf * pf)
    gshares = rng.dirichlet(np.ones(ng))
    scale = rng.uniform(*cfg.gen_scale_range) if cfg.mode == "infeasible" else 1.0
    u[lay.gen_p_m] = s * gshares * scale
    u[lay.gen_v_ref] = rng.uniform(cfg.vref_range[0], cfg.vref_range[1], ng)
    return u


def rescale_to_lossless(u: np.ndarray, layout: ControlLayout) -> np.ndarray:
    """Scale generator setpoints so total generation equals total load
    (a lossless active-power balance)."""
    out = u.copy()
    total_g = out[layout.gen_p_m].sum()
    if total_g <= 0:
        raise FormatError("cannot rescale: total generation is not positive")
    out[layout.gen_p_m] *= out[layout.load_p].sum() / total_g
    return out


def dataset_columns(network: Network) -> tuple[str, ...]:
    lay = ControlLayout.for_network(network)
    v_cols = [f"v_{b.name}" for b in network.buses] + [
        f"phi_{network.buses[br.from_bus].name}_{network.buses[br.to_bus].name}"
        for br in network.branches
    ]
    return tuple(list(lay.labels) + v_cols + ["rho", "feasible"])


def _record_seed(seed: int, stream: int, j: int):
    return np.random.default_rng([seed, stream, j])


def generate_dataset(network: Network, cfg: SamplingConfig,
                     solver_cfg: SolverConfig | None = None,
                     threads: int = 1) -> Dataset:
    """Sample and solve cfg.n_samples operating conditions.

    Each record gets its own RNG keyed by (seed, index), so the result is
    independent of worker count and evaluation order. Samples whose solve
    fails are dropped; more than cfg.max_drop_fraction dropped raises
    GenerationError.
    """
    if cfg.mode not in ("feasible", "infeasible"):
        raise FormatError(f"unknown sampling mode {cfg.mode!r}")
    scfg = solver_cfg or SolverConfig()
    lay = ControlLayout.for_network(network)
    slack = SlackSpec.single(cfg.slack_gen, len(network.generators))
    samples = [
        sample_oc(_record_seed(cfg.seed, cfg.stream, j), network, cfg)
        for j in range(cfg.n_samples)
    ]

    def solve_one(u):
        if cfg.mode == "feasible":
            try:
                fs = solve_feasible(network, u, slack, scfg)
            except (NotConverged, InfeasibleRegion, DegenerateVoltage):
                return None
            return DatasetRecord(u=fs.u_adjusted, v_star=fs.v_star,
                                 rho=fs.rho, feasible=True)
        try:
            sol = solve_rpf(network, u, scfg)
        except DegenerateVoltage:
            return None
        if not sol.converged:
            return None
        return DatasetRecord(u=u, v_star=sol.v_star, rho=sol.rho,
                             feasible=sol.rho <= scfg.feas_tol)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_one, samples))
    else:
        results = [solve_one(u) for u in samples]

    records = [rec for rec in results if rec is not None]
    n_dropped = cfg.n_samples - len(records)
    if n_dropped > cfg.max_drop_fraction * cfg.n_samples:
        raise GenerationError(
            f"dropped {n_dropped}/{cfg.n_samples} samples (> "
            f"{cfg.max_drop_fraction:.0%})"
        )
    return Dataset(
        records=records,
        network_fingerprint=network_fingerprint(network),
        config=cfg.echo(),
        columns=dataset_columns(network),
        n_dropped=n_dropped,
    )


def save_dataset(ds: Dataset, path) -> None:
    """Write records as CSV behind a '#'-prefixed JSON provenance header."""
    header = {
        "format": FORMAT_NAME,
        "fingerprint": ds.network_fingerprint,
        "config": ds.config,
        "n_dropped": ds.n_dropped,
        "columns": list(ds.columns),
    }
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        fh.write(",".join(ds.columns) + "\n")
        for rec in ds.records:
            vals = [repr(float(x)) for x in rec.u]
            vals += [repr(float(x)) for x in rec.v_star.to_vector()]
            vals += [repr(rec.rho), "1" if rec.feasible else "0"]
            fh.write(",".join(vals) + "\n")


def load_dataset(path, network: Network,
                 solver_cfg: SolverConfig | None = None) -> Dataset:
    """Read a dataset and validate it against the network: the fingerprint
    must match and every stored rho must agree with a recomputation from the
    stored state and controls."""
    scfg = solver_cfg or SolverConfig()
    lay = ControlLayout.for_network(network)
    m = lay.size
    nv = network.n_bus + network.n_branch

    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise FormatError("missing provenance header line")
        try:
            header = json.loads(first[1:].strip())
        except json.JSONDecodeError as e:
            raise FormatError(f"bad provenance header: {e}") from None
        if header.get("format") != FORMAT_NAME:
            raise FormatError(f"unknown format {header.get('format')!r}")
        fp = network_fingerprint(network)
        if header.get("fingerprint") != fp:
            raise FingerprintMismatch(
                "dataset was generated for a different network"
            )
        columns = tuple(header.get("columns", ()))
        expected = dataset_columns(network)
        if columns != expected:
            raise FormatError("dataset columns do not match the network")
        fh.readline()  # column name row

        records = []
        for lineno, line in enumerate(fh, start=3):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != m + nv + 2:
                raise FormatError(f"row {lineno}: expected {m + nv + 2} fields")
            try:
                vals = np.array([float(p) for p in parts[:-1]])
                feas = bool(int(parts[-1]))
            except ValueError:
                raise FormatError(f"row {lineno}: non-numeric field") from None
            u = vals[:m]
            v = VoltageState.from_vector(vals[m:m + nv], network.n_bus)
            rho = float(vals[m + nv])
            rho_check = residual_norm(assemble_residual(network, v, u, lay))
            if abs(rho - rho_check) > RHO_DRIFT_TOL:
                raise FormatError(
                    f"row {lineno}: stored rho {rho:.3e} != recomputed {rho_check:.3e}"
                )
            if feas and rho > scfg.feas_tol:
                raise FormatError(
                    f"row {lineno}: feasible flag set but rho {rho:.3e} above tolerance"
                )
            records.append(DatasetRecord(u=u, v_star=v, rho=rho, feasible=feas))

    return Dataset(
        records=records,
        network_fingerprint=header["fingerprint"],
        config=header.get("config", {}),
        columns=columns,
        n_dropped=int(header.get("n_dropped", 0)),
    )
