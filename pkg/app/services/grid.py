# app/services/grid.py
"""Radial distribution network model and exact AC power flow.

Buses are 0-based indices in memory. Files use the usual 1-based labels
(bus label b is index b - 1).

Injection convention: positive p/q is consumption at the bus (load minus
generation plus storage charging), so at a solution every non-slack bus
satisfies Re(V * conj(I)) + p = 0 and Im(V * conj(I)) + q = 0.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from dotenv import dotenv_values

from app.services.errors import (
    ConfigurationError,
    NonConvergedError,
    ShapeError,
    SolverError,
    TopologyError,
)

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

ACPF_TOLERANCE = 1e-8
ACPF_MAX_ITER = 50


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float  # p.u.
    x: float  # p.u.


@dataclass(frozen=True)
class NetworkModel:
    bus_count: int
    slack_bus: int
    branches: Tuple[Branch, ...]
    s_base: float = 1000.0  # kVA
    v_base: float = 12.66  # kV
    voltage_limits: Tuple[float, float] = (0.95, 1.05)
    v_slack: float = 1.0

    def __post_init__(self):
        if self.bus_count < 1:
            raise ConfigurationError("Network needs at least one bus")
        if not 0 <= self.slack_bus < self.bus_count:
            raise ConfigurationError(f"Slack bus {self.slack_bus} outside 0..{self.bus_count - 1}")
        lower, upper = self.voltage_limits
        if not 0 < lower < upper:
            raise ConfigurationError(f"Voltage limits must satisfy 0 < lower < upper, got {self.voltage_limits}")
        if self.s_base <= 0 or self.v_base <= 0:
            raise ConfigurationError("Bases must be positive")
        for br in self.branches:
            if not (0 <= br.from_bus < self.bus_count and 0 <= br.to_bus < self.bus_count):
                raise TopologyError(f"Branch {br.from_bus}-{br.to_bus} references an unknown bus")
            if br.r < 0 or br.x < 0 or (br.r == 0 and br.x == 0):
                raise ConfigurationError(
                    f"Branch {br.from_bus}-{br.to_bus} needs nonnegative impedance with r or x positive"
                )

    @property
    def branch_count(self) -> int:
        return len(self.branches)

    @property
    def z_base(self) -> float:
        """Impedance base in ohm"""
        return self.v_base ** 2 * 1000.0 / self.s_base

    def kw_to_pu(self, value):
        return np.asarray(value, dtype=float) / self.s_base


@dataclass(frozen=True)
class InjectionVector:
    p: np.ndarray  # p.u., consumption positive
    q: np.ndarray


@dataclass(frozen=True)
class VoltageSolution:
    v_re: np.ndarray
    v_im: np.ndarray
    slack_p: float
    converged: bool
    iterations: int
    max_residual: float
    slack_q: float = 0.0

    @property
    def voltage(self) -> np.ndarray:
        return self.v_re + 1j * self.v_im

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.v_re, self.v_im)


@dataclass(frozen=True)
class Violation:
    bus: int
    magnitude: float
    limit: str  # "lower" | "upper"


def check_radial(network: NetworkModel) -> nx.Graph:
    """Return the branch graph, raising TopologyError unless it is a spanning tree"""
    graph = nx.Graph()
    graph.add_nodes_from(range(network.bus_count))
    for idx, br in enumerate(network.branches):
        if br.from_bus == br.to_bus:
            raise TopologyError(f"Branch {idx} is a self loop at bus {br.from_bus}")
        if graph.has_edge(br.from_bus, br.to_bus):
            raise TopologyError(f"Parallel branches between {br.from_bus} and {br.to_bus}")
        graph.add_edge(br.from_bus, br.to_bus, index=idx)

    if network.branch_count != network.bus_count - 1:
        raise TopologyError(
            f"Radial network with {network.bus_count} buses needs {network.bus_count - 1} branches, "
            f"got {network.branch_count}"
        )
    if not nx.is_connected(graph):
        raise TopologyError("Network is disconnected")
    return graph


def parent_order(network: NetworkModel) -> List[Tuple[int, int, int]]:
    """Branches oriented away from the slack bus as (parent, child, branch_index), breadth first"""
    graph = check_radial(network)
    return [
        (parent, child, graph.edges[parent, child]["index"])
        for parent, child in nx.bfs_edges(graph, network.slack_bus)
    ]


def build_admittance(network: NetworkModel) -> Tuple[np.ndarray, np.ndarray]:
    """Bus admittance matrix split into (G, B), no shunt elements"""
    check_radial(network)

    n = network.bus_count
    y_bus = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        y = 1.0 / complex(br.r, br.x)
        y_bus[br.from_bus, br.to_bus] -= y
        y_bus[br.to_bus, br.from_bus] -= y
    np.fill_diagonal(y_bus, -y_bus.sum(axis=1))

    return y_bus.real.copy(), y_bus.imag.copy()


class PowerFlowSolver:
    """Newton-Raphson power flow in rectangular coordinates.

    Immutable after construction, so one instance can serve concurrent
    solves on different injection vectors.
    """

    def __init__(
        self,
        network: NetworkModel,
        tolerance: float = ACPF_TOLERANCE,
        max_iter: int = ACPF_MAX_ITER,
    ):
        self.network = network
        self.tolerance = tolerance
        self.max_iter = max_iter

        g, b = build_admittance(network)
        self._y = g + 1j * b
        self._y.setflags(write=False)
        self._y_conj = np.conj(self._y)
        self._y_conj.setflags(write=False)
        self._pq = np.array(
            [i for i in range(network.bus_count) if i != network.slack_bus], dtype=int
        )

    def solve(
        self,
        inj: InjectionVector,
        warm_start: Optional[VoltageSolution] = None,
    ) -> VoltageSolution:
        net = self.network
        n = net.bus_count
        p = np.asarray(inj.p, dtype=float)
        q = np.asarray(inj.q, dtype=float)
        if p.shape != (n,) or q.shape != (n,):
            raise ShapeError(f"Injection vectors must have length {n}, got {p.shape} and {q.shape}")

        if warm_start is not None and warm_start.converged:
            v = warm_start.voltage.astype(complex)
        else:
            v = np.full(n, net.v_slack, dtype=complex)
        v[net.slack_bus] = net.v_slack

        pq = self._pq
        m = len(pq)
        converged = False
        residual = 0.0
        iterations = 0

        for iteration in range(self.max_iter + 1):
            current = self._y @ v
            power = v * np.conj(current)
            if m == 0:
                converged = True
                break

            mismatch = np.concatenate([power.real[pq] + p[pq], power.imag[pq] + q[pq]])
            residual = float(np.max(np.abs(mismatch)))
            if residual < self.tolerance:
                converged = True
                break
            if iteration == self.max_iter or not np.isfinite(residual):
                break

            # Complex derivatives of S = V * conj(Y V) w.r.t. real and imaginary parts
            ds_de = np.diag(np.conj(current)) + v[:, None] * self._y_conj
            ds_df = 1j * (np.diag(np.conj(current)) - v[:, None] * self._y_conj)
            jac = np.block([
                [ds_de.real[np.ix_(pq, pq)], ds_df.real[np.ix_(pq, pq)]],
                [ds_de.imag[np.ix_(pq, pq)], ds_df.imag[np.ix_(pq, pq)]],
            ])
            try:
                step = np.linalg.solve(jac, -mismatch)
            except np.linalg.LinAlgError as e:
                raise SolverError(f"Singular power-flow Jacobian at iteration {iteration}: {e}")

            v[pq] += step[:m] + 1j * step[m:]
            iterations += 1

        if not converged:
            logger.warning(
                f"Power flow did not converge after {iterations} iterations "
                f"(max residual {residual:.3e} p.u.)"
            )

        slack_power = power[net.slack_bus]
        return VoltageSolution(
            v_re=v.real.copy(),
            v_im=v.imag.copy(),
            slack_p=float(slack_power.real),
            slack_q=float(slack_power.imag),
            converged=converged,
            iterations=iterations,
            max_residual=residual,
        )


def solve_acpf(network: NetworkModel, inj: InjectionVector) -> VoltageSolution:
    return PowerFlowSolver(network).solve(inj)


def violation_report(sol: VoltageSolution, limits: Tuple[float, float]) -> List[Violation]:
    """Buses outside [lower, upper]; the boundary itself is acceptable"""
    if not sol.converged:
        raise NonConvergedError("Cannot assess voltage limits on a non-converged power flow")

    lower, upper = limits
    report = []
    for bus, magnitude in enumerate(sol.magnitude):
        if magnitude < lower:
            report.append(Violation(bus=bus, magnitude=float(magnitude), limit="lower"))
        elif magnitude > upper:
            report.append(Violation(bus=bus, magnitude=float(magnitude), limit="upper"))
    return report


def violation_magnitude(
    magnitudes: np.ndarray,
    limits: Tuple[float, float],
) -> float:
    """Total p.u. distance of magnitudes outside the limits"""
    lower, upper = limits
    magnitudes = np.asarray(magnitudes, dtype=float)
    return float(np.sum(np.maximum(lower - magnitudes, 0.0) + np.maximum(magnitudes - upper, 0.0)))


def branch_losses(network: NetworkModel, sol: VoltageSolution) -> np.ndarray:
    """I^2 r loss per branch in p.u."""
    v = sol.voltage
    losses = np.zeros(network.branch_count)
    for idx, br in enumerate(network.branches):
        current = (v[br.from_bus] - v[br.to_bus]) / complex(br.r, br.x)
        losses[idx] = abs(current) ** 2 * br.r
    return losses


def load_network(branches_path: Path, meta_path: Optional[Path] = None) -> NetworkModel:
    """
    Load a network from a branch CSV (from,to,r_ohm,x_ohm) and a KEY=value sidecar

    Sidecar keys: S_BASE_KVA, V_BASE_KV, SLACK_BUS, V_SLACK, V_MIN, V_MAX.
    Missing keys fall back to the 33-bus defaults.
    """
    frame = pd.read_csv(branches_path)
    missing = {"from", "to", "r_ohm", "x_ohm"} - set(frame.columns)
    if missing:
        raise ConfigurationError(f"Branch file {branches_path} lacks columns {sorted(missing)}")

    meta = dotenv_values(meta_path) if meta_path else {}
    s_base = float(meta.get("S_BASE_KVA") or 1000.0)
    v_base = float(meta.get("V_BASE_KV") or 12.66)
    slack_label = int(meta.get("SLACK_BUS") or 1)
    limits = (float(meta.get("V_MIN") or 0.95), float(meta.get("V_MAX") or 1.05))
    v_slack = float(meta.get("V_SLACK") or 1.0)

    labels = set(frame["from"].astype(int)) | set(frame["to"].astype(int)) | {slack_label}
    bus_count = max(labels)
    z_base = v_base ** 2 * 1000.0 / s_base

    branches = tuple(
        Branch(
            from_bus=int(row["from"]) - 1,
            to_bus=int(row["to"]) - 1,
            r=float(row["r_ohm"]) / z_base,
            x=float(row["x_ohm"]) / z_base,
        )
        for _, row in frame.iterrows()
    )
    network = NetworkModel(
        bus_count=bus_count,
        slack_bus=slack_label - 1,
        branches=branches,
        s_base=s_base,
        v_base=v_base,
        voltage_limits=limits,
        v_slack=v_slack,
    )
    check_radial(network)
    logger.info(f"Loaded network from {branches_path}: {bus_count} buses, {len(branches)} branches")
    return network


def ieee33_network(voltage_limits: Optional[Sequence[float]] = None) -> NetworkModel:
    network = load_network(DATA_DIR / "ieee33_branches.csv", DATA_DIR / "ieee33_meta.env")
    if voltage_limits is not None:
        network = replace(network, voltage_limits=(float(voltage_limits[0]), float(voltage_limits[1])))
    return network
