# app/services/safe_dispatch.py
"""Single-period safe dispatch fallback.

Two interchangeable backends produce a candidate ESS schedule for one hour:

* conic: DistFlow branch-flow model with the second-order-cone relaxation
  l * v_from >= P^2 + Q^2, solved with Clarabel through cvxpy. The program is
  compiled once per (network, ESS placement) with hour-dependent data held
  in cvxpy parameters.
* search: coordinate search over ESS powers with every candidate evaluated by
  exact AC power flow.

Either candidate then goes through verify_or_repair, which only returns
verified=True for actions that pass exact power flow at every bus.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from app.services.assets import EssState, EssUnit, ProfileSet, net_injections, power_bounds
from app.services.config import DispatchConfig
from app.services.errors import DispatchInfeasibleError, HardFault
from app.services.grid import (
    InjectionVector,
    NetworkModel,
    PowerFlowSolver,
    parent_order,
    violation_magnitude,
)

logger = logging.getLogger(__name__)

ACCEPTED_STATUSES = (cp.OPTIMAL, cp.OPTIMAL_INACCURATE)
GAP_EPS = 1e-9


@dataclass(frozen=True)
class SafeDispatchProblem:
    network: NetworkModel
    ess_units: Tuple[EssUnit, ...]
    t: int
    base: InjectionVector  # consumption without ESS, p.u.
    lower: np.ndarray  # kW
    upper: np.ndarray  # kW
    price_grid: float  # C_r, GBP/kWh
    price_ess: np.ndarray  # C_e per ESS, GBP/kWh
    dt: float = 1.0

    @property
    def n_ess(self) -> int:
        return len(self.ess_units)

    def injections(self, power_kw: np.ndarray) -> InjectionVector:
        p = self.base.p.copy()
        for unit, power in zip(self.ess_units, power_kw):
            p[unit.bus] += power / self.network.s_base
        return InjectionVector(p=p, q=self.base.q)

    def cost(self, p_r_kw: float, power_kw: np.ndarray) -> float:
        return float(self.price_grid * p_r_kw * self.dt + np.dot(self.price_ess, power_kw) * self.dt)

    def variable_counts(self) -> dict:
        return {
            "ess": self.n_ess,
            "branch": 3 * self.network.branch_count,
            "voltage": self.network.bus_count,
        }


@dataclass
class SafeDispatchSolution:
    power_kw: np.ndarray
    objective: float  # GBP for the hour
    verified: bool = False
    relaxation_gap: np.ndarray = field(default_factory=lambda: np.zeros(0))
    backend: str = ""
    unresolvable: bool = False
    infeasible: bool = False
    trials: int = 0
    scale: float = 1.0
    violation: float = 0.0

    @property
    def max_gap(self) -> float:
        return float(np.max(self.relaxation_gap)) if self.relaxation_gap.size else 0.0


def formulate(
    network: NetworkModel,
    profiles: ProfileSet,
    ess_units: Sequence[EssUnit],
    states: Sequence[EssState],
    t: int,
    dt: float = 1.0,
) -> SafeDispatchProblem:
    """Hour-t dispatch problem; raises TopologyError unless the network is radial"""
    parent_order(network)
    ess_units = tuple(ess_units)
    bounds = [power_bounds(unit, state, dt) for unit, state in zip(ess_units, states)]
    return SafeDispatchProblem(
        network=network,
        ess_units=ess_units,
        t=t,
        base=net_injections(network, profiles, (), (), t),
        lower=np.array([b[0] for b in bounds], dtype=float),
        upper=np.array([b[1] for b in bounds], dtype=float),
        price_grid=float(profiles.price_grid[t]),
        price_ess=profiles.ess_prices(t, len(ess_units)),
        dt=dt,
    )


def _incidence(network: NetworkModel):
    """Branch endpoints oriented away from the slack and node/branch incidence matrices"""
    order = sorted(parent_order(network), key=lambda item: item[2])
    from_idx = np.array([parent for parent, _, _ in order], dtype=int)
    to_idx = np.array([child for _, child, _ in order], dtype=int)
    n, e = network.bus_count, network.branch_count
    into = np.zeros((n, e))
    out_of = np.zeros((n, e))
    into[to_idx, np.arange(e)] = 1.0
    out_of[from_idx, np.arange(e)] = 1.0
    r = np.array([br.r for br in network.branches])
    x = np.array([br.x for br in network.branches])
    return from_idx, to_idx, into, out_of, r, x


def _ess_matrix(network: NetworkModel, ess_units: Sequence[EssUnit]) -> np.ndarray:
    placement = np.zeros((network.bus_count, len(ess_units)))
    for k, unit in enumerate(ess_units):
        placement[unit.bus, k] = 1.0 / network.s_base
    return placement


def _distflow(network: NetworkModel, p_cons, q_cons, voltage_margin: float, prefix: str = ""):
    """
    DistFlow variables and constraints for one hour

    p_cons / q_cons are per-bus consumption expressions in p.u.

    Returns:
        (variables dict, constraint list, slack outflow into its branches in
        p.u.; the slack draw P_r adds the slack bus's own consumption)
    """
    from_idx, to_idx, into, out_of, r, x = _incidence(network)
    n, e = network.bus_count, network.branch_count
    slack = network.slack_bus
    others = np.array([i for i in range(n) if i != slack], dtype=int)
    lower, upper = network.voltage_limits

    flow_p = cp.Variable(e, name=f"{prefix}P")
    flow_q = cp.Variable(e, name=f"{prefix}Q")
    current = cp.Variable(e, nonneg=True, name=f"{prefix}l")
    volt = cp.Variable(n, name=f"{prefix}v")

    arrive_p = flow_p - cp.multiply(r, current)
    arrive_q = flow_q - cp.multiply(x, current)
    balance_p = into @ arrive_p - out_of @ flow_p
    balance_q = into @ arrive_q - out_of @ flow_q

    constraints = [
        balance_p[others] == p_cons[others],
        balance_q[others] == q_cons[others],
        volt[to_idx] == volt[from_idx] - 2 * (cp.multiply(r, flow_p) + cp.multiply(x, flow_q))
        + cp.multiply(r ** 2 + x ** 2, current),
        cp.SOC(volt[from_idx] + current, cp.vstack([2 * flow_p, 2 * flow_q, volt[from_idx] - current]), axis=0),
        volt[slack] == network.v_slack ** 2,
        volt[others] >= (lower + voltage_margin) ** 2,
        volt[others] <= (upper - voltage_margin) ** 2,
    ]
    variables = {"P": flow_p, "Q": flow_q, "l": current, "v": volt, "from": from_idx}
    return variables, constraints, out_of[slack] @ flow_p


def _cone_gap(variables: dict) -> np.ndarray:
    """Per-branch |l v - P^2 - Q^2| relative to the largest l v in the network"""
    p = variables["P"].value
    q = variables["Q"].value
    l = variables["l"].value
    v_from = variables["v"].value[variables["from"]]
    lv = l * v_from
    scale = max(float(np.max(np.abs(lv))), GAP_EPS) if lv.size else 1.0
    return np.abs(lv - (p ** 2 + q ** 2)) / scale


class ConicBackend:
    """Parametrized DistFlow relaxation, compiled on first use"""

    name = "conic"

    def __init__(self, network: NetworkModel, ess_units: Sequence[EssUnit], config: Optional[DispatchConfig] = None):
        self.network = network
        self.ess_units = tuple(ess_units)
        self.config = config or DispatchConfig()
        self._build()

    def _build(self):
        net = self.network
        k = len(self.ess_units)
        self.base_p = cp.Parameter(net.bus_count, name="base_p")
        self.base_q = cp.Parameter(net.bus_count, name="base_q")
        self.lower = cp.Parameter(k, name="lower")
        self.upper = cp.Parameter(k, name="upper")
        # Prices arrive pre-multiplied by dt; the slack bus's fixed consumption
        # enters as a constant so every product stays parameter x variable
        self.price_grid = cp.Parameter(name="c_r_dt")
        self.price_ess = cp.Parameter(k, name="c_e_dt")
        self.fixed_cost = cp.Parameter(name="fixed_cost")
        self.power = cp.Variable(k, name="p_ess")

        placement = _ess_matrix(net, self.ess_units)
        p_cons = self.base_p + placement @ self.power
        self.variables, constraints, outflow = _distflow(net, p_cons, self.base_q, self.config.voltage_margin)
        constraints += [self.power >= self.lower, self.power <= self.upper]
        slack_variable_draw = outflow + placement[net.slack_bus] @ self.power
        # GBP for the hour: P_r in p.u. times s_base gives kW
        objective = (
            net.s_base * self.price_grid * slack_variable_draw + self.price_ess @ self.power + self.fixed_cost
        )
        self.program = cp.Problem(cp.Minimize(objective), constraints)

    def solve(self, problem: SafeDispatchProblem) -> SafeDispatchSolution:
        slack = self.network.slack_bus
        self.base_p.value = problem.base.p
        self.base_q.value = problem.base.q
        self.lower.value = problem.lower
        self.upper.value = problem.upper
        self.price_grid.value = problem.price_grid * problem.dt
        self.price_ess.value = problem.price_ess * problem.dt
        self.fixed_cost.value = problem.price_grid * problem.dt * problem.base.p[slack] * self.network.s_base
        try:
            self.program.solve(
                solver=cp.CLARABEL,
                tol_feas=self.config.feasibility_tol,
                tol_gap_abs=self.config.gap_tol,
                tol_gap_rel=self.config.gap_tol,
            )
        except cp.error.SolverError as e:
            raise DispatchInfeasibleError(f"Conic solve failed at hour {problem.t}: {e}")
        if self.program.status not in ACCEPTED_STATUSES:
            raise DispatchInfeasibleError(f"Conic relaxation at hour {problem.t} returned {self.program.status}")

        power = np.clip(np.asarray(self.power.value, dtype=float).reshape(-1), problem.lower, problem.upper)
        return SafeDispatchSolution(
            power_kw=power,
            objective=float(self.program.value),
            relaxation_gap=_cone_gap(self.variables),
            backend=self.name,
        )


class SearchBackend:
    """Refined coordinate search over ESS powers, each point checked by exact power flow"""

    name = "search"

    def __init__(
        self,
        network: NetworkModel,
        ess_units: Sequence[EssUnit],
        config: Optional[DispatchConfig] = None,
        solver: Optional[PowerFlowSolver] = None,
    ):
        self.network = network
        self.ess_units = tuple(ess_units)
        self.config = config or DispatchConfig()
        self.solver = solver or PowerFlowSolver(network)

    def evaluate(self, problem: SafeDispatchProblem, power_kw: np.ndarray) -> Tuple[float, float]:
        """(cost, violation magnitude); cost is inf when power flow fails"""
        solution = self.solver.solve(problem.injections(power_kw))
        if not solution.converged:
            return float("inf"), float("inf")
        violation = violation_magnitude(solution.magnitude, self.network.voltage_limits)
        return problem.cost(solution.slack_p * self.network.s_base, power_kw), violation

    def solve(self, problem: SafeDispatchProblem) -> SafeDispatchSolution:
        cfg = self.config
        lo, hi = problem.lower.copy(), problem.upper.copy()
        best = np.zeros(problem.n_ess)
        best_cost, best_violation = self.evaluate(problem, best)

        def improves(cost: float, violation: float) -> bool:
            # feasibility first, then cost
            if best_violation > 0:
                return violation < best_violation or (violation == best_violation and cost < best_cost)
            return violation == 0 and cost < best_cost

        for _ in range(cfg.search_rounds):
            for k in range(problem.n_ess):
                for value in np.linspace(lo[k], hi[k], cfg.search_points):
                    candidate = best.copy()
                    candidate[k] = value
                    cost, violation = self.evaluate(problem, candidate)
                    if improves(cost, violation):
                        best, best_cost, best_violation = candidate, cost, violation
            step = (hi - lo) / (cfg.search_points - 1)
            lo = np.maximum(problem.lower, best - step)
            hi = np.minimum(problem.upper, best + step)

        if best_violation > 0 or not np.isfinite(best_cost):
            raise DispatchInfeasibleError(f"Search found no voltage-feasible dispatch at hour {problem.t}")
        return SafeDispatchSolution(power_kw=best, objective=best_cost, backend=self.name)


def make_backend(network: NetworkModel, ess_units: Sequence[EssUnit], config: DispatchConfig, solver=None):
    if config.backend == "search":
        return SearchBackend(network, ess_units, config, solver)
    return ConicBackend(network, ess_units, config)


def solve_safe_dispatch(problem: SafeDispatchProblem, backend=None) -> SafeDispatchSolution:
    """Optimize the hour-t dispatch; raises DispatchInfeasibleError when no feasible point exists"""
    if problem.n_ess == 0:
        solver = PowerFlowSolver(problem.network)
        solution = solver.solve(problem.base)
        return SafeDispatchSolution(
            power_kw=np.zeros(0),
            objective=problem.cost(solution.slack_p * problem.network.s_base, np.zeros(0)),
            backend="none",
        )
    backend = backend or ConicBackend(problem.network, problem.ess_units)
    return backend.solve(problem)


def verify_or_repair(
    candidate_kw: np.ndarray,
    problem: SafeDispatchProblem,
    solver: Optional[PowerFlowSolver] = None,
    max_trials: int = 20,
) -> SafeDispatchSolution:
    """
    Exact power-flow check with shrink-toward-zero repair

    The candidate is clipped to the ESS bounds and checked at every bus. An
    unsafe candidate is scaled by bisection between zero (when zero is safe)
    and the candidate. When zero itself is unsafe a few intermediate scales
    are tried; failing those the least-violating trial comes back with
    verified=False and unresolvable=True.

    Raises:
        HardFault: no trial produced a converged power flow
    """
    solver = solver or PowerFlowSolver(problem.network)
    limits = problem.network.voltage_limits
    s_base = problem.network.s_base
    candidate = np.clip(np.asarray(candidate_kw, dtype=float).reshape(-1), problem.lower, problem.upper)
    trials: List[Tuple[float, float, float]] = []  # (scale, violation, cost)

    def trial(scale: float) -> Optional[float]:
        power = scale * candidate
        solution = solver.solve(problem.injections(power))
        if not solution.converged:
            trials.append((scale, float("inf"), float("inf")))
            return None
        violation = violation_magnitude(solution.magnitude, limits)
        trials.append((scale, violation, problem.cost(solution.slack_p * s_base, power)))
        return violation

    def result(scale: float, verified: bool, unresolvable: bool = False) -> SafeDispatchSolution:
        _, violation, cost = next(p for p in reversed(trials) if p[0] == scale)
        return SafeDispatchSolution(
            power_kw=scale * candidate,
            objective=cost,
            verified=verified,
            unresolvable=unresolvable,
            trials=len(trials),
            scale=scale,
            violation=violation,
        )

    if trial(1.0) == 0.0:
        return result(1.0, True)

    # A zero candidate has nothing to scale
    if np.any(candidate):
        if trial(0.0) == 0.0:
            safe, unsafe = 0.0, 1.0
            while len(trials) < max_trials:
                mid = 0.5 * (safe + unsafe)
                if trial(mid) == 0.0:
                    safe = mid
                else:
                    unsafe = mid
            return result(safe, True)

        for scale in (0.75, 0.5, 0.25):
            if len(trials) >= max_trials:
                break
            if trial(scale) == 0.0:
                return result(scale, True)

    converged = [p for p in trials if np.isfinite(p[1])]
    if not converged:
        raise HardFault(f"Power flow failed for all {len(trials)} repair trials at hour {problem.t}")
    best_scale = min(converged, key=lambda p: p[1])[0]
    logger.warning(
        f"Unresolvable insecurity at hour {problem.t}: best trial scale {best_scale} "
        f"still violates limits by {min(p[1] for p in converged):.5f} p.u."
    )
    return result(best_scale, False, unresolvable=True)


class SafeDispatcher:
    """Fallback entry point: optimize with the configured backend, then verify or repair"""

    def __init__(
        self,
        network: NetworkModel,
        ess_units: Sequence[EssUnit],
        config: Optional[DispatchConfig] = None,
        solver: Optional[PowerFlowSolver] = None,
    ):
        self.network = network
        self.ess_units = tuple(ess_units)
        self.config = config or DispatchConfig()
        self.solver = solver or PowerFlowSolver(network)
        self.backend = make_backend(network, self.ess_units, self.config, self.solver) if self.ess_units else None
        self.calls = 0
        self.infeasible_calls = 0

    def dispatch(
        self,
        profiles: ProfileSet,
        states: Sequence[EssState],
        t: int,
        proposal_kw: Optional[np.ndarray] = None,
        dt: float = 1.0,
    ) -> SafeDispatchSolution:
        self.calls += 1
        problem = formulate(self.network, profiles, self.ess_units, states, t, dt)
        try:
            optimized = solve_safe_dispatch(problem, self.backend)
            candidate = optimized.power_kw
        except DispatchInfeasibleError as e:
            self.infeasible_calls += 1
            logger.warning(f"{e}; repairing the proposed action instead")
            if self.config.dump_dir:
                dump_problem(problem, Path(self.config.dump_dir) / f"infeasible_t{t}.txt")
            optimized = None
            candidate = np.zeros(problem.n_ess) if proposal_kw is None else proposal_kw

        repaired = verify_or_repair(candidate, problem, self.solver, self.config.max_trials)
        repaired.infeasible = optimized is None
        if optimized is not None:
            repaired.backend = optimized.backend
            repaired.relaxation_gap = optimized.relaxation_gap
        return repaired


def dump_problem(problem: SafeDispatchProblem, path: Path) -> Path:
    """
    Plain-text listing of the hour's conic program

    Sections: VARIABLES, OBJECTIVE (linear coefficients), EQUALITIES
    (one DistFlow balance/drop row per branch), CONES (one rotated cone per
    branch) and BOUNDS. Quantities are p.u. except ESS powers (kW).
    """
    net = problem.network
    from_idx, to_idx, _, _, r, x = _incidence(net)
    lower, upper = net.voltage_limits
    lines = [
        f"# safe dispatch program, hour {problem.t}",
        f"# buses {net.bus_count} branches {net.branch_count} ess {problem.n_ess} s_base_kva {net.s_base}",
        "VARIABLES",
        *(f"  p_ess[{k}] kW" for k in range(problem.n_ess)),
        f"  P[0..{net.branch_count - 1}] Q[0..{net.branch_count - 1}] l[0..{net.branch_count - 1}] v[0..{net.bus_count - 1}]",
        "OBJECTIVE minimize",
        f"  {problem.price_grid * net.s_base * problem.dt:.10g} * P_r",
        *(f"  {c * problem.dt:+.10g} * p_ess[{k}]" for k, c in enumerate(problem.price_ess)),
        "EQUALITIES",
    ]
    for e, (i, j) in enumerate(zip(from_idx, to_idx)):
        lines.append(
            f"  drop[{e}]: v[{j}] - v[{i}] + {2 * r[e]:.10g} P[{e}] + {2 * x[e]:.10g} Q[{e}] "
            f"- {r[e] ** 2 + x[e] ** 2:.10g} l[{e}] = 0"
        )
    for bus in range(net.bus_count):
        if bus == net.slack_bus:
            continue
        ess = [f"p_ess[{k}]/{net.s_base:g}" for k, unit in enumerate(problem.ess_units) if unit.bus == bus]
        extra = (" + " + " + ".join(ess)) if ess else ""
        lines.append(f"  balance_p[{bus}]: inflow - r l - outflow = {problem.base.p[bus]:.10g}{extra}")
        lines.append(f"  balance_q[{bus}]: inflow - x l - outflow = {problem.base.q[bus]:.10g}")
    lines.append("CONES")
    for e, i in enumerate(from_idx):
        lines.append(f"  ||(2 P[{e}], 2 Q[{e}], v[{i}] - l[{e}])|| <= v[{i}] + l[{e}]")
    lines.append("BOUNDS")
    lines.append(f"  v[{net.slack_bus}] = {net.v_slack ** 2:.10g}")
    lines.append(f"  {lower ** 2:.10g} <= v[i] <= {upper ** 2:.10g} for i != {net.slack_bus}")
    for k in range(problem.n_ess):
        lines.append(f"  {problem.lower[k]:.10g} <= p_ess[{k}] <= {problem.upper[k]:.10g}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass
class MultiPeriodSolution:
    power_kw: np.ndarray  # (T, K)
    soe: np.ndarray  # (T + 1, K)
    objective: float
    max_gap: float


def solve_multi_period(
    network: NetworkModel,
    profiles: ProfileSet,
    ess_units: Sequence[EssUnit],
    hours: Sequence[int],
    initial_soe: Sequence[float],
    dt: float = 1.0,
    config: Optional[DispatchConfig] = None,
) -> MultiPeriodSolution:
    """Time-coupled DistFlow relaxation over the given hours with SoE linking (full foresight)"""
    config = config or DispatchConfig()
    hours = list(hours)
    ess_units = tuple(ess_units)
    k = len(ess_units)
    steps = len(hours)
    placement = _ess_matrix(network, ess_units)
    p_max = np.array([u.p_max for u in ess_units])
    capacity = np.array([u.e_capacity for u in ess_units])
    eta_ch = np.array([u.eta_ch for u in ess_units])
    eta_dis = np.array([u.eta_dis for u in ess_units])

    charge = cp.Variable((steps, k), nonneg=True, name="pc")
    discharge = cp.Variable((steps, k), nonneg=True, name="pd")
    soe = cp.Variable((steps + 1, k), name="soe")
    constraints = [
        soe[0] == np.asarray(initial_soe, dtype=float),
        soe >= np.array([u.soe_min for u in ess_units]),
        soe <= np.array([u.soe_max for u in ess_units]),
        charge <= p_max,
        discharge <= p_max,
    ]
    objective = 0
    blocks = []
    for step, t in enumerate(hours):
        base = net_injections(network, profiles, (), (), t)
        power = charge[step] - discharge[step]
        p_cons = base.p + placement @ power
        variables, hour_constraints, outflow = _distflow(
            network, p_cons, base.q, config.voltage_margin, prefix=f"h{step}_"
        )
        slack_draw = outflow + p_cons[network.slack_bus]
        constraints += hour_constraints
        constraints.append(
            soe[step + 1] == soe[step]
            + cp.multiply(eta_ch * dt / capacity, charge[step])
            - cp.multiply(dt / (eta_dis * capacity), discharge[step])
        )
        objective += dt * (
            network.s_base * profiles.price_grid[t] * slack_draw + profiles.ess_prices(t, k) @ power
        )
        blocks.append(variables)

    program = cp.Problem(cp.Minimize(objective), constraints)
    try:
        program.solve(solver=cp.CLARABEL, tol_feas=config.feasibility_tol, tol_gap_abs=config.gap_tol, tol_gap_rel=config.gap_tol)
    except cp.error.SolverError as e:
        raise DispatchInfeasibleError(f"Multi-period solve failed: {e}")
    if program.status not in ACCEPTED_STATUSES:
        raise DispatchInfeasibleError(f"Multi-period relaxation returned {program.status}")

    gap = max((float(np.max(_cone_gap(v))) for v in blocks), default=0.0)
    logger.info(f"Multi-period dispatch over {steps} hours: objective {program.value:.3f} GBP, max cone gap {gap:.2e}")
    return MultiPeriodSolution(
        power_kw=np.asarray(charge.value - discharge.value, dtype=float),
        soe=np.asarray(soe.value, dtype=float),
        objective=float(program.value),
        max_gap=gap,
    )
