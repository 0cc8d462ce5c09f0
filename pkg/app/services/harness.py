# app/services/harness.py
"""Training, execution, baselines and metrics for the screened SAC dispatcher.

Output layout under RunConfig.out_dir:

    <screening>/agent.npz           policy, critics, optimizers, normalizer
    <screening>/guard.npz           guard (guard screening only)
    <screening>/train_trajectory.csv
    <screening>/training_curve.csv
    <screening>/unsafe_counts.csv
    <screening>/resume/             written when a run aborts
    evaluation/                     per-method trajectories and reports
"""
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from app.services.assets import DeviceSet, ProfileSet, ieee33_base_loads, load_base_loads, load_devices, table_one_devices
from app.services.config import EnvConfig, RunConfig
from app.services.env import DispatchEnv, ObservationNormalizer, StepResult, load_dataset, synth_dataset
from app.services.errors import ConfigurationError, ContractViolation, ReadinessError, Sa2coError
from app.services.grid import NetworkModel, PowerFlowSolver, ieee33_network, load_network
from app.services.guard import (
    GuardModel,
    HighRiskSet,
    feature_scale_from_profiles,
    generate_guard_samples,
    injection_features,
    train_guard,
)
from app.services.run_registry import RegistryRecorder
from app.services.sac_agent import SacAgent, sample_action
from app.services.safe_dispatch import SafeDispatcher, solve_multi_period

logger = logging.getLogger(__name__)

SCREENING_DIRS = {"guard": "guard", "acpf": "acpf", "none": "none"}
BASELINE_KINDS = ("uncontrolled", "perfect_foresight", "sac_plain", "acpf_sac")
METHOD_LABELS = {
    "uncontrolled": "Uncontrolled",
    "perfect_foresight": "Optimization",
    "sac_plain": "SAC",
    "acpf_sac": "ACPF-SAC",
    "sa2co": "SA2CO",
}
CSV_FLOAT = "%.10g"


@dataclass
class Scenario:
    network: NetworkModel
    devices: DeviceSet
    profiles: ProfileSet
    high_risk: HighRiskSet
    solver: PowerFlowSolver


def build_network(env_cfg: EnvConfig) -> NetworkModel:
    if env_cfg.branches_path:
        meta_path = Path(env_cfg.network_meta_path) if env_cfg.network_meta_path else None
        return replace(
            load_network(Path(env_cfg.branches_path), meta_path),
            voltage_limits=env_cfg.voltage_limits,
        )
    return ieee33_network(env_cfg.voltage_limits)


def scenario_assets(env_cfg: EnvConfig) -> Tuple[NetworkModel, DeviceSet, Tuple[np.ndarray, np.ndarray]]:
    network = build_network(env_cfg)
    devices = load_devices(Path(env_cfg.devices_path)) if env_cfg.devices_path else table_one_devices()
    base_loads = (
        load_base_loads(Path(env_cfg.base_loads_path), network)
        if env_cfg.base_loads_path
        else ieee33_base_loads(network)
    )
    return network, devices, base_loads


def build_scenario(config: RunConfig, profiles: Optional[ProfileSet] = None) -> Scenario:
    """Network, devices, profiles and high-risk set described by the config"""
    env_cfg = config.env
    network, devices, base_loads = scenario_assets(env_cfg)
    if profiles is None:
        if env_cfg.data_path:
            profiles = load_dataset(Path(env_cfg.data_path), devices, base_loads, env_cfg.train_days)
        else:
            profiles = synth_dataset(config.seed, env_cfg.synth_days, devices, base_loads, env_cfg.train_days)

    high_risk = HighRiskSet(tuple(env_cfg.high_risk_indices)).validate(network)
    return Scenario(network, devices, profiles, high_risk, PowerFlowSolver(network))


# ---------------------------------------------------------------------------
# Screening strategies
# ---------------------------------------------------------------------------

class GuardScreen:
    """Learned screen; before readiness exact power flow decides and trains the guard"""

    name = "guard"

    def __init__(self, guard, solver: PowerFlowSolver, high_risk: HighRiskSet, learn: bool = True):
        self.guard = guard
        self.solver = solver
        self.high_risk = high_risk
        self.learn = learn

    def screen(self, env: DispatchEnv, power_kw: np.ndarray) -> bool:
        inj = env.injections(power_kw)
        if self.guard.ready:
            _, safe = self.guard.assess(injection_features(inj))
            return safe
        if not self.learn:
            raise ReadinessError("Guard is not ready; execution refuses to fall back to exact power flow")

        solution = self.solver.solve(inj)
        if not solution.converged:
            return False
        labels = solution.magnitude[list(self.high_risk.buses)]
        self.guard.observe(injection_features(inj), labels)
        lower, upper = env.limits
        return bool(np.all((labels >= lower) & (labels <= upper)))


class AcpfScreen:
    """Exact power-flow screen over every bus"""

    name = "acpf"

    def __init__(self, solver: PowerFlowSolver):
        self.solver = solver

    def screen(self, env: DispatchEnv, power_kw: np.ndarray) -> bool:
        solution = self.solver.solve(env.injections(power_kw))
        if not solution.converged:
            return False
        lower, upper = env.limits
        magnitudes = solution.magnitude
        return bool(np.all((magnitudes >= lower) & (magnitudes <= upper)))


class NoScreen:
    name = "none"

    def screen(self, env: DispatchEnv, power_kw: np.ndarray) -> bool:
        return True


def make_screen(kind: str, scenario: Scenario, guard=None, learn: bool = True):
    if kind == "guard":
        if guard is None:
            raise ConfigurationError("Guard screening needs a guard model")
        return GuardScreen(guard, scenario.solver, scenario.high_risk, learn=learn)
    if kind == "acpf":
        return AcpfScreen(scenario.solver)
    if kind == "none":
        return NoScreen()
    raise ConfigurationError(f"Unknown screening '{kind}'")


def screened_step(env: DispatchEnv, action: np.ndarray, screen, dispatcher: SafeDispatcher) -> Tuple[StepResult, float]:
    """
    Screen the proposed action, fall back when flagged, execute

    Returns the step result and the decision time in seconds (screen plus
    fallback, excluding the environment's own power flow and logging).
    """
    started = time.perf_counter()
    proposal_kw = env.denormalize(action)
    safe = screen.screen(env, proposal_kw)
    if safe:
        elapsed = time.perf_counter() - started
        result = env.step_kw(proposal_kw)
        if isinstance(screen, NoScreen) and (result.violations > 0 or result.acpf_failed):
            # plain SAC: count the proposal as unsafe after the fact
            result = _mark_unsafe(result)
        return result, elapsed

    fallback = dispatcher.dispatch(env.profiles, env.ess_states, env.t, proposal_kw, env.config.dt)
    elapsed = time.perf_counter() - started
    return env.step_kw(fallback.power_kw, used_fallback=True, unsafe_proposal=True), elapsed


def _mark_unsafe(result: StepResult) -> StepResult:
    return replace(result, unsafe_proposal=True)


def trajectory_row(env: DispatchEnv, result: StepResult, episode: int, step: int, high_risk: HighRiskSet) -> dict:
    row = {
        "episode": episode,
        "step": step,
        "t": result.t,
        "timestamp": str(env.profiles.timestamps[result.t]),
    }
    for k, unit in enumerate(env.ess_units):
        row[f"p_{unit.name.lower()}_kw"] = result.executed_action_kw[k]
    for k, unit in enumerate(env.ess_units):
        row[f"soe_{unit.name.lower()}"] = result.soe[k]
    row.update({
        "p_r_kw": result.p_r_kw,
        "step_cost": result.step_cost,
        "reward": result.reward,
        "violations": result.violations,
        "used_fallback": int(result.used_fallback),
        "unsafe_proposal": int(result.unsafe_proposal),
        "acpf_failed": int(result.acpf_failed),
        "v_min": result.v_min,
        "v_max": result.v_max,
    })
    for label, magnitude in zip(high_risk.labels, result.high_risk_voltages):
        row[f"v_bus{label}"] = magnitude
    return row


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT)
    return path


def _episode_starts(profiles: ProfileSet, split: str, length: int) -> Tuple[int, int]:
    hours = profiles.split_indices(split)
    if hours.size == 0:
        raise ConfigurationError(f"Dataset has no '{split}' hours")
    first, last = int(hours.min()), int(hours.max()) + 1
    if last - first < length:
        raise ConfigurationError(
            f"'{split}' split spans {last - first} hours, shorter than the {length}-step episode"
        )
    return first, last - length


def _normalizer_arrays(normalizer: ObservationNormalizer) -> Dict[str, np.ndarray]:
    return {f"normalizer.{key}": value for key, value in normalizer.state_dict().items()}


def _restore_normalizer(arrays: Dict[str, np.ndarray], dim: int) -> ObservationNormalizer:
    normalizer = ObservationNormalizer(dim)
    if "normalizer.mean" in arrays:
        normalizer.load_state_dict({
            "count": arrays["normalizer.count"],
            "mean": arrays["normalizer.mean"],
            "m2": arrays["normalizer.m2"],
        })
    return normalizer


class _Identity:
    frozen = False

    def __call__(self, obs):
        return np.asarray(obs, dtype=float)

    def normalize(self, obs):
        return np.asarray(obs, dtype=float)

    def freeze(self):
        pass

    def state_dict(self):
        return {}


def build_guard(config: RunConfig, scenario: Scenario) -> GuardModel:
    """Fresh, loaded or pre-trained guard according to GuardConfig"""
    cfg = config.guard
    if cfg.checkpoint_path:
        return GuardModel.load(Path(cfg.checkpoint_path), scenario.network)

    scale = feature_scale_from_profiles(scenario.network, scenario.profiles, scenario.devices.ess)
    guard = GuardModel(scenario.network, scenario.high_risk, cfg, feature_scale=scale, seed=config.seed)
    if cfg.pretrain_samples > 0:
        rng = np.random.default_rng(config.seed + 1)
        features, labels = generate_guard_samples(
            scenario.network, scenario.profiles, scenario.devices.ess, scenario.high_risk,
            cfg.pretrain_samples, rng, scenario.solver, hours=scenario.profiles.split_indices("train"),
        )
        train_guard(guard, features, labels)
    return guard


@dataclass
class TrainingResult:
    agent: SacAgent
    guard: Optional[GuardModel]
    normalizer: object
    curve: pd.DataFrame
    trajectory: pd.DataFrame
    output_dir: Path
    guard_ready_episode: Optional[int] = None
    training_minutes: float = 0.0
    paths: Dict[str, Path] = field(default_factory=dict)


def train_sa2co(
    config: RunConfig,
    guard=None,
    scenario: Optional[Scenario] = None,
    resume_from: Optional[Path] = None,
    registry: bool = True,
) -> TrainingResult:
    """
    Episodic training with screened execution

    Per step the agent proposes an action (uniform random during warmup),
    the configured screen accepts it or hands the hour to the safe-dispatch
    fallback, and the executed action is stored in replay. At the end of
    each episode the agent performs one update per step taken. Any domain
    fault aborts the run after writing a resumable checkpoint.
    """
    started = time.perf_counter()
    scenario = scenario or build_scenario(config)
    out = config.output_path / SCREENING_DIRS[config.screening]
    out.mkdir(parents=True, exist_ok=True)

    env = DispatchEnv(scenario.network, scenario.profiles, scenario.devices.ess, config.env, config.seed, scenario.solver)
    agent = SacAgent(env.obs_dim, env.action_dim, config.sac, seed=config.seed)
    normalizer = ObservationNormalizer(env.obs_dim) if config.env.normalize_observations else _Identity()
    if config.screening == "guard" and guard is None:
        guard = build_guard(config, scenario)
    screen = make_screen(config.screening, scenario, guard, learn=True)
    dispatcher = SafeDispatcher(scenario.network, scenario.devices.ess, config.dispatch, scenario.solver)

    first_episode, global_step = 0, 0
    resumed_ready_episode = None
    curve_rows: List[dict] = []
    trajectory_rows: List[dict] = []
    if resume_from is not None:
        agent, arrays = SacAgent.load(Path(resume_from) / "agent.npz")
        if config.env.normalize_observations:
            normalizer = _restore_normalizer(arrays, env.obs_dim)
        first_episode = int(arrays["progress.episode"])
        global_step = int(arrays["progress.global_step"])
        if config.screening == "guard" and (Path(resume_from) / "guard.npz").exists():
            guard = GuardModel.load(Path(resume_from) / "guard.npz", scenario.network)
            screen = make_screen("guard", scenario, guard, learn=True)
        curve_path = Path(resume_from) / "training_curve.csv"
        if curve_path.exists():
            curve_rows = pd.read_csv(curve_path).to_dict("records")
        trajectory_path = Path(resume_from) / "train_trajectory.csv"
        if trajectory_path.exists():
            trajectory_rows = pd.read_csv(trajectory_path).to_dict("records")
        if "progress.ready_episode" in arrays and int(arrays["progress.ready_episode"]) != -2:
            resumed_ready_episode = int(arrays["progress.ready_episode"])
        logger.info(f"Resuming from {resume_from} at episode {first_episode}")

    length = config.env.episode_length
    first_start, last_start = _episode_starts(scenario.profiles, "train", length)
    start_rng = np.random.default_rng(config.seed + 7919)
    for _ in range(first_episode):
        start_rng.integers(first_start, last_start + 1)
    total_steps = config.episodes * length

    recorder = RegistryRecorder(enabled=registry)
    recorder.start(
        run_name=config.run_name,
        kind="train",
        screening=config.screening,
        seed=config.seed,
        episodes_planned=config.episodes,
        output_dir=str(out),
        config=json.loads(config.model_dump_json()),
    )

    ready_episode = resumed_ready_episode
    if ready_episode is None and guard is not None and guard.ready:
        ready_episode = -1

    episode = first_episode
    episode_start_step = global_step
    try:
        for episode in range(first_episode, config.episodes):
            episode_start_step = global_step
            obs = normalizer(env.reset(int(start_rng.integers(first_start, last_start + 1))))
            cum_reward, total_cost = 0.0, 0.0
            unsafe = fallbacks = executed_violations = 0
            step = 0
            while not env.done:
                if global_step < config.sac.warmup_steps:
                    action = agent.random_action()
                else:
                    action = agent.act(obs, stochastic=True)
                result, _ = screened_step(env, action, screen, dispatcher)
                next_obs = normalizer(result.next_obs)
                # Episode ends are time limits, not terminal states
                agent.remember(obs, result.executed_action, result.reward, next_obs, False)

                trajectory_rows.append(trajectory_row(env, result, episode, step, scenario.high_risk))
                cum_reward += result.reward
                total_cost += result.step_cost
                unsafe += int(result.unsafe_proposal)
                fallbacks += int(result.used_fallback)
                executed_violations += int(_violates(result, env.limits))
                obs = next_obs
                global_step += 1
                step += 1

            q_losses, pi_losses = [], []
            if global_step >= config.sac.warmup_steps:
                for _ in range(step):
                    stats = agent.update(progress=global_step / total_steps)
                    if stats is not None:
                        q_losses.append(stats["q_loss"])
                        pi_losses.append(stats["pi_loss"])

            guard_ready = bool(guard is not None and guard.ready)
            if guard_ready and ready_episode is None:
                ready_episode = episode
                if hasattr(guard, "save"):
                    guard.save(out / "guard.npz")

            row = {
                "episode": episode,
                "cum_reward": cum_reward,
                "mean_q_loss": float(np.mean(q_losses)) if q_losses else float("nan"),
                "mean_pi_loss": float(np.mean(pi_losses)) if pi_losses else float("nan"),
                "unsafe_proposals": unsafe,
                "executed_violations": executed_violations,
                "fallback_count": fallbacks,
                "guard_ready": int(guard_ready),
                "total_cost": total_cost,
            }
            curve_rows.append(row)
            recorder.episode(row)
            logger.info(
                f"Episode {episode}: reward {cum_reward:.3f}, cost {total_cost:.2f} GBP, "
                f"unsafe proposals {unsafe}, fallbacks {fallbacks}, violations {executed_violations}, "
                f"guard ready {guard_ready}"
            )
    except Sa2coError as e:
        resume = out / "resume"
        logger.error(f"Training aborted in episode {episode}: {e}; writing resumable checkpoint to {resume}")
        # The interrupted episode is replayed on resume
        finished_curve = [row for row in curve_rows if row["episode"] < episode]
        if finished_curve:
            _write_csv(pd.DataFrame(finished_curve), resume / "training_curve.csv")
        finished_steps = [row for row in trajectory_rows if row["episode"] < episode]
        if finished_steps:
            _write_csv(pd.DataFrame(finished_steps), resume / "train_trajectory.csv")
        agent.save(resume / "agent.npz", include_buffer=True, extra_arrays={
            **_normalizer_arrays_if(normalizer),
            "progress.episode": np.array(episode),
            "progress.global_step": np.array(episode_start_step),
            "progress.ready_episode": np.array(-2 if ready_episode is None else ready_episode),
        })
        if guard is not None and hasattr(guard, "save"):
            guard.save(resume / "guard.npz")
        recorder.finish("aborted", error=str(e))
        raise

    minutes = (time.perf_counter() - started) / 60.0
    if isinstance(normalizer, ObservationNormalizer):
        normalizer.freeze()

    curve = pd.DataFrame(curve_rows)
    trajectory = pd.DataFrame(trajectory_rows)
    paths = {
        "trajectory": _write_csv(trajectory, out / "train_trajectory.csv"),
        "curve": _write_csv(curve, out / "training_curve.csv"),
        "unsafe_counts": _write_csv(curve[["episode", "unsafe_proposals"]], out / "unsafe_counts.csv"),
        "agent": agent.save(out / "agent.npz", extra_arrays={
            **_normalizer_arrays_if(normalizer),
            "progress.episode": np.array(config.episodes),
            "progress.global_step": np.array(global_step),
            "progress.training_minutes": np.array(minutes),
        }),
    }
    if guard is not None and hasattr(guard, "save"):
        paths["guard"] = guard.save(out / "guard.npz")

    recorder.finish("finished", guard_ready_episode=ready_episode, training_minutes=minutes)
    logger.info(f"Training finished in {minutes:.2f} min; outputs in {out}")
    return TrainingResult(
        agent=agent,
        guard=guard,
        normalizer=normalizer,
        curve=curve,
        trajectory=trajectory,
        output_dir=out,
        guard_ready_episode=ready_episode,
        training_minutes=minutes,
        paths=paths,
    )


def _normalizer_arrays_if(normalizer) -> Dict[str, np.ndarray]:
    return _normalizer_arrays(normalizer) if isinstance(normalizer, ObservationNormalizer) else {}


def _violates(result: StepResult, limits: Tuple[float, float]) -> bool:
    if result.acpf_failed:
        return True
    return bool(result.v_min < limits[0] or result.v_max > limits[1])


# ---------------------------------------------------------------------------
# Execution and evaluation
# ---------------------------------------------------------------------------

class EvalReport(BaseModel):
    method: str
    days: int = 0
    average_daily_cost: float = 0.0  # GBP/day
    improvement_pct: Optional[float] = None
    executed_violations: int = 0
    unsafe_proposals: int = 0
    fallback_count: int = 0
    mean_decision_seconds: float = 0.0
    training_minutes: Optional[float] = None
    unsafe_per_episode: List[int] = Field(default_factory=list)
    voltage_summary: List[Dict[str, float]] = Field(default_factory=list)


def improvement_pct(uncontrolled_cost: float, method_cost: float) -> float:
    """(uncontrolled - method) / uncontrolled * 100"""
    if uncontrolled_cost == 0:
        return 0.0
    return (uncontrolled_cost - method_cost) / uncontrolled_cost * 100.0


def evaluation_days(profiles: ProfileSet, split: str = "test") -> List[int]:
    """Start hours of the complete 24-hour days in a split"""
    hours = profiles.split_indices(split)
    if hours.size == 0:
        return []
    first, last = int(hours.min()), int(hours.max()) + 1
    return list(range(first, last - 23, 24))


def execute_episode(
    policy,
    guard,
    env: DispatchEnv,
    normalizer,
    dispatcher: SafeDispatcher,
    start: int,
    screen=None,
    episode: int = 0,
    length: int = 24,
    initial_soe: Optional[float] = None,
) -> Tuple[List[dict], List[float]]:
    """
    Deterministic policy rollout with screening

    Returns the trajectory rows and the per-decision times (seconds).

    Raises:
        ReadinessError: guard screening with a guard that is not ready
    """
    if screen is None:
        if guard is None or not guard.ready:
            raise ReadinessError("Execution needs a ready guard")
        screen = GuardScreen(guard, env.solver, HighRiskSet(tuple(env.high_risk.tolist())), learn=False)

    high_risk = HighRiskSet(tuple(env.high_risk.tolist()))
    obs = normalizer.normalize(env.reset(start, initial_soe, episode_length=length))
    rows, timings = [], []
    step = 0
    while not env.done:
        decision_started = time.perf_counter()
        action, _ = sample_action(policy, obs, stochastic=False)
        policy_time = time.perf_counter() - decision_started
        result, screen_time = screened_step(env, action, screen, dispatcher)
        timings.append(policy_time + screen_time)
        rows.append(trajectory_row(env, result, episode, step, high_risk))
        obs = normalizer.normalize(result.next_obs)
        step += 1
    return rows, timings


def evaluate_metrics(
    trajectories: Sequence[pd.DataFrame],
    method: str = "sa2co",
    limits: Tuple[float, float] = (0.95, 1.05),
    uncontrolled_cost: Optional[float] = None,
    decision_seconds: Optional[Sequence[float]] = None,
    training_minutes: Optional[float] = None,
) -> EvalReport:
    """Aggregate per-day trajectories into an EvalReport"""
    trajectories = [t for t in trajectories if t is not None and len(t)]
    if not trajectories:
        raise ContractViolation("evaluate_metrics needs at least one non-empty trajectory")

    frame = pd.concat(trajectories, ignore_index=True)
    daily_costs = [float(t["step_cost"].sum()) for t in trajectories]
    average = float(np.mean(daily_costs))
    violating = (frame["acpf_failed"] > 0) | (frame["v_min"] < limits[0]) | (frame["v_max"] > limits[1])

    summary = []
    for column in [c for c in frame.columns if c.startswith("v_bus")]:
        values = frame[column].dropna().to_numpy()
        if values.size == 0:
            continue
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        summary.append({
            "bus": int(column[len("v_bus"):]),
            "min": float(values.min()),
            "q1": float(q1),
            "median": float(median),
            "q3": float(q3),
            "max": float(values.max()),
        })

    return EvalReport(
        method=method,
        days=len(trajectories),
        average_daily_cost=average,
        improvement_pct=None if uncontrolled_cost is None else improvement_pct(uncontrolled_cost, average),
        executed_violations=int(violating.sum()),
        unsafe_proposals=int(frame["unsafe_proposal"].sum()),
        fallback_count=int(frame["used_fallback"].sum()),
        mean_decision_seconds=float(np.mean(decision_seconds)) if decision_seconds else 0.0,
        training_minutes=training_minutes,
        unsafe_per_episode=[int(t["unsafe_proposal"].sum()) for t in trajectories],
        voltage_summary=summary,
    )


@dataclass
class TrainedArtifacts:
    policy: object
    normalizer: object
    guard: Optional[GuardModel]
    training_minutes: Optional[float]


def load_trained(config: RunConfig, screening: str, scenario: Scenario) -> TrainedArtifacts:
    directory = config.output_path / SCREENING_DIRS[screening]
    agent_path = directory / "agent.npz"
    if not agent_path.exists():
        raise ConfigurationError(
            f"No trained agent at {agent_path}; run 'train' with screening '{screening}' first"
        )
    agent, arrays = SacAgent.load(agent_path)
    normalizer = _restore_normalizer(arrays, agent.obs_dim) if "normalizer.mean" in arrays else _Identity()
    normalizer.freeze()
    guard = None
    if screening == "guard":
        guard_path = directory / "guard.npz"
        if not guard_path.exists():
            raise ConfigurationError(f"No guard checkpoint at {guard_path}")
        guard = GuardModel.load(guard_path, scenario.network)
    minutes = float(arrays["progress.training_minutes"]) if "progress.training_minutes" in arrays else None
    return TrainedArtifacts(agent.policy, normalizer, guard, minutes)


def _rollout_days(config: RunConfig, scenario: Scenario, runner) -> Tuple[List[pd.DataFrame], List[float]]:
    env = DispatchEnv(scenario.network, scenario.profiles, scenario.devices.ess, config.env, config.seed, scenario.solver)
    days = evaluation_days(scenario.profiles, "test")
    if not days:
        raise ConfigurationError("Dataset has no complete test day to evaluate")
    trajectories, timings = [], []
    for day, start in enumerate(days):
        rows, times = runner(env, day, start)
        trajectories.append(pd.DataFrame(rows))
        timings.extend(times)
    return trajectories, timings


def _uncontrolled_runner(scenario: Scenario):
    def run(env: DispatchEnv, day: int, start: int):
        env.reset(start, episode_length=24)
        rows = []
        step = 0
        while not env.done:
            result = env.step_kw(np.zeros(env.n_ess))
            rows.append(trajectory_row(env, result, day, step, scenario.high_risk))
            step += 1
        return rows, []
    return run


def _foresight_runner(config: RunConfig, scenario: Scenario):
    def run(env: DispatchEnv, day: int, start: int):
        env.reset(start, episode_length=24)
        started = time.perf_counter()
        plan = solve_multi_period(
            scenario.network, scenario.profiles, scenario.devices.ess, range(start, start + 24),
            env.soe, env.config.dt, config.dispatch,
        )
        elapsed = time.perf_counter() - started
        rows = []
        for step in range(24):
            result = env.step_kw(plan.power_kw[step])
            rows.append(trajectory_row(env, result, day, step, scenario.high_risk))
        return rows, [elapsed / 24.0] * 24
    return run


def _policy_runner(config: RunConfig, scenario: Scenario, artifacts: TrainedArtifacts, screen):
    dispatcher = SafeDispatcher(scenario.network, scenario.devices.ess, config.dispatch, scenario.solver)

    def run(env: DispatchEnv, day: int, start: int):
        return execute_episode(
            artifacts.policy, artifacts.guard, env, artifacts.normalizer, dispatcher, start,
            screen=screen, episode=day, length=24, initial_soe=config.env.initial_soe,
        )
    return run


def run_method(
    method: str,
    config: RunConfig,
    scenario: Optional[Scenario] = None,
    uncontrolled_cost: Optional[float] = None,
) -> Tuple[EvalReport, List[pd.DataFrame]]:
    """Evaluate one method (baseline kind or 'sa2co') over every complete test day"""
    scenario = scenario or build_scenario(config)
    minutes = None
    if method == "uncontrolled":
        runner = _uncontrolled_runner(scenario)
    elif method == "perfect_foresight":
        runner = _foresight_runner(config, scenario)
    elif method == "sac_plain":
        artifacts = load_trained(config, "none", scenario)
        runner = _policy_runner(config, scenario, artifacts, NoScreen())
        minutes = artifacts.training_minutes
    elif method == "acpf_sac":
        artifacts = load_trained(config, "acpf", scenario)
        runner = _policy_runner(config, scenario, artifacts, AcpfScreen(scenario.solver))
        minutes = artifacts.training_minutes
    elif method == "sa2co":
        artifacts = load_trained(config, "guard", scenario)
        if not artifacts.guard.ready:
            raise ReadinessError("Saved guard never reached readiness; cannot execute")
        screen = GuardScreen(artifacts.guard, scenario.solver, scenario.high_risk, learn=False)
        runner = _policy_runner(config, scenario, artifacts, screen)
        minutes = artifacts.training_minutes
    else:
        raise ConfigurationError(f"Unknown method '{method}'; expected one of {BASELINE_KINDS + ('sa2co',)}")

    trajectories, timings = _rollout_days(config, scenario, runner)
    report = evaluate_metrics(
        trajectories, method, scenario.network.voltage_limits, uncontrolled_cost, timings, minutes
    )
    logger.info(
        f"{METHOD_LABELS[method]}: {report.average_daily_cost:.3f} GBP/day over {report.days} days, "
        f"{report.executed_violations} violating steps, {report.fallback_count} fallbacks"
    )
    return report, trajectories


def run_baseline(kind: str, config: RunConfig, scenario: Optional[Scenario] = None) -> EvalReport:
    if kind not in BASELINE_KINDS:
        raise ConfigurationError(f"Unknown baseline '{kind}'; expected one of {BASELINE_KINDS}")
    scenario = scenario or build_scenario(config)
    uncontrolled = None
    if kind != "uncontrolled":
        uncontrolled = run_method("uncontrolled", config, scenario)[0].average_daily_cost
    report, trajectories = run_method(kind, config, scenario, uncontrolled)
    write_evaluation(config.output_path / "evaluation", report, trajectories)
    return report


def write_evaluation(directory: Path, report: EvalReport, trajectories: Sequence[pd.DataFrame]) -> Dict[str, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "trajectory": _write_csv(pd.concat(trajectories, ignore_index=True), directory / f"{report.method}_trajectory.csv"),
        "voltages": _write_csv(pd.DataFrame(report.voltage_summary), directory / f"{report.method}_voltage_distribution.csv"),
        "unsafe": _write_csv(
            pd.DataFrame({"episode": range(len(report.unsafe_per_episode)), "unsafe_proposals": report.unsafe_per_episode}),
            directory / f"{report.method}_unsafe_counts.csv",
        ),
    }
    report_path = directory / f"{report.method}_report.json"
    report_path.write_text(report.model_dump_json(indent=2))
    paths["report"] = report_path
    return paths


def evaluate(config: RunConfig, scenario: Optional[Scenario] = None, registry: bool = True) -> pd.DataFrame:
    """
    Compare every available method on the test split

    SAC variants without a trained checkpoint are skipped with a warning.
    Writes evaluation/comparison.csv and evaluation/metrics.csv.
    """
    scenario = scenario or build_scenario(config)
    directory = config.output_path / "evaluation"
    recorder = RegistryRecorder(enabled=registry)
    recorder.start(
        run_name=config.run_name, kind="evaluate", screening=config.screening, seed=config.seed,
        episodes_planned=0, output_dir=str(directory), config=json.loads(config.model_dump_json()),
    )

    reports: List[EvalReport] = []
    base_report, base_traj = run_method("uncontrolled", config, scenario)
    base_report.improvement_pct = 0.0
    write_evaluation(directory, base_report, base_traj)
    reports.append(base_report)
    for method in ("perfect_foresight", "sac_plain", "acpf_sac", "sa2co"):
        try:
            report, trajectories = run_method(method, config, scenario, base_report.average_daily_cost)
        except (ConfigurationError, ReadinessError) as e:
            logger.warning(f"Skipping {METHOD_LABELS[method]}: {e}")
            continue
        write_evaluation(directory, report, trajectories)
        reports.append(report)

    for report in reports:
        recorder.evaluation(report.method, report.model_dump())
    recorder.finish("finished")

    comparison = pd.DataFrame([
        {
            "method": METHOD_LABELS[r.method],
            "training_minutes": r.training_minutes,
            "execution_seconds": r.mean_decision_seconds,
            "average_daily_cost": r.average_daily_cost,
            "improvement_pct": r.improvement_pct,
        }
        for r in reports
    ])
    _write_csv(comparison, directory / "comparison.csv")
    _write_csv(
        pd.DataFrame([r.model_dump(exclude={"voltage_summary", "unsafe_per_episode"}) for r in reports]),
        directory / "metrics.csv",
    )
    return comparison
