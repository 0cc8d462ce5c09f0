# app/services/env.py
"""Storage-dispatch environment and time-series ingestion.

Observation layout (raw, before standardization):
    per-bus active load (N, kW) | slack draw P_r (1, kW) | last executed ESS
    powers (K, kW) | SoE (K) | lower bounds (K, kW) | upper bounds (K, kW) |
    ESS node price for the next 24 hours (24, GBP/kWh)

The price window wraps around to the start of the series when it runs past
the last hour.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.services.assets import (
    DeviceSet,
    EssState,
    EssUnit,
    ProfileSet,
    ess_step,
    net_injections,
    power_bounds,
)
from app.services.config import EnvConfig
from app.services.errors import (
    ConfigurationError,
    ContractViolation,
    EnvironmentDoneError,
    IngestionError,
    ShapeError,
)
from app.services.grid import InjectionVector, NetworkModel, PowerFlowSolver, VoltageSolution

logger = logging.getLogger(__name__)

PRICE_WINDOW = 24
DATASET_START = "2019-09-21"
DATASET_COLUMNS = ["timestamp", "load_factor", "pv_factor", "wt_factor", "price_gbp_per_kwh"]


@dataclass(frozen=True)
class StepResult:
    next_obs: np.ndarray
    reward: float
    step_cost: float  # GBP
    violations: int  # delta: high-risk buses outside limits
    executed_action_kw: np.ndarray
    executed_action: np.ndarray  # same action normalized to [-1, 1]
    done: bool
    used_fallback: bool = False
    unsafe_proposal: bool = False
    acpf_failed: bool = False
    t: int = 0
    p_r_kw: float = 0.0
    soe: Optional[np.ndarray] = None  # after the step
    high_risk_voltages: Optional[np.ndarray] = None
    v_min: float = float("nan")
    v_max: float = float("nan")


def build_profiles(
    timestamps: pd.DatetimeIndex,
    load_factor: np.ndarray,
    pv_factor: np.ndarray,
    wt_factor: np.ndarray,
    price: np.ndarray,
    devices: DeviceSet,
    base_load_p: np.ndarray,
    base_load_q: np.ndarray,
    split: Optional[np.ndarray] = None,
    price_node: Optional[np.ndarray] = None,
) -> ProfileSet:
    """Expand aggregate factor series into per-bus loads and per-unit generation"""
    load_factor = np.asarray(load_factor, dtype=float)
    pv_factor = np.asarray(pv_factor, dtype=float)
    wt_factor = np.asarray(wt_factor, dtype=float)
    pv_rating = np.array([unit.p_max for unit in devices.pv], dtype=float)
    wt_rating = np.array([unit.p_max for unit in devices.wt], dtype=float)

    return ProfileSet(
        timestamps=timestamps,
        load_p=np.outer(load_factor, base_load_p),
        load_q=np.outer(load_factor, base_load_q),
        pv=np.outer(pv_factor, pv_rating),
        wt=np.outer(wt_factor, wt_rating),
        price_grid=np.asarray(price, dtype=float),
        price_node=np.asarray(price if price_node is None else price_node, dtype=float),
        pv_units=devices.pv,
        wt_units=devices.wt,
        split=split,
        load_factor=load_factor,
        pv_factor=pv_factor,
        wt_factor=wt_factor,
        base_load_p=np.asarray(base_load_p, dtype=float),
        base_load_q=np.asarray(base_load_q, dtype=float),
    )


def default_split(hours: int, train_days: int) -> np.ndarray:
    split = np.full(hours, "test", dtype=object)
    split[: min(hours, train_days * 24)] = "train"
    return split


def load_dataset(
    path: Path,
    devices: DeviceSet,
    base_loads: Tuple[np.ndarray, np.ndarray],
    train_days: int = 20,
) -> ProfileSet:
    """
    Load an hourly time-series CSV

    Columns: timestamp,load_factor,pv_factor,wt_factor,price_gbp_per_kwh
    plus an optional split column (train/test) and optional per-ESS price
    columns price_ess1..price_essK. Without a split column the first
    train_days days are training data.

    Raises:
        IngestionError: with the 1-based data row of the first bad record
    """
    frame = pd.read_csv(path)
    missing = set(DATASET_COLUMNS) - set(frame.columns)
    if missing:
        raise IngestionError(f"{path} lacks columns {sorted(missing)}")
    if frame.empty:
        raise IngestionError(f"{path} holds no rows")

    try:
        timestamps = pd.DatetimeIndex(pd.to_datetime(frame["timestamp"]))
    except (ValueError, TypeError) as e:
        raise IngestionError(f"Unparseable timestamp: {e}")

    steps = np.diff(timestamps.values).astype("timedelta64[s]").astype(np.int64)
    bad = np.flatnonzero(steps != 3600)
    if bad.size:
        raise IngestionError("timestamps are not consecutive hours", row=int(bad[0]) + 2)

    numeric = ["load_factor", "pv_factor", "wt_factor", "price_gbp_per_kwh"]
    values = frame[numeric].apply(pd.to_numeric, errors="coerce")
    non_finite = ~np.isfinite(values.to_numpy(dtype=float))
    if non_finite.any():
        raise IngestionError("non-numeric or missing value", row=int(np.flatnonzero(non_finite.any(axis=1))[0]) + 1)
    for column in ("load_factor", "pv_factor", "wt_factor"):
        negative = np.flatnonzero(values[column].to_numpy() < 0)
        if negative.size:
            raise IngestionError(f"negative {column}", row=int(negative[0]) + 1)

    if "split" in frame.columns:
        split = frame["split"].astype(str).str.strip().str.lower().to_numpy(dtype=object)
        unknown = np.flatnonzero(~np.isin(split, ["train", "test"]))
        if unknown.size:
            raise IngestionError(f"unknown split marker '{split[unknown[0]]}'", row=int(unknown[0]) + 1)
    else:
        split = default_split(len(frame), train_days)

    node_columns = sorted(
        (c for c in frame.columns if c.startswith("price_ess")),
        key=lambda c: int(c[len("price_ess"):]),
    )
    price_node = None
    if node_columns:
        if len(node_columns) != len(devices.ess):
            raise IngestionError(f"{len(node_columns)} per-node price columns for {len(devices.ess)} ESS units")
        price_node = frame[node_columns].to_numpy(dtype=float)

    profiles = build_profiles(
        timestamps=timestamps,
        load_factor=values["load_factor"].to_numpy(),
        pv_factor=values["pv_factor"].to_numpy(),
        wt_factor=values["wt_factor"].to_numpy(),
        price=values["price_gbp_per_kwh"].to_numpy(),
        devices=devices,
        base_load_p=base_loads[0],
        base_load_q=base_loads[1],
        split=split,
        price_node=price_node,
    )
    logger.info(f"Loaded dataset {path}: {len(profiles)} hours, {len(profiles.split_indices('train'))} train")
    return profiles


def _bump(hour: np.ndarray, centre: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((hour - centre) / width) ** 2)


def synth_dataset(
    seed: int,
    days: int,
    devices: DeviceSet,
    base_loads: Tuple[np.ndarray, np.ndarray],
    train_days: int = 20,
) -> ProfileSet:
    """Deterministic diurnal dataset: two-peak load and price, daylight-only PV"""
    if days < 1:
        raise ContractViolation(f"days must be at least 1, got {days}")

    rng = np.random.default_rng(seed)
    hours = days * 24
    hour = np.arange(hours) % 24

    load_factor = 0.28 + 0.12 * _bump(hour, 9.0, 2.0) + 0.2 * _bump(hour, 19.0, 2.5)
    load_factor = np.clip(load_factor + rng.normal(0.0, 0.01, hours), 0.2, 0.52)

    daylight = np.clip(np.sin(np.pi * (hour - 6) / 12.0), 0.0, None)
    daylight[(hour < 6) | (hour > 18)] = 0.0
    cloud = np.repeat(rng.uniform(0.6, 1.0, days), 24)
    pv_factor = np.clip(daylight * cloud + rng.normal(0.0, 0.02, hours) * (daylight > 0), 0.0, 1.0)

    wind = np.empty(hours)
    level = 0.0
    for t in range(hours):
        level = 0.8 * level + rng.normal(0.0, 0.05)
        wind[t] = level
    wt_factor = np.clip(0.35 + 0.15 * np.sin(2 * np.pi * (hour + 3) / 24.0) + wind, 0.0, 1.0)

    price = 0.08 + 0.10 * _bump(hour, 8.5, 1.5) + 0.14 * _bump(hour, 19.0, 2.0)
    price = np.clip(price + rng.normal(0.0, 0.003, hours), 0.01, None)

    timestamps = pd.date_range(DATASET_START, periods=hours, freq="h")
    profiles = build_profiles(
        timestamps=timestamps,
        load_factor=load_factor,
        pv_factor=pv_factor,
        wt_factor=wt_factor,
        price=price,
        devices=devices,
        base_load_p=base_loads[0],
        base_load_q=base_loads[1],
        split=default_split(hours, train_days),
    )
    logger.info(f"Synthesized {days} days of profiles with seed {seed}")
    return profiles


def write_dataset(profiles: ProfileSet, path: Path) -> Path:
    """Write profiles back to the time-series CSV schema"""
    if profiles.load_factor is None or profiles.pv_factor is None or profiles.wt_factor is None:
        raise ContractViolation("Profiles were not built from factor series and cannot be written")

    frame = pd.DataFrame({
        "timestamp": profiles.timestamps.strftime("%Y-%m-%d %H:%M:%S"),
        "load_factor": profiles.load_factor,
        "pv_factor": profiles.pv_factor,
        "wt_factor": profiles.wt_factor,
        "price_gbp_per_kwh": profiles.price_grid,
        "split": profiles.split,
    })
    if profiles.price_node.ndim == 2:
        for k in range(profiles.price_node.shape[1]):
            frame[f"price_ess{k + 1}"] = profiles.price_node[:, k]

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.8f")
    logger.info(f"Wrote {len(frame)} hours to {path}")
    return path


class ObservationNormalizer:
    """Running mean/variance standardizer (Welford), frozen for evaluation"""

    def __init__(self, dim: int, clip: float = 10.0, eps: float = 1e-8):
        self.dim = dim
        self.clip = clip
        self.eps = eps
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.frozen = False

    @property
    def var(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.dim)
        return self.m2 / self.count

    def update(self, obs: np.ndarray):
        if self.frozen:
            return
        obs = np.asarray(obs, dtype=float)
        self.count += 1
        delta = obs - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (obs - self.mean)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        scaled = (np.asarray(obs, dtype=float) - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(scaled, -self.clip, self.clip)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        self.update(obs)
        return self.normalize(obs)

    def freeze(self):
        self.frozen = True

    def state_dict(self) -> dict:
        return {"count": np.array(self.count), "mean": self.mean.copy(), "m2": self.m2.copy()}

    def load_state_dict(self, state: dict):
        self.count = int(state["count"])
        self.mean = np.asarray(state["mean"], dtype=float).copy()
        self.m2 = np.asarray(state["m2"], dtype=float).copy()


class DispatchEnv:
    """Hourly ESS dispatch over a radial network, one exact power flow per step"""

    def __init__(
        self,
        network: NetworkModel,
        profiles: ProfileSet,
        ess_units: Sequence[EssUnit],
        config: Optional[EnvConfig] = None,
        seed: int = 0,
        solver: Optional[PowerFlowSolver] = None,
    ):
        self.network = network
        self.profiles = profiles
        self.ess_units = tuple(ess_units)
        self.config = config or EnvConfig()
        self.solver = solver or PowerFlowSolver(network)
        self.rng = np.random.default_rng(seed)

        self.high_risk = np.array(self.config.high_risk_indices, dtype=int)
        if np.any(self.high_risk < 0) or np.any(self.high_risk >= network.bus_count):
            raise ConfigurationError(f"High-risk buses {self.config.high_risk_buses} outside the network")
        if profiles.load_p.shape[1] != network.bus_count:
            raise ConfigurationError(
                f"Profiles describe {profiles.load_p.shape[1]} buses, network has {network.bus_count}"
            )
        self.limits = self.config.voltage_limits

        self.n_ess = len(self.ess_units)
        self.obs_dim = network.bus_count + 1 + 4 * self.n_ess + PRICE_WINDOW
        self.action_dim = self.n_ess

        self.t = 0
        self.start = 0
        self.steps_taken = 0
        self.episode_length = self.config.episode_length
        self.done = True
        self._states = [EssState(self.config.initial_soe) for _ in self.ess_units]
        self._last_kw = np.zeros(self.n_ess)
        self._p_r_kw = 0.0
        self._warm: Optional[VoltageSolution] = None

    @property
    def soe(self) -> np.ndarray:
        return np.array([state.soe for state in self._states])

    @property
    def ess_states(self) -> Tuple[EssState, ...]:
        return tuple(self._states)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [
            power_bounds(unit, state, self.config.dt)
            for unit, state in zip(self.ess_units, self._states)
        ]
        lower = np.array([pair[0] for pair in pairs], dtype=float)
        upper = np.array([pair[1] for pair in pairs], dtype=float)
        return lower, upper

    def denormalize(self, action: np.ndarray) -> np.ndarray:
        """[-1, 1] -> kW, -1 at the lower bound and +1 at the upper bound"""
        lower, upper = self.bounds()
        action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        return lower + (action + 1.0) * 0.5 * (upper - lower)

    def normalize(self, power_kw: np.ndarray) -> np.ndarray:
        lower, upper = self.bounds()
        span = upper - lower
        safe_span = np.where(span > 0, span, 1.0)
        action = np.where(span > 0, 2.0 * (np.asarray(power_kw, dtype=float) - lower) / safe_span - 1.0, 0.0)
        return np.clip(action, -1.0, 1.0)

    def injections(self, power_kw: np.ndarray, t: Optional[int] = None) -> InjectionVector:
        return net_injections(
            self.network, self.profiles, self.ess_units, power_kw, self.t if t is None else t
        )

    def reset(self, start: int = 0, initial_soe: Optional[float] = None, episode_length: Optional[int] = None) -> np.ndarray:
        length = episode_length or self.config.episode_length
        if start < 0 or start + length > len(self.profiles):
            raise ContractViolation(
                f"Episode [{start}, {start + length}) exceeds the {len(self.profiles)}-hour dataset"
            )
        soe = self.config.initial_soe if initial_soe is None else initial_soe
        self.start = start
        self.t = start
        self.steps_taken = 0
        self.episode_length = length
        self.done = False
        self._states = [EssState(soe) for _ in self.ess_units]
        self._last_kw = np.zeros(self.n_ess)

        solution = self.solver.solve(self.injections(self._last_kw))
        if solution.converged:
            self._warm = solution
            self._p_r_kw = solution.slack_p * self.network.s_base
        else:
            self._warm = None
            self._p_r_kw = self._lossless_draw(self._last_kw, start)
        return self.observation()

    def _lossless_draw(self, power_kw: np.ndarray, t: int) -> float:
        return float(np.sum(self.injections(power_kw, t).p) * self.network.s_base)

    def price_window(self, t: Optional[int] = None) -> np.ndarray:
        t = self.t if t is None else t
        hours = len(self.profiles)
        idx = (t + np.arange(PRICE_WINDOW)) % hours
        node = self.profiles.price_node
        window = node[idx] if node.ndim == 1 else node[idx].mean(axis=1)
        window = np.array(window, dtype=float)
        if self.config.price_noise_std > 0:
            window[1:] = np.clip(window[1:] + self.rng.normal(0.0, self.config.price_noise_std, PRICE_WINDOW - 1), 0.0, None)
        return window

    def observation(self) -> np.ndarray:
        lower, upper = self.bounds()
        t = self.t % len(self.profiles)
        return np.concatenate([
            self.profiles.load_p[t],
            [self._p_r_kw],
            self._last_kw,
            self.soe,
            lower,
            upper,
            self.price_window(t),
        ])

    def step(self, action: np.ndarray, used_fallback: bool = False, unsafe_proposal: bool = False) -> StepResult:
        action = np.asarray(action, dtype=float).reshape(-1)
        if action.shape[0] != self.n_ess:
            raise ShapeError(f"Expected {self.n_ess} action entries, got {action.shape[0]}")
        if not np.all(np.isfinite(action)):
            raise ContractViolation(f"Non-finite action {action}")
        return self.step_kw(self.denormalize(action), used_fallback, unsafe_proposal)

    def step_kw(self, power_kw: np.ndarray, used_fallback: bool = False, unsafe_proposal: bool = False) -> StepResult:
        """Execute ESS powers in kW (clipped to the current bounds)"""
        if self.done:
            raise EnvironmentDoneError("Episode finished; call reset() first")
        power_kw = np.asarray(power_kw, dtype=float).reshape(-1)
        if power_kw.shape[0] != self.n_ess:
            raise ShapeError(f"Expected {self.n_ess} ESS powers, got {power_kw.shape[0]}")
        if not np.all(np.isfinite(power_kw)):
            raise ContractViolation(f"Non-finite ESS powers {power_kw}")

        lower, upper = self.bounds()
        executed = np.clip(power_kw, lower, upper)
        executed_action = self.normalize(executed)
        t = self.t
        dt = self.config.dt

        solution = self.solver.solve(self.injections(executed, t), warm_start=self._warm)
        if solution.converged:
            self._warm = solution
            p_r_kw = solution.slack_p * self.network.s_base
            magnitudes = solution.magnitude
            high_risk_v = magnitudes[self.high_risk]
            violations = int(np.sum((high_risk_v < self.limits[0]) | (high_risk_v > self.limits[1])))
            v_min, v_max = float(magnitudes.min()), float(magnitudes.max())
            acpf_failed = False
        else:
            logger.warning(f"Power flow failed at hour {t}; marking step maximally unsafe")
            self._warm = None
            p_r_kw = self._lossless_draw(executed, t)
            high_risk_v = np.full(len(self.high_risk), np.nan)
            violations = len(self.high_risk)
            v_min = v_max = float("nan")
            acpf_failed = True

        c_r = float(self.profiles.price_grid[t])
        c_e = self.profiles.ess_prices(t, self.n_ess)
        step_cost = c_r * p_r_kw * dt + float(np.dot(c_e, executed)) * dt
        reward = -(step_cost / self.config.cost_weight + self.config.violation_weight * violations)

        self._states = [
            ess_step(unit, state, float(p), dt)
            for unit, state, p in zip(self.ess_units, self._states, executed)
        ]
        self._last_kw = executed
        self._p_r_kw = p_r_kw
        self.t += 1
        self.steps_taken += 1
        self.done = self.steps_taken >= self.episode_length

        return StepResult(
            next_obs=self.observation(),
            reward=float(reward),
            step_cost=float(step_cost),
            violations=violations,
            executed_action_kw=executed.copy(),
            executed_action=executed_action,
            done=self.done,
            used_fallback=used_fallback,
            unsafe_proposal=unsafe_proposal,
            acpf_failed=acpf_failed,
            t=t,
            p_r_kw=float(p_r_kw),
            soe=self.soe,
            high_risk_voltages=high_risk_v,
            v_min=v_min,
            v_max=v_max,
        )
