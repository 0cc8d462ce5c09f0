# app/services/assets.py
"""Storage dynamics, device placements and hourly profiles.

All arithmetic here is in kW / kWh; conversion to per-unit happens only in
net_injections.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.services.errors import ConfigurationError, ContractViolation, IngestionError, ShapeError
from app.services.grid import DATA_DIR, InjectionVector, NetworkModel

logger = logging.getLogger(__name__)


class EssUnit(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "ESS"
    bus: int = Field(ge=0)
    p_max: float = Field(gt=0)  # kW, symmetric charge/discharge rating
    e_capacity: float = Field(gt=0)  # kWh
    eta_ch: float = Field(0.95, gt=0, le=1)
    eta_dis: float = Field(0.95, gt=0, le=1)
    soe_min: float = Field(0.1, ge=0, le=1)
    soe_max: float = Field(0.9, ge=0, le=1)

    @model_validator(mode="after")
    def check_soe_window(self):
        if not self.soe_min < self.soe_max:
            raise ValueError(f"soe_min ({self.soe_min}) must be below soe_max ({self.soe_max})")
        return self


class GeneratorUnit(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "GEN"
    kind: Literal["pv", "wt"]
    bus: int = Field(ge=0)
    p_max: float = Field(gt=0)  # kW nameplate


@dataclass(frozen=True)
class EssState:
    soe: float


@dataclass(frozen=True)
class DeviceSet:
    ess: Tuple[EssUnit, ...] = ()
    pv: Tuple[GeneratorUnit, ...] = ()
    wt: Tuple[GeneratorUnit, ...] = ()


@dataclass
class ProfileSet:
    """Hourly series sharing one time index (row t is hour t)"""

    timestamps: pd.DatetimeIndex
    load_p: np.ndarray  # (T, N) kW
    load_q: np.ndarray  # (T, N) kvar
    pv: np.ndarray  # (T, N_PV) kW
    wt: np.ndarray  # (T, N_WT) kW
    price_grid: np.ndarray  # (T,) £/kWh, C_r
    price_node: np.ndarray  # (T,) shared or (T, N_ESS) per ESS node, C_e
    pv_units: Tuple[GeneratorUnit, ...] = ()
    wt_units: Tuple[GeneratorUnit, ...] = ()
    split: Optional[np.ndarray] = None  # (T,) "train" / "test"
    load_factor: Optional[np.ndarray] = None
    pv_factor: Optional[np.ndarray] = None
    wt_factor: Optional[np.ndarray] = None
    base_load_p: Optional[np.ndarray] = field(default=None, repr=False)
    base_load_q: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        hours = len(self.timestamps)
        for name in ("load_p", "load_q", "pv", "wt", "price_grid", "price_node"):
            series = np.asarray(getattr(self, name), dtype=float)
            if series.shape[0] != hours:
                raise ShapeError(f"{name} has {series.shape[0]} rows, expected {hours}")
            setattr(self, name, series)
        if self.pv.shape[1] != len(self.pv_units) or self.wt.shape[1] != len(self.wt_units):
            raise ShapeError("Generation series must have one column per generator unit")
        if np.any(self.pv < 0) or np.any(self.wt < 0):
            raise ContractViolation("Generation series must be nonnegative")
        if self.split is None:
            self.split = np.full(hours, "train", dtype=object)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def hours(self) -> int:
        return len(self.timestamps)

    def ess_prices(self, t: int, n_ess: int) -> np.ndarray:
        """C_e(t) for each ESS node, broadcasting a shared series"""
        row = self.price_node[t]
        if np.ndim(row) == 0:
            return np.full(n_ess, float(row))
        row = np.asarray(row, dtype=float)
        if row.shape != (n_ess,):
            raise ShapeError(f"Per-node price row has {row.shape[0]} entries for {n_ess} ESS units")
        return row

    def split_indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.split) == name)


def power_bounds(unit: EssUnit, state: EssState, dt: float = 1.0) -> Tuple[float, float]:
    """
    Lower/upper ESS power (kW) for the coming interval

    lower = max(-p_max, (soe_min - soe) * E * eta_ch / dt)
    upper = min(p_max, (soe_max - soe) * E / eta_ch / dt)

    The discharge bound multiplies by eta_ch exactly as the dispatch model
    states it. Results are snapped so that lower <= 0 <= upper.
    """
    lower = max(-unit.p_max, (unit.soe_min - state.soe) * unit.e_capacity * unit.eta_ch / dt)
    upper = min(unit.p_max, (unit.soe_max - state.soe) * unit.e_capacity / unit.eta_ch / dt)
    return min(lower, 0.0), max(upper, 0.0)


def ess_step(unit: EssUnit, state: EssState, power: float, dt: float = 1.0) -> EssState:
    """Ampere-hour integration of one interval; power > 0 charges"""
    lower, upper = power_bounds(unit, state, dt)
    tolerance = 1e-9 * max(1.0, unit.p_max)
    if not np.isfinite(power) or power < lower - tolerance or power > upper + tolerance:
        raise ContractViolation(
            f"{unit.name}: power {power:.6f} kW outside bounds [{lower:.6f}, {upper:.6f}]"
        )

    if power >= 0:
        soe = state.soe + unit.eta_ch * power * dt / unit.e_capacity
    else:
        soe = state.soe + power * dt / (unit.eta_dis * unit.e_capacity)

    # Snap round-off at the window edges
    return EssState(soe=float(min(max(soe, unit.soe_min), unit.soe_max)))


def net_injections(
    network: NetworkModel,
    profiles: ProfileSet,
    ess_units: Sequence[EssUnit],
    ess_powers: Sequence[float],
    t: int,
) -> InjectionVector:
    """Per-bus consumption (p.u.): load - PV - WT + ESS charging; reactive is load only"""
    n = network.bus_count
    if profiles.load_p.shape[1] != n:
        raise ConfigurationError(f"Profiles describe {profiles.load_p.shape[1]} buses, network has {n}")

    powers = np.asarray(ess_powers, dtype=float).reshape(-1)
    if powers.shape[0] != len(ess_units):
        raise ShapeError(f"Expected {len(ess_units)} ESS powers, got {powers.shape[0]}")

    p_kw = profiles.load_p[t].copy()
    q_kvar = profiles.load_q[t].copy()

    for m, unit in enumerate(profiles.pv_units):
        _check_bus(unit.name, unit.bus, n)
        p_kw[unit.bus] -= profiles.pv[t, m]
    for w, unit in enumerate(profiles.wt_units):
        _check_bus(unit.name, unit.bus, n)
        p_kw[unit.bus] -= profiles.wt[t, w]
    for k, unit in enumerate(ess_units):
        _check_bus(unit.name, unit.bus, n)
        p_kw[unit.bus] += powers[k]

    return InjectionVector(p=p_kw / network.s_base, q=q_kvar / network.s_base)


def _check_bus(name: str, bus: int, bus_count: int):
    if not 0 <= bus < bus_count:
        raise ConfigurationError(f"Device {name} placed on unknown bus index {bus}")


def load_devices(path: Path) -> DeviceSet:
    """
    Read the device table: kind,bus,p_max_kw,e_kwh,eta_ch,eta_dis,soe_min,soe_max

    Bus labels are 1-based. Generation rows leave the storage columns empty.
    """
    frame = pd.read_csv(path)
    required = {"kind", "bus", "p_max_kw", "e_kwh", "eta_ch", "eta_dis", "soe_min", "soe_max"}
    missing = required - set(frame.columns)
    if missing:
        raise ConfigurationError(f"Device file {path} lacks columns {sorted(missing)}")

    ess, pv, wt = [], [], []
    for row_number, row in enumerate(frame.itertuples(index=False), start=2):
        kind = str(row.kind).strip().lower()
        try:
            if kind == "ess":
                ess.append(EssUnit(
                    name=f"ESS{len(ess) + 1}",
                    bus=int(row.bus) - 1,
                    p_max=float(row.p_max_kw),
                    e_capacity=float(row.e_kwh),
                    eta_ch=float(row.eta_ch),
                    eta_dis=float(row.eta_dis),
                    soe_min=float(row.soe_min),
                    soe_max=float(row.soe_max),
                ))
            elif kind in ("pv", "wt"):
                bucket = pv if kind == "pv" else wt
                bucket.append(GeneratorUnit(
                    name=f"{kind.upper()}{len(bucket) + 1}",
                    kind=kind,
                    bus=int(row.bus) - 1,
                    p_max=float(row.p_max_kw),
                ))
            else:
                raise ConfigurationError(f"Unknown device kind '{row.kind}'")
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"{path} line {row_number}: {e}")

    logger.info(f"Loaded devices from {path}: {len(ess)} ESS, {len(pv)} PV, {len(wt)} WT")
    return DeviceSet(ess=tuple(ess), pv=tuple(pv), wt=tuple(wt))


def table_one_devices() -> DeviceSet:
    return load_devices(DATA_DIR / "devices.csv")


def load_base_loads(path: Path, network: NetworkModel) -> Tuple[np.ndarray, np.ndarray]:
    """Per-bus base loads (kW, kvar) from bus,p_kw,q_kvar with 1-based labels"""
    frame = pd.read_csv(path)
    p_kw = np.zeros(network.bus_count)
    q_kvar = np.zeros(network.bus_count)
    for row in frame.itertuples(index=False):
        bus = int(row.bus) - 1
        _check_bus(f"load@{row.bus}", bus, network.bus_count)
        p_kw[bus] = float(row.p_kw)
        q_kvar[bus] = float(row.q_kvar)
    return p_kw, q_kvar


def ieee33_base_loads(network: NetworkModel) -> Tuple[np.ndarray, np.ndarray]:
    return load_base_loads(DATA_DIR / "ieee33_loads.csv", network)


class BusState(BaseModel):
    model_config = ConfigDict(extra="ignore")

    bus: int = Field(ge=1)  # 1-based label
    p_kw: float = Field(allow_inf_nan=False)  # net consumption, generation negative
    q_kvar: float = Field(allow_inf_nan=False)


def load_state(path: Path, network: NetworkModel) -> InjectionVector:
    """
    Operating state for a one-shot power flow

    CSV with bus,p_kw,q_kvar rows (1-based bus labels, net consumption).
    Buses without a row carry no load.

    Raises:
        IngestionError: with the 1-based data row of the first bad record
    """
    frame = pd.read_csv(path)
    missing = {"bus", "p_kw", "q_kvar"} - set(frame.columns)
    if missing:
        raise IngestionError(f"{path} lacks columns {sorted(missing)}")
    if frame.empty:
        raise IngestionError(f"{path} holds no rows")

    p_kw = np.zeros(network.bus_count)
    q_kvar = np.zeros(network.bus_count)
    seen = set()
    for row, record in enumerate(frame.to_dict("records"), start=1):
        try:
            state = BusState(**record)
        except ValidationError as e:
            raise IngestionError(f"invalid bus record: {e.errors()[0]['msg']}", row=row)
        if state.bus > network.bus_count:
            raise IngestionError(f"bus {state.bus} is not in the {network.bus_count}-bus network", row=row)
        if state.bus in seen:
            raise IngestionError(f"bus {state.bus} listed twice", row=row)
        seen.add(state.bus)
        p_kw[state.bus - 1] = state.p_kw
        q_kvar[state.bus - 1] = state.q_kvar

    logger.info(f"Loaded state for {len(seen)} buses from {path}")
    return InjectionVector(p=p_kw / network.s_base, q=q_kvar / network.s_base)
