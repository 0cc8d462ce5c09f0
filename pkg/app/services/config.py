# app/services/config.py
"""Run configuration.

Config files are KEY=value lines. Un-prefixed keys set top-level RunConfig
fields, ENV_/SAC_/GUARD_/DISPATCH_ keys set the nested sections, e.g.

    EPISODES=300
    SAC_GAMMA=0.99
    GUARD_MARGIN=0.002
    DISPATCH_BACKEND=search
    ENV_HIGH_RISK_BUSES=12,13,14,15,16,17,18,29,30,31,32,33
"""
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.services.errors import ConfigurationError

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_HIGH_RISK_BUSES = [12, 13, 14, 15, 16, 17, 18, 29, 30, 31, 32, 33]

SECTION_PREFIXES = {"ENV_": "env", "SAC_": "sac", "GUARD_": "guard", "DISPATCH_": "dispatch"}


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class EnvConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # Data sources; None means bundled IEEE-33 files and a synthetic dataset
    data_path: Optional[str] = None
    branches_path: Optional[str] = None
    network_meta_path: Optional[str] = None
    devices_path: Optional[str] = None
    base_loads_path: Optional[str] = None
    synth_days: int = Field(30, gt=0)
    train_days: int = Field(20, ge=0)

    episode_length: int = Field(480, gt=0)
    initial_soe: float = Field(0.1, ge=0, le=1)
    dt: float = Field(1.0, gt=0)
    cost_weight: float = Field(1000.0, gt=0)  # C_w, GBP
    violation_weight: float = Field(1.0, ge=0)  # w_delta
    high_risk_buses: List[int] = Field(default_factory=lambda: list(DEFAULT_HIGH_RISK_BUSES))
    v_min: float = 0.95
    v_max: float = 1.05
    price_noise_std: float = Field(0.0, ge=0)
    normalize_observations: bool = True

    @field_validator("high_risk_buses", mode="before")
    @classmethod
    def split_buses(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def check_limits(self):
        if not 0 < self.v_min < self.v_max:
            raise ValueError(f"Voltage limits must satisfy 0 < v_min < v_max, got ({self.v_min}, {self.v_max})")
        if not self.high_risk_buses:
            raise ValueError("high_risk_buses must not be empty")
        if len(set(self.high_risk_buses)) != len(self.high_risk_buses):
            raise ValueError("high_risk_buses contains duplicates")
        for name in ("data_path", "branches_path", "network_meta_path", "devices_path", "base_loads_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ValueError(f"{name} points to a missing file: {path}")
        return self

    @property
    def voltage_limits(self):
        return (self.v_min, self.v_max)

    @property
    def high_risk_indices(self) -> List[int]:
        return [bus - 1 for bus in self.high_risk_buses]


class SacConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(0.99, gt=0, le=1)
    tau: float = Field(1e-2, gt=0, le=1)
    alpha: float = Field(0.2, ge=0)
    auto_alpha: bool = False
    alpha_lr: float = Field(2e-4, ge=0)
    batch_size: int = Field(64, gt=0)
    buffer_size: int = Field(200_000, gt=0)
    hidden_size: int = Field(512, gt=0)
    actor_lr: float = Field(2e-4, ge=0)
    critic_lr: float = Field(2e-4, ge=0)
    weight_decay: float = Field(1e-2, ge=0)
    warmup_steps: int = Field(1000, ge=0)
    per_alpha: float = Field(0.6, ge=0)
    per_beta0: float = Field(0.4, ge=0, le=1)


class GuardConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_sizes: List[int] = Field(default_factory=lambda: [128, 128])
    lr: float = Field(2e-4, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    margin: float = Field(0.002, ge=0)
    ready_loss: float = Field(1e-2, gt=0)
    loss_window: int = Field(200, gt=0)
    batch_size: int = Field(64, gt=0)
    reservoir_size: int = Field(20_000, gt=0)
    divergence_factor: float = Field(10.0, gt=1)
    divergence_epochs: int = Field(5, gt=0)
    pretrain_samples: int = Field(0, ge=0)
    pretrain_epochs: int = Field(30, gt=0)
    checkpoint_path: Optional[str] = None

    @field_validator("hidden_sizes", mode="before")
    @classmethod
    def split_hidden(cls, value):
        return _split_list(value)


class DispatchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backend: Literal["conic", "search"] = "conic"
    voltage_margin: float = Field(1e-4, ge=0)  # p.u. tightening of the conic voltage box
    max_trials: int = Field(20, gt=0)
    search_points: int = Field(9, ge=3)
    search_rounds: int = Field(3, gt=0)
    feasibility_tol: float = Field(1e-8, gt=0)
    gap_tol: float = Field(1e-6, gt=0)
    dump_dir: Optional[str] = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run_name: str = "sa2co"
    seed: int = 0
    episodes: int = Field(300, gt=0)
    out_dir: str = "runs/sa2co"
    screening: Literal["guard", "acpf", "none"] = "guard"
    env: EnvConfig = Field(default_factory=EnvConfig)
    sac: SacConfig = Field(default_factory=SacConfig)
    guard: GuardConfig = Field(default_factory=GuardConfig)
    dispatch: DispatchConfig = Field(default_factory=DispatchConfig)

    @property
    def output_path(self) -> Path:
        return Path(self.out_dir)


def config_from_mapping(values: Dict[str, Optional[str]]) -> RunConfig:
    """Build a RunConfig from KEY=value pairs (empty values are ignored)"""
    data: Dict[str, Any] = {section: {} for section in SECTION_PREFIXES.values()}
    for key, value in values.items():
        if value is None or value == "":
            continue
        key = key.strip().upper()
        for prefix, section in SECTION_PREFIXES.items():
            if key.startswith(prefix):
                data[section][key[len(prefix):].lower()] = value
                break
        else:
            data[key.lower()] = value

    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}")


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Read a config file and apply overrides

    Args:
        path: KEY=value file; falls back to $SA2CO_CONFIG, then to defaults
        overrides: KEY=value pairs that win over the file (CLI flags)

    Returns:
        Validated RunConfig
    """
    path = path or os.getenv("SA2CO_CONFIG")
    values: Dict[str, Optional[str]] = {}
    if path:
        if not Path(path).exists():
            raise ConfigurationError(f"Config file not found: {path}")
        values.update(dotenv_values(path))
        logger.info(f"Loaded run configuration from {path}")

    for key, value in (overrides or {}).items():
        if value is not None:
            values[key.upper()] = str(value)

    return config_from_mapping(values)
