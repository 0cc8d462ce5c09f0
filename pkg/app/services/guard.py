# app/services/guard.py
"""Learned voltage screen for high-risk buses.

The model regresses |V| at the high-risk buses from the per-bus (P, Q)
consumption vector with the candidate ESS powers already folded in, and a
command is declared safe when every prediction sits inside the voltage limits
shrunk by a margin.
"""
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.services.assets import EssUnit, ProfileSet, net_injections
from app.services.config import GuardConfig
from app.services.errors import ConfigurationError, ReadinessError, ShapeError, TrainingFault
from app.services.grid import InjectionVector, NetworkModel, PowerFlowSolver
from app.services.nn_core import (
    AdamState,
    adam_step,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    params_from_arrays,
    params_meta,
    params_to_arrays,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

RMSE_EPS = 1e-12


@dataclass(frozen=True)
class HighRiskSet:
    buses: Tuple[int, ...]  # 0-based

    def __post_init__(self):
        if not self.buses:
            raise ConfigurationError("High-risk set must not be empty")
        if len(set(self.buses)) != len(self.buses):
            raise ConfigurationError(f"High-risk set has duplicates: {self.buses}")

    def __len__(self) -> int:
        return len(self.buses)

    def validate(self, network: NetworkModel) -> "HighRiskSet":
        bad = [b for b in self.buses if not 0 <= b < network.bus_count]
        if bad:
            raise ConfigurationError(f"High-risk buses {bad} are not in the {network.bus_count}-bus network")
        return self

    @property
    def labels(self) -> List[int]:
        return [b + 1 for b in self.buses]


@dataclass(frozen=True)
class GuardSample:
    features: np.ndarray  # (2N,) p.u.
    labels: np.ndarray  # (H,) |V| p.u.


def injection_features(inj: InjectionVector) -> np.ndarray:
    return np.concatenate([inj.p, inj.q])


def featurize(
    network: NetworkModel,
    profiles: ProfileSet,
    ess_units: Sequence[EssUnit],
    candidate_action_kw: Sequence[float],
    t: int,
) -> np.ndarray:
    """(P_1..P_N, Q_1..Q_N) in p.u. for hour t with the candidate ESS powers applied"""
    return injection_features(net_injections(network, profiles, ess_units, candidate_action_kw, t))


def feature_scale_from_profiles(
    network: NetworkModel,
    profiles: ProfileSet,
    ess_units: Sequence[EssUnit],
) -> np.ndarray:
    """Per-feature divisor from peak load, generation and storage ratings (p.u.)"""
    n = network.bus_count
    p_peak = np.max(profiles.load_p, axis=0).astype(float)
    for m, unit in enumerate(profiles.pv_units):
        p_peak[unit.bus] += np.max(profiles.pv[:, m], initial=0.0)
    for w, unit in enumerate(profiles.wt_units):
        p_peak[unit.bus] += np.max(profiles.wt[:, w], initial=0.0)
    for unit in ess_units:
        p_peak[unit.bus] += unit.p_max
    q_peak = np.max(np.abs(profiles.load_q), axis=0)
    scale = np.concatenate([p_peak, q_peak]) / network.s_base
    if scale.shape != (2 * n,):
        raise ShapeError(f"Feature scale has shape {scale.shape}, expected {(2 * n,)}")
    return np.maximum(scale, 1e-3)


class GuardModel:
    """Dense regressor of high-risk voltages with an online readiness switch"""

    def __init__(
        self,
        network: NetworkModel,
        high_risk: HighRiskSet,
        config: Optional[GuardConfig] = None,
        feature_scale: Optional[np.ndarray] = None,
        seed: int = 0,
    ):
        self.network = network
        self.high_risk = high_risk.validate(network)
        self.config = config or GuardConfig()
        self.rng = np.random.default_rng(seed)
        self.n_features = 2 * network.bus_count
        self.v_offset = network.v_slack
        self.feature_scale = (
            np.ones(self.n_features) if feature_scale is None else np.asarray(feature_scale, dtype=float)
        )
        if self.feature_scale.shape != (self.n_features,):
            raise ShapeError(f"feature_scale must have length {self.n_features}")

        sizes = [self.n_features, *self.config.hidden_sizes, len(high_risk)]
        activations = ["relu"] * len(self.config.hidden_sizes) + ["identity"]
        self.params = init_mlp(sizes, activations, self.rng, final_scale=1e-2)
        self.optimizer = AdamState.for_params(self.params, self.config.lr, self.config.weight_decay)

        self.ready = False
        self.recent_losses = deque(maxlen=self.config.loss_window)
        self.samples_seen = 0
        self._reservoir_x = np.zeros((self.config.reservoir_size, self.n_features))
        self._reservoir_y = np.zeros((self.config.reservoir_size, len(high_risk)))
        self._reservoir_n = 0

    @property
    def running_loss(self) -> float:
        return float(np.mean(self.recent_losses)) if self.recent_losses else float("inf")

    @property
    def limits(self) -> Tuple[float, float]:
        return self.network.voltage_limits

    def _scaled(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.shape[-1] != self.n_features:
            raise ShapeError(f"Expected {self.n_features} features, got {features.shape[-1]}")
        return features / self.feature_scale

    def predict(self, features: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.params, self._scaled(features))
        return self.v_offset + out

    def loss_and_grad(self, features: np.ndarray, labels: np.ndarray):
        """RMSE over every (sample, bus) entry and its parameter gradients"""
        x = np.atleast_2d(self._scaled(features))
        y = np.atleast_2d(np.asarray(labels, dtype=float))
        out, cache = mlp_forward(self.params, x)
        residual = self.v_offset + out - y
        rmse = float(np.sqrt(np.mean(residual ** 2) + RMSE_EPS))
        grads = mlp_backward(self.params, cache, residual / (residual.size * rmse))
        return rmse, grads

    def loss(self, features: np.ndarray, labels: np.ndarray) -> float:
        residual = np.atleast_2d(self.predict(features)) - np.atleast_2d(labels)
        return float(np.sqrt(np.mean(residual ** 2) + RMSE_EPS))

    def train_step(self, features: np.ndarray, labels: np.ndarray) -> float:
        rmse, grads = self.loss_and_grad(features, labels)
        adam_step(self.optimizer, self.params, grads)
        return rmse

    def _remember(self, features: np.ndarray, labels: np.ndarray):
        self.samples_seen += 1
        capacity = self.config.reservoir_size
        if self._reservoir_n < capacity:
            slot = self._reservoir_n
            self._reservoir_n += 1
        else:
            slot = int(self.rng.integers(0, self.samples_seen))
            if slot >= capacity:
                return
        self._reservoir_x[slot] = features
        self._reservoir_y[slot] = labels

    def observe(self, features: np.ndarray, labels: np.ndarray) -> float:
        """
        Online step on one power-flow-labelled sample

        Scores the sample before learning from it, stores it in the
        reservoir and takes one minibatch step. Once the average of the
        last loss_window scores falls below ready_loss the model is marked
        ready and stops training.

        Returns:
            RMSE of the incoming sample under the pre-update parameters
        """
        loss = self.loss(features, labels)
        if self.ready:
            return loss

        self._remember(features, labels)
        batch = min(self.config.batch_size, self._reservoir_n)
        idx = self.rng.choice(self._reservoir_n, size=batch, replace=False)
        self.train_step(self._reservoir_x[idx], self._reservoir_y[idx])

        self.recent_losses.append(loss)
        if len(self.recent_losses) == self.recent_losses.maxlen and self.running_loss < self.config.ready_loss:
            self.ready = True
            logger.info(
                f"Guard ready after {self.samples_seen} samples (running RMSE {self.running_loss:.5f} p.u.)"
            )
        return loss

    def assess(self, features: np.ndarray, margin: Optional[float] = None) -> Tuple[np.ndarray, bool]:
        return predict_and_assess(self, features, self.limits, margin)

    def save(self, path: Path) -> Path:
        arrays = params_to_arrays(self.params, "guard")
        arrays.update(self.optimizer.to_arrays("guard_opt"))
        arrays["feature_scale"] = self.feature_scale
        arrays["recent_losses"] = np.asarray(self.recent_losses, dtype=float)
        arrays["reservoir_x"] = self._reservoir_x[: self._reservoir_n]
        arrays["reservoir_y"] = self._reservoir_y[: self._reservoir_n]
        meta = {
            "kind": "guard",
            "network": params_meta(self.params),
            "high_risk_buses": list(self.high_risk.labels),
            "margin": self.config.margin,
            "ready": self.ready,
            "running_loss": self.running_loss if self.recent_losses else None,
            "samples_seen": self.samples_seen,
            "rng_state": self.rng.bit_generator.state,
            "v_offset": self.v_offset,
            "config": self.config.model_dump(),
        }
        return save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: Path, network: NetworkModel) -> "GuardModel":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "guard":
            raise ConfigurationError(f"{path} is not a guard checkpoint")
        high_risk = HighRiskSet(tuple(b - 1 for b in meta["high_risk_buses"]))
        model = cls(network, high_risk, GuardConfig(**meta["config"]), feature_scale=arrays["feature_scale"])
        model.params = params_from_arrays(arrays, "guard", meta["network"])
        if model.params.sizes[0] != model.n_features:
            raise ConfigurationError(f"Guard in {path} expects {model.params.sizes[0]} features")
        model.optimizer = AdamState.for_params(model.params, model.config.lr, model.config.weight_decay)
        model.optimizer.load_arrays(arrays, "guard_opt")
        model.ready = bool(meta["ready"])
        model.samples_seen = int(meta["samples_seen"])
        model.v_offset = float(meta["v_offset"])
        model.recent_losses.extend(arrays["recent_losses"].tolist())
        stored = len(arrays["reservoir_x"])
        model._reservoir_x[:stored] = arrays["reservoir_x"]
        model._reservoir_y[:stored] = arrays["reservoir_y"]
        model._reservoir_n = stored
        model.rng.bit_generator.state = meta["rng_state"]
        logger.info(f"Loaded guard from {path} (ready={model.ready})")
        return model


def predict_and_assess(
    model: GuardModel,
    features: np.ndarray,
    limits: Tuple[float, float],
    margin: Optional[float] = None,
) -> Tuple[np.ndarray, bool]:
    """Predicted high-risk |V| and whether all lie in [lower + m, upper - m]"""
    if not model.ready:
        raise ReadinessError("Guard is not ready; screen with exact power flow instead")
    m = model.config.margin if margin is None else margin
    predicted = model.predict(features)
    lower, upper = limits
    safe = bool(np.all((predicted >= lower + m) & (predicted <= upper - m)))
    return predicted, safe


def train_guard(
    model: GuardModel,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: Optional[int] = None,
) -> Tuple[GuardModel, List[float]]:
    """
    Minibatch training over a labelled sample set

    Returns the model and the per-epoch RMSE trace. The model is marked
    ready when the final epoch RMSE is below the readiness threshold.

    Raises:
        TrainingFault: epoch loss above divergence_factor x the first epoch
            for divergence_epochs consecutive epochs
    """
    cfg = model.config
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if features.shape[0] != labels.shape[0] or features.shape[0] == 0:
        raise ShapeError(f"{features.shape[0]} feature rows for {labels.shape[0]} label rows")

    trace: List[float] = []
    initial = None
    strikes = 0
    for epoch in range(epochs or cfg.pretrain_epochs):
        order = model.rng.permutation(len(features))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.train_step(features[idx], labels[idx])

        epoch_loss = model.loss(features, labels)
        trace.append(epoch_loss)
        if initial is None:
            initial = epoch_loss
        if not np.isfinite(epoch_loss) or epoch_loss > cfg.divergence_factor * initial:
            strikes += 1
            if strikes >= cfg.divergence_epochs:
                raise TrainingFault(
                    f"Guard training diverged: epoch {epoch} RMSE {epoch_loss:.4f} vs initial {initial:.4f}"
                )
        else:
            strikes = 0

    model.ready = trace[-1] < cfg.ready_loss
    logger.info(f"Guard trained for {len(trace)} epochs, final RMSE {trace[-1]:.5f} p.u., ready={model.ready}")
    return model, trace


def generate_guard_samples(
    network: NetworkModel,
    profiles: ProfileSet,
    ess_units: Sequence[EssUnit],
    high_risk: HighRiskSet,
    count: int,
    rng: np.random.Generator,
    solver: Optional[PowerFlowSolver] = None,
    load_jitter: float = 0.2,
    hours: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Random (state, action) samples labelled by exact power flow

    Each sample draws an hour, scales every bus load by an independent factor
    in [1 - load_jitter, 1 + load_jitter] and draws ESS powers uniformly over
    their full rating. Non-converged draws are skipped.
    """
    solver = solver or PowerFlowSolver(network)
    hours = np.arange(len(profiles)) if hours is None else np.asarray(hours)
    ratings = np.array([unit.p_max for unit in ess_units], dtype=float)
    features, labels = [], []
    attempts = 0
    while len(features) < count and attempts < 3 * count + 10:
        attempts += 1
        t = int(rng.choice(hours))
        action = rng.uniform(-ratings, ratings) if len(ratings) else np.zeros(0)
        inj = net_injections(network, profiles, ess_units, action, t)
        jitter = rng.uniform(1.0 - load_jitter, 1.0 + load_jitter, network.bus_count)
        p = inj.p + profiles.load_p[t] * (jitter - 1.0) / network.s_base
        q = inj.q * jitter
        solution = solver.solve(InjectionVector(p=p, q=q))
        if not solution.converged:
            continue
        features.append(np.concatenate([p, q]))
        labels.append(solution.magnitude[list(high_risk.buses)])

    logger.info(f"Generated {len(features)} guard samples in {attempts} attempts")
    return np.array(features), np.array(labels)


def evaluate_guard(model: GuardModel, features: np.ndarray, labels: np.ndarray) -> pd.DataFrame:
    """Per-sample RMSE and max absolute error (columns sample, rmse, max_abs_err)"""
    residual = np.atleast_2d(model.predict(features)) - np.atleast_2d(labels)
    return pd.DataFrame({
        "sample": np.arange(len(residual)),
        "rmse": np.sqrt(np.mean(residual ** 2, axis=1)),
        "max_abs_err": np.max(np.abs(residual), axis=1),
    })
