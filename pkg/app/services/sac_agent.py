# app/services/sac_agent.py
"""Soft actor-critic with twin critics and prioritized replay.

The policy head outputs (mean, log_std) per action dimension; actions are
tanh-squashed Gaussian draws in [-1, 1].
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.services.config import SacConfig
from app.services.errors import (
    BufferUnderfilledError,
    ConfigurationError,
    ContractViolation,
    NonFiniteGradientError,
    PolicyFault,
    ShapeError,
)
from app.services.nn_core import (
    AdamState,
    MlpGrads,
    MlpParams,
    adam_step,
    copy_params,
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

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
PRIORITY_EPS = 1e-6
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class SumTree:
    """Binary sum tree over a fixed number of leaves (heap layout)"""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractViolation("SumTree capacity must be positive")
        self.capacity = capacity
        self.tree = np.zeros(2 * capacity - 1)

    @property
    def total(self) -> float:
        return float(self.tree[0])

    def leaves(self) -> np.ndarray:
        return self.tree[self.capacity - 1:]

    def update(self, point: int, value: float):
        idx = point + self.capacity - 1
        change = value - self.tree[idx]
        self.tree[idx] = value
        while idx > 0:
            idx = (idx - 1) // 2
            self.tree[idx] += change

    def find(self, value: float) -> int:
        """Leaf whose cumulative interval contains value"""
        idx = 0
        while idx < self.capacity - 1:
            left = 2 * idx + 1
            if value < self.tree[left]:
                idx = left
            else:
                value -= self.tree[left]
                idx = left + 1
        return idx - (self.capacity - 1)


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    priority: Optional[float] = None  # None enters at the current max priority


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray


class PerBuffer:
    """Ring buffer sampled with probability proportional to priority ** alpha"""

    def __init__(
        self,
        capacity: int,
        obs_dim: int,
        action_dim: int,
        alpha: float = 0.6,
        beta0: float = 0.4,
        rng: Optional[np.random.Generator] = None,
    ):
        self.capacity = capacity
        self.alpha = alpha
        self.beta0 = beta0
        self.rng = rng or np.random.default_rng()
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.tree = SumTree(capacity)
        self.max_priority = 1.0
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def add(self, transition: Transition) -> int:
        priority = self.max_priority if transition.priority is None else transition.priority
        if not priority > 0:
            raise ContractViolation(f"Priority must be positive, got {priority}")

        idx = self.cursor
        self.obs[idx] = transition.obs
        self.actions[idx] = transition.action
        self.rewards[idx] = transition.reward
        self.next_obs[idx] = transition.next_obs
        self.dones[idx] = float(transition.done)
        self.tree.update(idx, priority ** self.alpha)
        self.max_priority = max(self.max_priority, priority)

        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return idx

    def probabilities(self) -> np.ndarray:
        leaves = self.tree.leaves()[: self.size]
        return leaves / leaves.sum()

    def beta_at(self, progress: float) -> float:
        """Importance exponent annealed linearly from beta0 to 1 over training progress in [0, 1]"""
        return self.beta0 + (1.0 - self.beta0) * float(np.clip(progress, 0.0, 1.0))

    def sample(self, batch_size: int, beta: Optional[float] = None) -> Tuple[Batch, np.ndarray, np.ndarray]:
        if self.size < batch_size:
            raise BufferUnderfilledError(f"Buffer holds {self.size} transitions, {batch_size} requested")
        beta = self.beta0 if beta is None else beta

        total = self.tree.total
        segment = total / batch_size
        draws = (np.arange(batch_size) + self.rng.random(batch_size)) * segment
        draws = np.minimum(draws, np.nextafter(total, 0.0))
        indices = np.array([min(self.tree.find(v), self.size - 1) for v in draws], dtype=int)

        probs = self.tree.leaves()[indices] / total
        weights = (self.size * probs) ** (-beta)
        weights = weights / weights.max()

        batch = Batch(
            obs=self.obs[indices],
            actions=self.actions[indices],
            rewards=self.rewards[indices],
            next_obs=self.next_obs[indices],
            dones=self.dones[indices],
        )
        return batch, weights, indices

    def update_priorities(self, indices: Sequence[int], priorities: Sequence[float]):
        priorities = np.asarray(priorities, dtype=float)
        if np.any(~(priorities > 0)):
            raise ContractViolation("Priorities must be positive and finite")
        for idx, priority in zip(indices, priorities):
            self.tree.update(int(idx), priority ** self.alpha)
        self.max_priority = max(self.max_priority, float(priorities.max()))

    def to_arrays(self) -> Dict[str, np.ndarray]:
        n = self.size
        return {
            "buffer.obs": self.obs[:n] if n < self.capacity else self.obs,
            "buffer.actions": self.actions[:n] if n < self.capacity else self.actions,
            "buffer.rewards": self.rewards[:n] if n < self.capacity else self.rewards,
            "buffer.next_obs": self.next_obs[:n] if n < self.capacity else self.next_obs,
            "buffer.dones": self.dones[:n] if n < self.capacity else self.dones,
            "buffer.leaves": self.tree.leaves()[:n].copy(),
            "buffer.state": np.array([self.size, self.cursor, self.max_priority]),
        }

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        size, cursor, max_priority = arrays["buffer.state"]
        n = int(size)
        if n > self.capacity:
            raise ConfigurationError(f"Saved buffer holds {n} transitions, capacity is {self.capacity}")
        self.obs[:n] = arrays["buffer.obs"]
        self.actions[:n] = arrays["buffer.actions"]
        self.rewards[:n] = arrays["buffer.rewards"]
        self.next_obs[:n] = arrays["buffer.next_obs"]
        self.dones[:n] = arrays["buffer.dones"]
        for idx, leaf in enumerate(arrays["buffer.leaves"]):
            self.tree.update(idx, float(leaf))
        self.size = n
        self.cursor = int(cursor)
        self.max_priority = float(max_priority)


def per_sample(buffer: PerBuffer, batch_size: int, beta: Optional[float] = None):
    return buffer.sample(batch_size, beta)


def _split_head(policy: MlpParams, obs: np.ndarray):
    out, cache = mlp_forward(policy, obs)
    if not np.all(np.isfinite(out)):
        raise PolicyFault("Policy head produced non-finite output")
    k = out.shape[-1] // 2
    raw_log_std = out[..., k:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    clamped = (raw_log_std < LOG_STD_MIN) | (raw_log_std > LOG_STD_MAX)
    return out[..., :k], log_std, clamped, cache


def squashed_log_prob(u: np.ndarray, eps: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """log pi(tanh(u)) for u = mean + std * eps, summed over the last axis"""
    a = np.tanh(u)
    gaussian = -0.5 * eps ** 2 - log_std - HALF_LOG_2PI
    return np.sum(gaussian - np.log(1.0 - a * a + SQUASH_EPS), axis=-1)


def sample_action(
    policy: MlpParams,
    obs: np.ndarray,
    stochastic: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """(action, log-probability); deterministic mode returns tanh(mean)"""
    mean, log_std, _, _ = _split_head(policy, obs)
    if stochastic:
        rng = rng or np.random.default_rng()
        eps = rng.standard_normal(mean.shape)
    else:
        eps = np.zeros_like(mean)
    u = mean + np.exp(log_std) * eps
    return np.tanh(u), squashed_log_prob(u, eps, log_std)


def _critic_input(obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.concatenate([obs, actions], axis=-1)


def q_values(critic: MlpParams, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(critic, _critic_input(obs, actions))
    return out[..., 0]


def soft_target(rewards, soft_values, dones, gamma: float) -> np.ndarray:
    """r + gamma (1 - done) V_soft(s')"""
    return np.asarray(rewards, dtype=float) + gamma * (1.0 - np.asarray(dones, dtype=float)) * np.asarray(soft_values, dtype=float)


def q_target(
    rewards: np.ndarray,
    next_obs: np.ndarray,
    dones: np.ndarray,
    targets: Sequence[MlpParams],
    policy: MlpParams,
    alpha: float,
    gamma: float,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    next_actions, next_log_prob = sample_action(policy, next_obs, stochastic=True, rng=rng)
    q_next = np.minimum(q_values(targets[0], next_obs, next_actions), q_values(targets[1], next_obs, next_actions))
    return soft_target(rewards, q_next - alpha * next_log_prob, dones, gamma)


def critic_loss_and_grad(
    critic: MlpParams,
    obs: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
) -> Tuple[float, MlpGrads, np.ndarray]:
    """Importance-weighted mean of 1/2 (Q - y)^2, its gradient and the TD errors"""
    out, cache = mlp_forward(critic, _critic_input(obs, actions))
    td = out[:, 0] - targets
    batch = len(td)
    loss = float(np.sum(weights * 0.5 * td ** 2) / batch)
    grads = mlp_backward(critic, cache, (weights * td / batch)[:, None])
    return loss, grads, td


def update_critics(
    batch: Batch,
    weights: np.ndarray,
    critics: Sequence[MlpParams],
    optimizers: Sequence[AdamState],
    targets: Sequence[MlpParams],
    policy: MlpParams,
    alpha: float,
    gamma: float,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[List[float], np.ndarray, np.ndarray]:
    """One Adam step per critic; returns (losses, new priorities, TD errors of shape (2, B))"""
    y = q_target(batch.rewards, batch.next_obs, batch.dones, targets, policy, alpha, gamma, rng)
    losses, tds = [], []
    for critic, optimizer in zip(critics, optimizers):
        loss, grads, td = critic_loss_and_grad(critic, batch.obs, batch.actions, y, weights)
        if not np.isfinite(loss):
            logger.warning(f"Skipped critic update: non-finite loss at optimizer step {optimizer.step}")
        else:
            try:
                adam_step(optimizer, critic, grads)
            except NonFiniteGradientError as e:
                logger.warning(f"Skipped critic update: {e}")
        losses.append(loss)
        tds.append(td)

    tds = np.array(tds)
    abs_td = np.abs(tds).mean(axis=0)
    priorities = np.where(np.isfinite(abs_td), abs_td, 0.0) + PRIORITY_EPS
    return losses, priorities, tds


def actor_loss_and_grad(
    policy: MlpParams,
    critics: Sequence[MlpParams],
    obs: np.ndarray,
    eps: np.ndarray,
    alpha: float,
) -> Tuple[float, MlpGrads, np.ndarray]:
    """
    Reparameterized actor objective mean(alpha log pi(a|s) - min(Q1, Q2)(s, a))

    eps is the standard-normal draw, held fixed so the loss is a
    deterministic function of the policy parameters.

    Returns:
        (loss, policy gradients, log-probabilities)
    """
    mean, log_std, clamped, cache = _split_head(policy, obs)
    std = np.exp(log_std)
    u = mean + std * eps
    a = np.tanh(u)
    log_prob = squashed_log_prob(u, eps, log_std)

    obs_dim = obs.shape[-1]
    q_min = None
    dq_da = None
    for critic in critics:
        out, critic_cache = mlp_forward(critic, _critic_input(obs, a))
        q = out[:, 0]
        grad_in = mlp_backward(critic, critic_cache, np.ones_like(out)).input[:, obs_dim:]
        if q_min is None:
            q_min, dq_da = q, grad_in
        else:
            pick = q < q_min
            q_min = np.where(pick, q, q_min)
            dq_da = np.where(pick[:, None], grad_in, dq_da)

    batch = obs.shape[0]
    loss = float(np.mean(alpha * log_prob - q_min))

    one_minus_a2 = 1.0 - a * a
    dlogp_du = 2.0 * a * one_minus_a2 / (one_minus_a2 + SQUASH_EPS)
    dl_du = (alpha * dlogp_du - dq_da * one_minus_a2) / batch
    dl_dmean = dl_du
    dl_dlog_std = -alpha / batch + dl_du * std * eps
    dl_dlog_std = np.where(clamped, 0.0, dl_dlog_std)

    grads = mlp_backward(policy, cache, np.concatenate([dl_dmean, dl_dlog_std], axis=-1))
    return loss, grads, log_prob


def update_actor(
    obs: np.ndarray,
    critics: Sequence[MlpParams],
    policy: MlpParams,
    optimizer: AdamState,
    alpha: float,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, np.ndarray]:
    """One Adam step on the policy with the critics held fixed"""
    rng = rng or np.random.default_rng()
    eps = rng.standard_normal((obs.shape[0], policy.sizes[-1] // 2))
    loss, grads, log_prob = actor_loss_and_grad(policy, critics, obs, eps, alpha)
    if not np.isfinite(loss):
        logger.warning(f"Skipped actor update: non-finite loss at optimizer step {optimizer.step}")
        return loss, log_prob
    try:
        adam_step(optimizer, policy, grads)
    except NonFiniteGradientError as e:
        logger.warning(f"Skipped actor update: {e}")
    return loss, log_prob


def soft_update(targets: Sequence[MlpParams], nets: Sequence[MlpParams], tau: float) -> Sequence[MlpParams]:
    """Polyak averaging in place: target <- tau * online + (1 - tau) * target"""
    for target, net in zip(targets, nets):
        if target.sizes != net.sizes:
            raise ShapeError(f"Target sizes {target.sizes} differ from online sizes {net.sizes}")
        for t_arr, n_arr in zip(target.arrays(), net.arrays()):
            t_arr *= 1.0 - tau
            t_arr += tau * n_arr
        target.bump()
    return targets


class SacAgent:
    """Actor, twin critics, their targets, optimizers, temperature and replay"""

    def __init__(self, obs_dim: int, action_dim: int, config: Optional[SacConfig] = None, seed: int = 0):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.config = config or SacConfig()
        self.seed = seed
        self.rng = np.random.default_rng(seed)

        cfg = self.config
        hidden = cfg.hidden_size
        self.policy = init_mlp(
            [obs_dim, hidden, hidden, 2 * action_dim], ("relu", "relu", "identity"), self.rng, final_scale=1e-3
        )
        self.critics = [
            init_mlp([obs_dim + action_dim, hidden, hidden, 1], ("relu", "relu", "identity"), self.rng)
            for _ in range(2)
        ]
        self.targets = [copy_params(critic) for critic in self.critics]
        self.policy_opt = AdamState.for_params(self.policy, cfg.actor_lr, cfg.weight_decay)
        self.critic_opts = [AdamState.for_params(c, cfg.critic_lr, cfg.weight_decay) for c in self.critics]

        # log(alpha) held as a 1x1 identity layer so it shares the Adam machinery
        self.log_alpha = MlpParams(
            sizes=(1, 1),
            activations=("identity",),
            weights=[np.array([[np.log(max(cfg.alpha, 1e-8))]])],
            biases=[np.zeros(1)],
        )
        self.alpha_opt = AdamState.for_params(self.log_alpha, cfg.alpha_lr)
        self.target_entropy = -float(action_dim)

        self.buffer = PerBuffer(
            cfg.buffer_size, obs_dim, action_dim, alpha=cfg.per_alpha, beta0=cfg.per_beta0, rng=self.rng
        )
        self.updates = 0

    @property
    def alpha(self) -> float:
        if self.config.auto_alpha:
            return float(np.exp(self.log_alpha.weights[0][0, 0]))
        return self.config.alpha

    def act(self, obs: np.ndarray, stochastic: bool = True) -> np.ndarray:
        action, _ = sample_action(self.policy, obs, stochastic=stochastic, rng=self.rng)
        return action

    def random_action(self) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, self.action_dim)

    def remember(self, obs, action, reward, next_obs, done):
        self.buffer.add(Transition(
            obs=np.asarray(obs, dtype=float),
            action=np.asarray(action, dtype=float),
            reward=float(reward),
            next_obs=np.asarray(next_obs, dtype=float),
            done=bool(done),
        ))

    def update(self, progress: float = 0.0) -> Optional[Dict[str, float]]:
        """One SAC update; None while the buffer holds less than a batch"""
        cfg = self.config
        if len(self.buffer) < cfg.batch_size:
            return None

        batch, weights, indices = self.buffer.sample(cfg.batch_size, self.buffer.beta_at(progress))
        alpha = self.alpha
        q_losses, priorities, _ = update_critics(
            batch, weights, self.critics, self.critic_opts, self.targets, self.policy, alpha, cfg.gamma, self.rng
        )
        self.buffer.update_priorities(indices, priorities)
        pi_loss, log_prob = update_actor(batch.obs, self.critics, self.policy, self.policy_opt, alpha, self.rng)

        if cfg.auto_alpha:
            # d/dlog_alpha of -log_alpha * mean(log_prob + target_entropy)
            grad = -float(np.mean(log_prob + self.target_entropy))
            if np.isfinite(grad):
                adam_step(self.alpha_opt, self.log_alpha, MlpGrads(
                    weights=[np.array([[grad]])], biases=[np.zeros(1)], input=np.zeros(1)
                ))

        soft_update(self.targets, self.critics, cfg.tau)
        self.updates += 1
        return {"q_loss": float(np.mean(q_losses)), "pi_loss": float(pi_loss), "alpha": self.alpha}

    def snapshot(self) -> MlpParams:
        """Independent copy of the policy for concurrent evaluation"""
        return copy_params(self.policy)

    def save(self, path: Path, include_buffer: bool = False, extra_arrays: Optional[Dict[str, np.ndarray]] = None) -> Path:
        arrays: Dict[str, np.ndarray] = {}
        arrays.update(params_to_arrays(self.policy, "policy"))
        arrays.update(self.policy_opt.to_arrays("policy_opt"))
        for i in range(2):
            arrays.update(params_to_arrays(self.critics[i], f"critic{i}"))
            arrays.update(params_to_arrays(self.targets[i], f"target{i}"))
            arrays.update(self.critic_opts[i].to_arrays(f"critic{i}_opt"))
        arrays.update(params_to_arrays(self.log_alpha, "log_alpha"))
        arrays.update(self.alpha_opt.to_arrays("log_alpha_opt"))
        if include_buffer:
            arrays.update(self.buffer.to_arrays())
        if extra_arrays:
            arrays.update(extra_arrays)

        meta = {
            "kind": "sac_agent",
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "seed": self.seed,
            "updates": self.updates,
            "config": self.config.model_dump(),
            "policy": params_meta(self.policy),
            "critic": params_meta(self.critics[0]),
            "rng_state": self.rng.bit_generator.state,
            "has_buffer": include_buffer,
        }
        return save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: Path) -> Tuple["SacAgent", Dict[str, np.ndarray]]:
        """Restore an agent; also returns the raw arrays for extra records stored alongside"""
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "sac_agent":
            raise ConfigurationError(f"{path} is not an agent checkpoint")
        agent = cls(meta["obs_dim"], meta["action_dim"], SacConfig(**meta["config"]), seed=meta["seed"])
        agent.policy = params_from_arrays(arrays, "policy", meta["policy"])
        agent.critics = [params_from_arrays(arrays, f"critic{i}", meta["critic"]) for i in range(2)]
        agent.targets = [params_from_arrays(arrays, f"target{i}", meta["critic"]) for i in range(2)]
        agent.policy_opt.load_arrays(arrays, "policy_opt")
        for i in range(2):
            agent.critic_opts[i].load_arrays(arrays, f"critic{i}_opt")
        agent.log_alpha = params_from_arrays(arrays, "log_alpha", params_meta(agent.log_alpha))
        agent.alpha_opt.load_arrays(arrays, "log_alpha_opt")
        if meta.get("has_buffer"):
            agent.buffer.load_arrays(arrays)
        agent.updates = int(meta["updates"])
        agent.rng.bit_generator.state = meta["rng_state"]
        logger.info(f"Loaded agent from {path} after {agent.updates} updates")
        return agent, arrays
