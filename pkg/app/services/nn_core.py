# app/services/nn_core.py
"""Dense networks in numpy with hand-written reverse mode and AdamW.

Inputs are row vectors: a batch is (B, in) and layer l computes
z = a @ W[l] + b[l], a' = act(z). Unbatched (in,) inputs are accepted and
return (out,) outputs.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.services.errors import (
    ConfigurationError,
    ContractViolation,
    NonFiniteGradientError,
    ShapeError,
    StaleCacheError,
)

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "identity")
CHECKPOINT_FORMAT = 1


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class MlpParams:
    sizes: Tuple[int, ...]
    activations: Tuple[str, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    version: int = 0

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.activations = tuple(self.activations)
        layers = len(self.sizes) - 1
        if layers < 1:
            raise ShapeError("An MLP needs at least one layer")
        if len(self.activations) != layers or len(self.weights) != layers or len(self.biases) != layers:
            raise ShapeError(f"Expected {layers} activations, weights and biases")
        for l, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ContractViolation(f"Unknown activation '{act}' in layer {l}")
            if w.shape != (self.sizes[l], self.sizes[l + 1]) or b.shape != (self.sizes[l + 1],):
                raise ShapeError(
                    f"Layer {l}: weight {w.shape} / bias {b.shape} do not chain sizes {self.sizes}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractViolation(f"Layer {l} holds non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> List[np.ndarray]:
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def bump(self):
        self.version += 1

    def copy(self) -> "MlpParams":
        return copy_params(self)


@dataclass
class MlpCache:
    params_id: int
    version: int
    batched: bool
    inputs: List[np.ndarray]  # input to each layer
    pre: List[np.ndarray]  # pre-activations
    post: List[np.ndarray]  # activations


@dataclass
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input: np.ndarray

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_mlp(
    sizes: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
    final_scale: Optional[float] = None,
) -> MlpParams:
    """
    Uniform fan-in initialization

    Rectifier layers use +-sqrt(6 / fan_in), other layers +-1 / sqrt(fan_in).
    final_scale overrides the output layer range (near zero for policy heads).
    Biases start at zero.
    """
    weights, biases = [], []
    layers = len(sizes) - 1
    for l in range(layers):
        fan_in = sizes[l]
        if final_scale is not None and l == layers - 1:
            limit = final_scale
        elif activations[l] == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-limit, limit, size=(sizes[l], sizes[l + 1])))
        biases.append(np.zeros(sizes[l + 1]))
    return MlpParams(sizes=tuple(sizes), activations=tuple(activations), weights=weights, biases=biases)


def copy_params(params: MlpParams) -> MlpParams:
    return MlpParams(
        sizes=params.sizes,
        activations=params.activations,
        weights=[w.copy() for w in params.weights],
        biases=[b.copy() for b in params.biases],
    )


def mlp_forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    a = x if batched else x[None, :]
    if a.ndim != 2 or a.shape[1] != params.sizes[0]:
        raise ShapeError(f"Input shape {x.shape} does not match first layer width {params.sizes[0]}")

    inputs, pre, post = [], [], []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(a)
        z = a @ w + b
        a = _activate(act, z)
        pre.append(z)
        post.append(a)

    cache = MlpCache(
        params_id=id(params),
        version=params.version,
        batched=batched,
        inputs=inputs,
        pre=pre,
        post=post,
    )
    return (a if batched else a[0]), cache


def mlp_backward(params: MlpParams, cache: MlpCache, output_grad: np.ndarray) -> MlpGrads:
    """Gradients of sum(output_grad * output) w.r.t. parameters and input, summed over the batch"""
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("Cache was produced by different or since-updated parameters")

    delta = np.asarray(output_grad, dtype=float)
    if not cache.batched:
        delta = delta[None, :]
    if delta.shape != cache.post[-1].shape:
        raise ShapeError(f"Output gradient {delta.shape} does not match output {cache.post[-1].shape}")

    grad_w: List[np.ndarray] = [None] * params.n_layers
    grad_b: List[np.ndarray] = [None] * params.n_layers
    for l in reversed(range(params.n_layers)):
        dz = delta * _activation_grad(params.activations[l], cache.pre[l], cache.post[l])
        grad_w[l] = cache.inputs[l].T @ dz
        grad_b[l] = dz.sum(axis=0)
        delta = dz @ params.weights[l].T

    return MlpGrads(weights=grad_w, biases=grad_b, input=delta if cache.batched else delta[0])


@dataclass
class AdamState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, lr: float, weight_decay: float = 0.0) -> "AdamState":
        return cls(
            lr=lr,
            weight_decay=weight_decay,
            m=[np.zeros_like(p) for p in params.arrays()],
            v=[np.zeros_like(p) for p in params.arrays()],
        )

    def to_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array(self.step)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray], prefix: str):
        self.step = int(arrays[f"{prefix}.step"])
        self.m = [np.array(arrays[f"{prefix}.m{i}"]) for i in range(len(self.m))]
        self.v = [np.array(arrays[f"{prefix}.v{i}"]) for i in range(len(self.v))]


def adam_step(state: AdamState, params: MlpParams, grads: MlpGrads) -> MlpParams:
    """One AdamW step in place: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)"""
    arrays = params.arrays()
    grad_arrays = grads.arrays()
    if len(grad_arrays) != len(arrays) or len(state.m) != len(arrays):
        raise ShapeError("Gradient / optimizer state does not match parameters")
    for i, (p, g) in enumerate(zip(arrays, grad_arrays)):
        if g.shape != p.shape:
            raise ShapeError(f"Gradient {i} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NonFiniteGradientError(
                f"Rejected update at optimizer step {state.step}: {bad} non-finite entries in gradient {i}"
            )

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(arrays, grad_arrays)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    params.bump()
    return params


def params_to_arrays(params: MlpParams, prefix: str) -> Dict[str, np.ndarray]:
    out = {}
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.w{l}"] = w
        out[f"{prefix}.b{l}"] = b
    return out


def params_meta(params: MlpParams) -> dict:
    return {"sizes": list(params.sizes), "activations": list(params.activations)}


def params_from_arrays(arrays: Dict[str, np.ndarray], prefix: str, meta: dict) -> MlpParams:
    layers = len(meta["sizes"]) - 1
    try:
        return MlpParams(
            sizes=tuple(meta["sizes"]),
            activations=tuple(meta["activations"]),
            weights=[np.array(arrays[f"{prefix}.w{l}"], dtype=float) for l in range(layers)],
            biases=[np.array(arrays[f"{prefix}.b{l}"], dtype=float) for l in range(layers)],
        )
    except KeyError as e:
        raise ConfigurationError(f"Checkpoint lacks array {e} for network '{prefix}'")


def save_checkpoint(path: Path, arrays: Dict[str, np.ndarray], meta: dict) -> Path:
    """
    Write named arrays plus a JSON metadata record to one .npz archive

    The metadata is stored as the string array "__meta__" and always carries
    "format". No pickled objects are written, so archives load with
    allow_pickle=False.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = dict(meta)
    record["format"] = CHECKPOINT_FORMAT
    with open(path, "wb") as handle:
        np.savez(handle, __meta__=np.array(json.dumps(record, sort_keys=True)), **arrays)
    logger.info(f"Checkpoint written to {path} ({len(arrays)} arrays)")
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise ConfigurationError(f"{path} is not a checkpoint (no metadata record)")
        meta = json.loads(str(archive["__meta__"]))
        arrays = {name: archive[name] for name in archive.files if name != "__meta__"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} has checkpoint format {meta.get('format')}, expected {CHECKPOINT_FORMAT}")
    return arrays, meta
