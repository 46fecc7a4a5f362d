"""Small feed-forward network with exact reverse-mode gradients.

Each affine layer computes ``h @ W.T + bias`` where ``W`` is the effective
weight assembled by :func:`contilora.lora.effective_weight`. Gradients are
reported per layer for the effective weight, the bias, the current adapter
factors and the history factors, so callers can pick whichever role they
train or constrain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import matcore
from .errors import DimensionError, UndefinedInputError
from .lora import AdapterMode, AdapterStack, HistoryFactors, LoraAdapter, effective_weight


class Role(str, Enum):
    EFFECTIVE_WEIGHT = "effective_weight"
    BIAS = "bias"
    ADAPTER_B = "adapter_B"
    ADAPTER_A = "adapter_A"
    HISTORY_B = "history_B"
    HISTORY_A = "history_A"


GradientBundle = dict  # (layer index, Role) -> ndarray


@dataclass(frozen=True)
class NetworkSpec:
    layer_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise DimensionError(f"invalid layer dims {self.layer_dims}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


@dataclass
class LayerParams:
    base_weight: np.ndarray
    base_bias: np.ndarray
    adapters: AdapterStack = field(default_factory=AdapterStack)


def _tanh_grad(z, h):
    return 1.0 - h * h


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, h):
    return (z > 0).astype(np.float64)


_ACTIVATIONS = {"tanh": (np.tanh, _tanh_grad), "relu": (_relu, _relu_grad)}


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> list[LayerParams]:
    """Gaussian init scaled by ``1/sqrt(fan_in)``, zero biases, empty stacks."""
    layers = []
    for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
        layers.append(LayerParams(w, np.zeros(d_out)))
    return layers


def _check_input(spec, params, x):
    if x.ndim != 2 or x.shape[0] < 1:
        raise UndefinedInputError(f"input batch must be a non-empty 2-D array, got shape {x.shape}")
    if x.shape[1] != spec.layer_dims[0]:
        raise DimensionError(f"input has {x.shape[1]} columns, network expects {spec.layer_dims[0]}")
    if len(params) != spec.n_layers:
        raise DimensionError(f"{len(params)} layer params for a {spec.n_layers}-layer network")


def effective_weights(params: Sequence[LayerParams], mode) -> list[np.ndarray]:
    return [effective_weight(p.base_weight, p.adapters, mode) for p in params]


def _forward_cache(spec, params, x, mode, weights=None):
    act, _ = _ACTIVATIONS[spec.activation]
    weights = weights if weights is not None else effective_weights(params, mode)
    hs, zs = [x], []
    h = x
    for i, (p, w) in enumerate(zip(params, weights)):
        z = h @ w.T + p.base_bias
        zs.append(z)
        h = act(z) if i < spec.n_layers - 1 else z
        hs.append(h)
    return weights, zs, hs


def forward(spec: NetworkSpec, params: Sequence[LayerParams], x, mode=AdapterMode.HISTORY_PLUS_CURRENT) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_input(spec, params, x)
    return _forward_cache(spec, params, x, AdapterMode(mode))[2][-1]


def mse_loss(pred, target) -> float:
    """Mean over all entries of the squared difference."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    if pred.size == 0:
        raise UndefinedInputError("mse of an empty batch is undefined")
    diff = pred - target
    return float(np.mean(diff * diff))


def backward(
    spec: NetworkSpec,
    params: Sequence[LayerParams],
    inputs,
    targets,
    mode=AdapterMode.HISTORY_PLUS_CURRENT,
    loss_kind: str = "mse",
    weights=None,
) -> tuple[float, GradientBundle]:
    """MSE loss and its exact gradient for every applicable parameter role.

    Adapter roles appear only when the mode includes the current adapter;
    history roles only when the layer composes its history from attached
    factors (``use_compressed``) and the mode includes history.
    """
    if loss_kind != "mse":
        raise ValueError(f"unsupported loss kind {loss_kind!r}")
    mode = AdapterMode(mode)
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    _check_input(spec, params, x)
    weights, zs, hs = _forward_cache(spec, params, x, mode, weights)
    out = hs[-1]
    if y.shape != out.shape:
        raise DimensionError(f"targets {y.shape} do not match outputs {out.shape}")
    diff = out - y
    loss = float(np.mean(diff * diff))
    delta = diff * (2.0 / diff.size)
    _, act_grad = _ACTIVATIONS[spec.activation]
    uses_current = mode in (AdapterMode.HISTORY_PLUS_CURRENT, AdapterMode.CURRENT_ONLY)
    uses_history = mode in (AdapterMode.HISTORY_ONLY, AdapterMode.HISTORY_PLUS_CURRENT)
    grads: GradientBundle = {}
    for i in range(spec.n_layers - 1, -1, -1):
        g = delta.T @ hs[i]
        grads[(i, Role.EFFECTIVE_WEIGHT)] = g
        grads[(i, Role.BIAS)] = delta.sum(axis=0)
        stack = params[i].adapters
        if uses_current and stack.current is not None:
            grads[(i, Role.ADAPTER_B)] = g @ stack.current.a.T
            grads[(i, Role.ADAPTER_A)] = stack.current.b.T @ g
        if uses_history and stack.use_compressed:
            grads[(i, Role.HISTORY_B)] = g @ stack.compressed.a_his.T
            grads[(i, Role.HISTORY_A)] = stack.compressed.b_his.T @ g
        if i > 0:
            delta = (delta @ weights[i]) * act_grad(zs[i - 1], hs[i])
    return loss, grads


# -- toy diffusion ---------------------------------------------------------

TIME_FEATURES = 3


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete forward-noising schedule indexed ``t = 1..T``."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty sequence in (0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.05) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, T))

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)


def time_features(t: np.ndarray, T: int) -> np.ndarray:
    s = np.asarray(t, dtype=np.float64) / T
    return np.stack([s, np.sin(2 * np.pi * s), np.cos(2 * np.pi * s)], axis=1)


def noised_inputs(x0, t, eps, schedule: NoiseSchedule, condition=None) -> np.ndarray:
    """Network input ``[x_t, time features, condition]`` for timesteps ``t`` (1-based).

    ``condition`` is either one vector shared by the batch or one row per sample.
    """
    ab = schedule.alpha_bars[np.asarray(t) - 1][:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    parts = [xt, time_features(t, schedule.T)]
    if condition is not None:
        c = np.asarray(condition, dtype=np.float64)
        if c.size:
            parts.append(np.broadcast_to(c, (xt.shape[0], c.shape[-1])))
    return np.hstack(parts)


def diffusion_batch(clean_batch, rng: np.random.Generator, schedule: NoiseSchedule, data_dim: int | None = None):
    """Draw ``t ~ U{1..T}`` and ``eps ~ N(0, I)``; return (inputs, eps targets).

    Columns past ``data_dim`` are conditioning and pass through un-noised.
    """
    batch = np.asarray(clean_batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise UndefinedInputError(f"clean batch must be non-empty 2-D, got shape {batch.shape}")
    d = batch.shape[1] if data_dim is None else data_dim
    x0, cond = batch[:, :d], batch[:, d:]
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return noised_inputs(x0, t, eps, schedule, cond), eps


def diffusion_loss(spec, params, clean_batch, rng, schedule, mode=AdapterMode.HISTORY_PLUS_CURRENT):
    """Epsilon-prediction denoising loss and gradients on one noised draw."""
    inputs, eps = diffusion_batch(clean_batch, rng, schedule, spec.layer_dims[-1])
    return backward(spec, params, inputs, eps, mode)


# -- checkpoints -----------------------------------------------------------


def _adapter_entry(prefix, b, a, **extra):
    return {"b": f"{prefix}_B.bin", "a": f"{prefix}_A.bin", "d_out": b.shape[0], "d_in": a.shape[1], "r": b.shape[1], **extra}


def save_network(path, spec: NetworkSpec, params: Sequence[LayerParams], extra: dict | None = None) -> None:
    """Write matrices as matcore binaries plus ``manifest.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, p in enumerate(params):
        entry = {"weight": f"layer{i}_weight.bin", "bias": f"layer{i}_bias.bin", "adapters": []}
        matcore.write_matrix(root / entry["weight"], p.base_weight)
        matcore.write_matrix(root / entry["bias"], p.base_bias[None, :])
        stack = p.adapters
        for ad in stack.frozen:
            prefix = f"layer{i}_task{ad.task_id}"
            entry["adapters"].append(_adapter_entry(prefix, ad.b, ad.a, task_id=ad.task_id, trainable=False))
            matcore.write_matrix(root / f"{prefix}_B.bin", ad.b)
            matcore.write_matrix(root / f"{prefix}_A.bin", ad.a)
        if stack.current is not None:
            ad = stack.current
            prefix = f"layer{i}_current"
            entry["current"] = _adapter_entry(prefix, ad.b, ad.a, task_id=ad.task_id, trainable=True)
            matcore.write_matrix(root / f"{prefix}_B.bin", ad.b)
            matcore.write_matrix(root / f"{prefix}_A.bin", ad.a)
        if stack.compressed is not None:
            h = stack.compressed
            prefix = f"layer{i}_history"
            entry["history"] = _adapter_entry(
                prefix, h.b_his, h.a_his, task_id=-1,
                retained_energy=h.retained_energy, source_task_count=h.source_task_count,
                active=stack.use_compressed,
            )
            matcore.write_matrix(root / f"{prefix}_B.bin", h.b_his)
            matcore.write_matrix(root / f"{prefix}_A.bin", h.a_his)
        layers.append(entry)
    manifest = {"layer_dims": list(spec.layer_dims), "activation": spec.activation, "layers": layers}
    if extra:
        manifest["extra"] = extra
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_network(path) -> tuple[NetworkSpec, list[LayerParams], dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = NetworkSpec(tuple(manifest["layer_dims"]), manifest["activation"])
    params = []
    for entry in manifest["layers"]:
        frozen = tuple(
            LoraAdapter(matcore.read_matrix(root / e["b"]), matcore.read_matrix(root / e["a"]), e["task_id"], trainable=False)
            for e in entry["adapters"]
        )
        current = None
        if "current" in entry:
            e = entry["current"]
            current = LoraAdapter(matcore.read_matrix(root / e["b"]), matcore.read_matrix(root / e["a"]), e["task_id"])
        compressed, active = None, False
        if "history" in entry:
            e = entry["history"]
            compressed = HistoryFactors(
                matcore.read_matrix(root / e["b"]), matcore.read_matrix(root / e["a"]),
                e["retained_energy"], e["source_task_count"],
            )
            active = e["active"]
        stack = AdapterStack(frozen, current, compressed, active)
        params.append(
            LayerParams(matcore.read_matrix(root / entry["weight"]), matcore.read_matrix(root / entry["bias"])[0], stack)
        )
    return spec, params, manifest.get("extra", {})
