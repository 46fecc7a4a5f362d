"""Continual training engine.

Each task gets a fresh adapter per adapted layer. Constrained strategies
train in two stages: the first ``1 - stage2_fraction`` of the epochs on the
task loss alone, the rest with ``lambda_orth`` times an orthogonality
penalty added. After every task the adapter is frozen and the per-layer
history is recompressed.

Strategies
----------
aod_svd, aod_random, aod_summation
    Interference-vector penalty with the history taken from the rank-r SVD
    compression, a single randomly drawn past adapter per step, or the
    factor-wise sum of past adapters.
param_orth
    Static penalty on the overlap between the current and historical A
    factors.
sequential_ft, rehearsal
    Unconstrained training; rehearsal mixes a seeded subsample of earlier
    tasks' training data into the current task.
individual, multitask
    Reference runs: every task trained from the base network on its own,
    or one adapter trained on all tasks pooled.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aod
from .errors import ConfigError, TrainingDivergence
from .evalkit import PerformanceMatrix
from .gradnet import LayerParams, NetworkSpec, Role, backward, diffusion_batch, effective_weights, save_network
from .history import compress_svd, strategy_random, strategy_summation
from .lora import AdapterMode, HistoryFactors, LoraAdapter, freeze_current, init_adapter
from .optim import Adam
from .taskgen import TaskSpec, TaskSuite, eval_performance

log = logging.getLogger(__name__)

STRATEGIES = (
    "aod_svd",
    "aod_random",
    "aod_summation",
    "param_orth",
    "sequential_ft",
    "individual",
    "multitask",
    "rehearsal",
)
AOD_STRATEGIES = ("aod_svd", "aod_random", "aod_summation")
CONSTRAINED = AOD_STRATEGIES + ("param_orth",)

# seeded stream tags
_ADAPTER, _SHUFFLE, _NOISE, _HISTORY_DRAW, _REHEARSAL = range(100, 105)


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


@dataclass
class TrainConfig:
    epochs_per_task: int = 10
    learning_rate: float = 1e-4
    lora_rank: int = 4
    stage2_fraction: float = 0.5
    lambda_orth: float = 1.0
    strategy: str = "aod_svd"
    rehearsal_fraction: float = 0.0
    seed: int = 0
    batch_size: int = 128
    iv_scope: str = "lora_b_only"
    orth_squared: bool = False
    normalize_iv: bool = False
    adapted_layers: tuple[int, ...] | None = None  # None adapts every layer
    shared_adapter_init: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        for name in ("epochs_per_task", "lora_rank", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lambda_orth < 0:
            raise ConfigError("lambda_orth must be non-negative")
        for name in ("stage2_fraction", "rehearsal_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        aod.Scope(self.iv_scope)

    @property
    def stage_epochs(self) -> tuple[int, int]:
        """(unconstrained, constrained) epoch counts."""
        if self.strategy not in CONSTRAINED:
            return self.epochs_per_task, 0
        second = int(np.floor(self.epochs_per_task * self.stage2_fraction + 0.5))
        return self.epochs_per_task - second, second


@dataclass
class RunState:
    spec: NetworkSpec
    params: list[LayerParams]
    config: TrainConfig
    schedule: object = None
    position: int = 0
    history: dict[int, HistoryFactors] = field(default_factory=dict)
    rehearsal_x: list[np.ndarray] = field(default_factory=list)
    rehearsal_y: list[np.ndarray] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def adapted_layers(self) -> list[int]:
        layers = self.config.adapted_layers
        return list(range(len(self.params))) if layers is None else sorted(layers)

    def frozen_adapters(self, layer: int) -> tuple[LoraAdapter, ...]:
        return self.params[layer].adapters.frozen


def new_state(suite: TaskSuite, config: TrainConfig) -> RunState:
    return RunState(suite.spec, suite.fresh_params(), config, suite.schedule)


def optimizer_step(opt: Adam, params: dict, grads: dict) -> None:
    """Adam update of the trainable arrays in ``params`` (in place)."""
    opt.step(params, grads)


# -- one task ---------------------------------------------------------------------


def _history_source(state: RunState, step_rng):
    """Per-layer history factors for the interference vector of one step."""
    strategy = state.config.strategy
    layers = [l for l in state.adapted_layers() if state.frozen_adapters(l)]
    if not layers:
        return {}
    if strategy == "aod_svd":
        return {l: state.history[l] for l in layers}
    if strategy == "aod_random":
        first = state.frozen_adapters(layers[0])
        pick = strategy_random(first, step_rng)
        k = next(i for i, ad in enumerate(first) if ad is pick)
        return {l: HistoryFactors(state.frozen_adapters(l)[k].b, state.frozen_adapters(l)[k].a) for l in layers}
    if strategy == "aod_summation":
        return {l: strategy_summation(state.frozen_adapters(l)) for l in layers}
    raise ValueError(strategy)


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


class _TaskTrainer:
    """Holds the per-task caches shared by every step of one task."""

    def __init__(self, state: RunState, task: TaskSpec, adapter_id: int, rng_position: int, data=None):
        self.state, self.task = state, task
        cfg = state.config
        self.cfg = cfg
        self.layers = state.adapted_layers()
        for l in self.layers:
            p = state.params[l]
            d_out, d_in = p.base_weight.shape
            init_pos = 0 if cfg.shared_adapter_init else rng_position
            ad = init_adapter(d_out, d_in, cfg.lora_rank, adapter_id, _rng(cfg.seed, _ADAPTER, init_pos, l))
            p.adapters = dataclasses.replace(p.adapters, current=ad)
        self.opt = Adam(lr=cfg.learning_rate)
        self.shuffle_rng = _rng(cfg.seed, _SHUFFLE, rng_position)
        self.noise_rng = _rng(cfg.seed, _NOISE, rng_position)
        self.draw_rng = _rng(cfg.seed, _HISTORY_DRAW, rng_position)
        # frozen part of every effective weight is constant within a task
        self.fixed = []
        for p in state.params:
            hist = p.adapters.history_delta(p.base_weight.shape)
            self.fixed.append(p.base_weight if hist is None else p.base_weight + hist)
        if data is None:
            xs = [task.train_x] + state.rehearsal_x
            ys = [task.train_y] + state.rehearsal_y if task.train_y is not None else None
            data = (np.vstack(xs), None if ys is None else np.vstack(ys))
        self.x, self.y = data
        # svd and summation histories are fixed for the whole task
        self.fixed_history = self.history_view = self.history_weights = None
        if cfg.strategy in ("aod_svd", "aod_summation") and state.history:
            self.fixed_history = _history_source(state, None)
            self.history_view = aod.history_view(state.params, self.fixed_history)
            self.history_weights = effective_weights(self.history_view, AdapterMode.HISTORY_ONLY)

    def weights(self):
        out = []
        for l, (p, w) in enumerate(zip(self.state.params, self.fixed)):
            cur = p.adapters.current
            out.append(w if cur is None else w + cur.b @ cur.a)
        return out

    def batch(self, idx):
        if self.task.kind == "diffusion":
            return diffusion_batch(self.x[idx], self.noise_rng, self.state.schedule, self.state.spec.layer_dims[-1])
        return self.x[idx], self.y[idx]

    def step(self, idx, constrained: bool) -> tuple[float, float]:
        state, cfg = self.state, self.cfg
        inputs, targets = self.batch(idx)
        loss, grads = backward(state.spec, state.params, inputs, targets, AdapterMode.HISTORY_PLUS_CURRENT, weights=self.weights())
        if not np.isfinite(loss):
            raise TrainingDivergence(f"task loss became {loss} on task {self.task.name}")
        named, g = {}, {}
        cur_b, cur_a = {}, {}
        for l in self.layers:
            cur = state.params[l].adapters.current
            named[(l, "b")], g[(l, "b")] = cur.b, grads[(l, Role.ADAPTER_B)]
            named[(l, "a")], g[(l, "a")] = cur.a, grads[(l, Role.ADAPTER_A)]
            cur_b[l], cur_a[l] = cur.b, cur.a
        penalty = 0.0
        if constrained and state.history:
            if cfg.strategy in AOD_STRATEGIES:
                if self.fixed_history is not None:
                    hist, view, hw = self.fixed_history, self.history_view, self.history_weights
                else:
                    hist, view, hw = _history_source(state, self.draw_rng), None, None
                iv = aod.interference_vector(
                    state.spec, state.params, inputs, targets, hist, cfg.iv_scope, weights=hw, view=view
                )
                if cfg.normalize_iv:
                    iv = aod.normalized(iv)
                layers = sorted(iv.per_layer)
                if iv.scope is aod.Scope.LORA_B_ONLY:
                    sub_b = {l: cur_b[l] for l in layers}
                    penalty = aod.orth_loss(iv, sub_b, cfg.orth_squared)
                    for l, gl in aod.orth_loss_grad(iv, sub_b, cfg.orth_squared).items():
                        g[(l, "b")] = g[(l, "b")] + cfg.lambda_orth * gl
                else:
                    penalty, gb, ga = aod.orth_loss_grad_full(
                        iv, {l: cur_b[l] for l in layers}, {l: cur_a[l] for l in layers}, cfg.orth_squared
                    )
                    for l in layers:
                        g[(l, "b")] = g[(l, "b")] + cfg.lambda_orth * gb[l]
                        g[(l, "a")] = g[(l, "a")] + cfg.lambda_orth * ga[l]
            elif cfg.strategy == "param_orth":
                ha = {l: state.history[l].a_his for l in self.layers if l in state.history}
                sub_a = {l: cur_a[l] for l in ha}
                penalty = aod.param_orth_loss(ha, sub_a)
                for l, gl in aod.param_orth_loss_grad(ha, sub_a).items():
                    g[(l, "a")] = g[(l, "a")] + cfg.lambda_orth * gl
            if not np.isfinite(penalty):
                raise TrainingDivergence(f"orthogonality penalty became {penalty} on task {self.task.name}")
        optimizer_step(self.opt, named, g)
        return loss, penalty

    def run(self):
        stage1, stage2 = self.cfg.stage_epochs
        epochs = []
        n = self.x.shape[0]
        for epoch in range(stage1 + stage2):
            constrained = epoch >= stage1
            losses, pens = [], []
            for idx in _batches(n, self.cfg.batch_size, self.shuffle_rng):
                loss, pen = self.step(idx, constrained)
                losses.append(loss)
                pens.append(pen)
            epochs.append({"epoch": epoch, "stage": 2 if constrained else 1,
                           "loss": float(np.mean(losses)), "orth": float(np.mean(pens))})
        return epochs


def _pad_rank(hist: HistoryFactors, r: int) -> HistoryFactors:
    # layers narrower than r get zero singular directions so b_his matches the adapter's b
    k = hist.b_his.shape[1]
    if k == r:
        return hist
    b = np.hstack([hist.b_his, np.zeros((hist.b_his.shape[0], r - k))])
    a = np.vstack([hist.a_his, np.zeros((r - k, hist.a_his.shape[1]))])
    return HistoryFactors(b, a, hist.retained_energy, hist.source_task_count)


def _finish_task(state: RunState) -> None:
    r = state.config.lora_rank
    for l in state.adapted_layers():
        p = state.params[l]
        stack = freeze_current(p.adapters)
        d_out, d_in = p.base_weight.shape
        hist = _pad_rank(compress_svd(stack.frozen, min(r, d_out, d_in)), r)
        state.history[l] = hist
        p.adapters = dataclasses.replace(stack, compressed=hist, use_compressed=False)


def train_task(
    state: RunState,
    task: TaskSpec,
    adapter_id: int | None = None,
    rng_position: int | None = None,
    data=None,
) -> RunState:
    """Train one task in place, freeze its adapter and recompress history."""
    cfg = state.config
    adapter_id = state.position if adapter_id is None else adapter_id
    rng_position = state.position if rng_position is None else rng_position
    trainer = _TaskTrainer(state, task, adapter_id, rng_position, data)
    epochs = trainer.run()
    _finish_task(state)
    if cfg.strategy == "rehearsal" and cfg.rehearsal_fraction > 0:
        k = int(np.floor(task.train_size * cfg.rehearsal_fraction + 0.5))
        pick = np.sort(_rng(cfg.seed, _REHEARSAL, rng_position).choice(task.train_size, size=k, replace=False))
        state.rehearsal_x.append(task.train_x[pick])
        if task.train_y is not None:
            state.rehearsal_y.append(task.train_y[pick])
    stage1, stage2 = cfg.stage_epochs
    state.events.append({
        "event": "task_done", "position": state.position, "task": task.name, "task_id": task.task_id,
        "stage1_epochs": stage1, "stage2_epochs": stage2, "epochs": epochs,
        "final_loss": epochs[-1]["loss"] if epochs else None,
    })
    state.position += 1
    return state


def _save_checkpoint(state: RunState, root: Path, k: int, task: TaskSpec) -> Path:
    d = root / f"task_{k}"
    save_network(d, state.spec, state.params)
    meta = dict(state.events[-1])
    meta.update({"strategy": state.config.strategy, "seed": state.config.seed})
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    state.checkpoints.append(d)
    return d


@dataclass
class RunArtifacts:
    """Everything a finished run leaves behind besides its performance matrix."""

    task_names: list[str]
    adapters: list[list[LoraAdapter]]  # [task][layer], in training order
    events: list[dict]
    checkpoints: list[Path]
    final_params: list[list[LayerParams]]


def _adapter_snapshot(state: RunState) -> list[LoraAdapter]:
    return [state.params[l].adapters.frozen[-1] for l in state.adapted_layers()]


def run_sequence(suite: TaskSuite, config: TrainConfig, checkpoint_root=None) -> tuple[PerformanceMatrix, RunArtifacts]:
    """Train through ``suite`` in order and evaluate every task after each one.

    Row ``t`` of the matrix holds the scores on all tasks after finishing
    task ``t``; entries right of the diagonal are tasks not seen yet.
    """
    T = len(suite)
    if T < 1:
        raise ConfigError("a run needs at least one task")
    root = Path(checkpoint_root) if checkpoint_root is not None else None
    R = np.zeros((T, T))
    adapters, events, ckpts, finals = [], [], [], []
    spec = suite.spec

    def persist(state, k, task):
        if root is not None:
            ckpts.append(_save_checkpoint(state, root, k, task))

    if config.strategy == "individual":
        own = []
        for t, task in enumerate(suite):
            state = train_task(new_state(suite, config), task, adapter_id=t, rng_position=0)
            own.append(state.params)
            adapters.append(_adapter_snapshot(state))
            events.extend(state.events)
            persist(state, t, task)
            for i, other in enumerate(suite):
                R[t, i] = eval_performance(spec, own[min(i, t)], other)
        finals = own
    elif config.strategy == "multitask":
        state = new_state(suite, config)
        xs = np.vstack([task.train_x for task in suite])
        ys = np.vstack([task.train_y for task in suite]) if suite.kind == "regression" else None
        train_task(state, suite[0], adapter_id=0, rng_position=0, data=(xs, ys))
        state.events[-1]["task"] = "pooled"
        row = [eval_performance(spec, state.params, task) for task in suite]
        R[:] = row
        adapters.append(_adapter_snapshot(state))
        events.extend(state.events)
        for t, task in enumerate(suite):
            persist(state, t, task)
        finals = [state.params]
    else:
        state = new_state(suite, config)
        for t, task in enumerate(suite):
            train_task(state, task)
            for i, other in enumerate(suite):
                R[t, i] = eval_performance(spec, state.params, other)
            adapters.append(_adapter_snapshot(state))
            persist(state, t, task)
            log.info("%s seed=%d task %d/%d (%s) done", config.strategy, config.seed, t + 1, T, task.name)
        events = state.events
        finals = [state.params]
    names = [task.name for task in suite]
    return PerformanceMatrix(R, names), RunArtifacts(names, adapters, events, ckpts, finals)


def measure_step_time(suite: TaskSuite, config: TrainConfig, steps: int = 200, warmup: int = 20) -> float:
    """Median wall time of one constrained-stage step on the second task.

    The first task is trained for one epoch to create a history; strategies
    without a constraint are timed on the same second-task steps.
    """
    cfg = dataclasses.replace(config, epochs_per_task=1)
    state = new_state(suite, cfg)
    train_task(state, suite[0])
    trainer = _TaskTrainer(state, suite[1], state.position, state.position)
    constrained = cfg.strategy in CONSTRAINED
    rng = _rng(cfg.seed, 999)
    n = trainer.x.shape[0]
    times = []
    for s in range(warmup + steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        t0 = time.perf_counter()
        trainer.step(idx, constrained)
        if s >= warmup:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))
