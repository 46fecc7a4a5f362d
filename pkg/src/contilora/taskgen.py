"""Synthetic continual-learning task suites.

Two suites are provided:

* ``regression``: teachers share a random backbone and differ in their
  output head, so tasks share structure but pull the head in different
  directions.
* ``diffusion``: each task is a 2-D point cloud from a fixed menu of
  shapes, learned with an epsilon-prediction denoising loss on top of a
  base network pretrained on an isotropic Gaussian.

Everything is a pure function of the suite seed.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import matcore
from .errors import ConfigError, UndefinedInputError
from .gradnet import (
    TIME_FEATURES,
    LayerParams,
    NetworkSpec,
    NoiseSchedule,
    Role,
    backward,
    diffusion_batch,
    forward,
    init_params,
    load_network,
    mse_loss,
    noised_inputs,
    save_network,
)
from .lora import AdapterMode, AdapterStack
from .optim import Adam

EVAL_DRAWS = 16

# stream tags for seeded generators
_BACKBONE, _HEAD, _TRAIN, _EVAL, _GRID, _BASE, _PRETRAIN, _MENU, _REF, _COND = range(10)


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


@dataclass
class TaskSpec:
    task_id: int
    name: str
    kind: str
    train_x: np.ndarray
    train_y: np.ndarray | None
    eval_x: np.ndarray
    eval_y: np.ndarray
    generator: dict = field(default_factory=dict)
    teacher: tuple | None = None

    @property
    def train_size(self) -> int:
        return self.train_x.shape[0]

    @property
    def eval_size(self) -> int:
        n = self.eval_x.shape[0]
        return n // EVAL_DRAWS if self.kind == "diffusion" else n


@dataclass
class TaskSuite:
    """An ordered list of tasks plus the base network they are learned on."""

    kind: str
    seed: int
    tasks: list[TaskSpec]
    spec: NetworkSpec
    base_params: list[LayerParams]
    schedule: NoiseSchedule | None = None

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    def fresh_params(self) -> list[LayerParams]:
        """Deep copy of the base network with empty adapter stacks."""
        return [LayerParams(p.base_weight.copy(), p.base_bias.copy(), AdapterStack()) for p in self.base_params]

    def reordered(self, order: Sequence[int]) -> "TaskSuite":
        if sorted(order) != list(range(len(self.tasks))):
            raise ConfigError(f"task order {list(order)} is not a permutation of 0..{len(self.tasks) - 1}")
        return TaskSuite(self.kind, self.seed, [self.tasks[i] for i in order], self.spec, self.base_params, self.schedule)


# -- regression -------------------------------------------------------------


def make_regression_suite(
    seed: int,
    n_tasks: int,
    d_in: int = 8,
    hidden: int = 32,
    d_out: int = 4,
    train_size: int = 2048,
    eval_size: int = 512,
    head_seeds: Sequence[int] | None = None,
) -> TaskSuite:
    """Teacher ``t`` = shared tanh backbone + task-specific linear head.

    The student base network reuses the backbone with an unrelated head.
    ``head_seeds`` overrides the per-task head seeds (equal seeds give
    equal teachers).
    """
    if n_tasks < 2:
        raise ConfigError("a regression suite needs at least two tasks")
    head_seeds = list(head_seeds) if head_seeds is not None else list(range(n_tasks))
    if len(head_seeds) != n_tasks:
        raise ConfigError("head_seeds must have one entry per task")
    spec = NetworkSpec((d_in, hidden, d_out), "tanh")
    backbone = _rng(seed, _BACKBONE).normal(0.0, 1.5 / np.sqrt(d_in), size=(hidden, d_in))
    backbone_bias = _rng(seed, _BACKBONE, 1).normal(0.0, 0.1, size=hidden)

    def head(rng):
        return rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(d_out, hidden)), rng.normal(0.0, 0.1, size=d_out)

    tasks = []
    for t in range(n_tasks):
        w2, b2 = head(_rng(seed, _HEAD, head_seeds[t]))
        teacher = (spec, [LayerParams(backbone.copy(), backbone_bias.copy()), LayerParams(w2, b2)])
        x_tr = _rng(seed, _TRAIN, t).uniform(-1.0, 1.0, size=(train_size, d_in))
        x_ev = _rng(seed, _EVAL, t).uniform(-1.0, 1.0, size=(eval_size, d_in))
        tasks.append(
            TaskSpec(
                t, f"head{t}", "regression",
                x_tr, forward(spec, teacher[1], x_tr, AdapterMode.BASE_ONLY),
                x_ev, forward(spec, teacher[1], x_ev, AdapterMode.BASE_ONLY),
                {"head_seed": int(head_seeds[t])}, teacher,
            )
        )
    w2, b2 = head(_rng(seed, _BASE))
    base = [LayerParams(backbone.copy(), backbone_bias.copy()), LayerParams(w2, b2)]
    return TaskSuite("regression", seed, tasks, spec, base)


# -- toy diffusion ------------------------------------------------------------


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _ring(rng, n):
    th = rng.uniform(0.0, 2 * np.pi, size=n)
    r = rng.uniform(0.95, 1.05, size=n)
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _two_clusters(rng, n):
    centers = np.array([[-1.0, -0.5], [1.0, 0.5]])
    return centers[rng.integers(2, size=n)] + _disk(rng, n, 0.3)


def _grid9(rng, n):
    g = np.array([[x, y] for x in (-1.0, 0.0, 1.0) for y in (-1.0, 0.0, 1.0)])
    return g[rng.integers(9, size=n)] + _disk(rng, n, 0.15)


def _spiral(rng, n):
    s = rng.uniform(size=n)
    th = 3 * np.pi * s
    r = 0.2 + s
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1) + _disk(rng, n, 0.05)


def _segment(rng, n):
    x = rng.uniform(-1.0, 1.0, size=n)
    return np.stack([x, 0.5 * x + rng.uniform(-0.05, 0.05, size=n)], axis=1)


def _checker(rng, n):
    cells = np.array([[i, j] for i in range(4) for j in range(4) if (i + j) % 2 == 0], dtype=float)
    lo = cells[rng.integers(len(cells), size=n)] * 0.5 - 1.0
    return lo + rng.uniform(0.0, 0.5, size=(n, 2))


def _crescent(rng, n):
    th = rng.uniform(0.0, np.pi, size=n)
    r = rng.uniform(0.9, 1.1, size=n)
    return np.stack([r * np.cos(th), r * np.sin(th) - 0.5], axis=1)


def _cross(rng, n):
    pos = rng.uniform(-1.0, 1.0, size=n)
    width = rng.uniform(-0.08, 0.08, size=n)
    horiz = rng.integers(2, size=n).astype(bool)
    return np.where(horiz[:, None], np.stack([pos, width], 1), np.stack([width, pos], 1))


# name -> (raw sampler, bound on the raw Euclidean norm)
SHAPES = {
    "ring": (_ring, 1.05),
    "two_clusters": (_two_clusters, np.hypot(1.0, 0.5) + 0.3),
    "grid9": (_grid9, np.sqrt(2.0) + 0.15),
    "spiral": (_spiral, 1.25),
    "segment": (_segment, np.hypot(1.0, 0.55)),
    "checker": (_checker, np.sqrt(2.0)),
    "crescent": (_crescent, 1.1 + 0.5),
    "cross": (_cross, np.hypot(1.0, 0.08)),
}


@functools.lru_cache(maxsize=None)
def shape_standardization(name: str) -> tuple[np.ndarray, float, float]:
    """(mean, rms scale, support radius) from a large fixed reference sample."""
    sampler, bound = SHAPES[name]
    ref = sampler(_rng(_REF, list(SHAPES).index(name)), 1 << 18)
    mean = ref.mean(axis=0)
    centred = ref - mean
    scale = float(np.sqrt(np.mean(np.sum(centred * centred, axis=1))))
    return mean, scale, float((bound + np.linalg.norm(mean)) / scale)


def sample_shape(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` standardised points (zero mean, unit mean squared norm)."""
    sampler, _ = SHAPES[name]
    mean, scale, _ = shape_standardization(name)
    return (sampler(rng, n) - mean) / scale


def _eval_grid(x_eval, rng, schedule, condition):
    x0 = np.repeat(x_eval, EVAL_DRAWS, axis=0)
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return noised_inputs(x0, t, eps, schedule, condition), eps


@functools.lru_cache(maxsize=8)
def _pretrained_base(seed: int, layer_dims: tuple, steps: int, T: int):
    # unconditional pretraining: condition columns are held at zero
    spec = NetworkSpec(layer_dims, "tanh")
    schedule = NoiseSchedule.linear(T)
    params = init_params(spec, _rng(seed, _BASE))
    rng = _rng(seed, _PRETRAIN)
    opt = Adam(lr=3e-3)
    for _ in range(steps):
        x0 = rng.standard_normal((256, layer_dims[-1]))
        cond = np.zeros((256, layer_dims[0] - layer_dims[-1] - TIME_FEATURES))
        inputs, eps = diffusion_batch(np.hstack([x0, cond]), rng, schedule, layer_dims[-1])
        _, grads = backward(spec, params, inputs, eps, AdapterMode.BASE_ONLY)
        named = {}
        g = {}
        for i, p in enumerate(params):
            named[(i, "w")], g[(i, "w")] = p.base_weight, grads[(i, Role.EFFECTIVE_WEIGHT)]
            named[(i, "b")], g[(i, "b")] = p.base_bias, grads[(i, Role.BIAS)]
        opt.step(named, g)
    return spec, params


def make_toy_diffusion_suite(
    seed: int,
    n_tasks: int,
    hidden: Sequence[int] = (64, 64),
    train_size: int = 2048,
    eval_size: int = 512,
    T: int = 50,
    pretrain_steps: int = 1500,
    shapes: Sequence[str] | None = None,
    condition_dim: int = 4,
) -> TaskSuite:
    """Tasks are distinct menu shapes chosen by a seeded permutation.

    Each task carries a fixed random unit-norm condition vector appended to
    the network input, playing the role of a per-task instruction.
    ``condition_dim=0`` gives an unconditional suite.
    """
    if condition_dim < 0:
        raise ConfigError("condition_dim must be non-negative")
    if not 2 <= n_tasks <= len(SHAPES):
        raise ConfigError(f"diffusion suite supports 2..{len(SHAPES)} tasks, got {n_tasks}")
    if shapes is None:
        menu = list(SHAPES)
        shapes = [menu[i] for i in _rng(seed, _MENU).permutation(len(menu))[:n_tasks]]
    elif len(shapes) != n_tasks or any(s not in SHAPES for s in shapes):
        raise ConfigError(f"invalid shape list {shapes!r}")
    schedule = NoiseSchedule.linear(T)
    dims = (2 + TIME_FEATURES + condition_dim, *hidden, 2)
    spec, base = _pretrained_base(seed, dims, pretrain_steps, T)
    tasks = []
    for t, name in enumerate(shapes):
        cond = _rng(seed, _COND, t).standard_normal(condition_dim)
        if condition_dim:
            cond /= np.linalg.norm(cond)
        x_tr = sample_shape(name, train_size, _rng(seed, _TRAIN, t))
        x_tr = np.hstack([x_tr, np.tile(cond, (train_size, 1))])
        x_ev = sample_shape(name, eval_size, _rng(seed, _EVAL, t))
        grid_x, grid_y = _eval_grid(x_ev, _rng(seed, _GRID, t), schedule, cond)
        gen = {"shape": name, "condition": [float(c) for c in cond]}
        tasks.append(TaskSpec(t, name, "diffusion", x_tr, None, grid_x, grid_y, gen))
    base = [LayerParams(p.base_weight.copy(), p.base_bias.copy()) for p in base]
    return TaskSuite("diffusion", seed, tasks, spec, base, schedule)


def make_suite(kind: str, seed: int, n_tasks: int, **kwargs) -> TaskSuite:
    if kind == "regression":
        return make_regression_suite(seed, n_tasks, **kwargs)
    if kind == "diffusion":
        return make_toy_diffusion_suite(seed, n_tasks, **kwargs)
    raise ConfigError(f"unknown suite {kind!r}")


# -- sampling & scoring -------------------------------------------------------


def support_radius(task: TaskSpec) -> float:
    if task.kind != "diffusion":
        raise ValueError("support radius is defined for diffusion tasks only")
    return shape_standardization(task.generator["shape"])[2]


def sample_batch(task: TaskSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Fresh draw from the task distribution.

    Diffusion tasks return clean points followed by the task condition
    columns; regression tasks return inputs and teacher targets side by
    side (n x (d_in + d_out)).
    """
    if n < 1:
        raise UndefinedInputError("batch size must be positive")
    if task.kind == "diffusion":
        cond = np.asarray(task.generator.get("condition", []), dtype=np.float64)
        return np.hstack([sample_shape(task.generator["shape"], n, rng), np.tile(cond, (n, 1))])
    spec, teacher = task.teacher
    x = rng.uniform(-1.0, 1.0, size=(n, spec.layer_dims[0]))
    return np.hstack([x, forward(spec, teacher, x, AdapterMode.BASE_ONLY)])


def eval_performance(spec: NetworkSpec, params, task: TaskSpec, mode=AdapterMode.HISTORY_PLUS_CURRENT) -> float:
    """Negative held-out loss (higher is better).

    Diffusion tasks use a fixed grid of 16 (timestep, noise) draws per
    evaluation point, so repeated evaluations are bit-identical.
    """
    return -mse_loss(forward(spec, params, task.eval_x, mode), task.eval_y)


def eval_noise_floor(spec: NetworkSpec, params, task: TaskSpec, mode=AdapterMode.HISTORY_PLUS_CURRENT) -> float:
    """Standard error of the held-out loss estimate."""
    diff = forward(spec, params, task.eval_x, mode) - task.eval_y
    per_row = np.mean(diff * diff, axis=1)
    return float(per_row.std(ddof=1) / np.sqrt(per_row.size))


# -- persistence ----------------------------------------------------------------


def export_suite(suite: TaskSuite, path) -> None:
    """Write every task's data as matcore binaries plus ``manifest.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_network(root / "base", suite.spec, suite.base_params)
    entries = []
    for task in suite.tasks:
        d = root / f"task_{task.task_id}"
        d.mkdir(exist_ok=True)
        files = {"train_x": task.train_x, "eval_x": task.eval_x, "eval_y": task.eval_y}
        if task.train_y is not None:
            files["train_y"] = task.train_y
        for key, m in files.items():
            matcore.write_matrix(d / f"{key}.bin", m)
        if task.teacher is not None:
            save_network(d / "teacher", *task.teacher)
        entries.append({"task_id": task.task_id, "name": task.name, "kind": task.kind, "dir": d.name,
                        "files": sorted(files), "generator": task.generator, "teacher": task.teacher is not None})
    manifest = {"kind": suite.kind, "seed": suite.seed, "tasks": entries,
                "betas": None if suite.schedule is None else suite.schedule.betas.tolist()}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_suite(path) -> TaskSuite:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    spec, base, _ = load_network(root / "base")
    tasks = []
    for e in manifest["tasks"]:
        d = root / e["dir"]
        data = {key: matcore.read_matrix(d / f"{key}.bin") for key in e["files"]}
        teacher = None
        if e["teacher"]:
            tspec, tparams, _ = load_network(d / "teacher")
            teacher = (tspec, tparams)
        tasks.append(TaskSpec(e["task_id"], e["name"], e["kind"], data["train_x"], data.get("train_y"),
                              data["eval_x"], data["eval_y"], e["generator"], teacher))
    schedule = NoiseSchedule(np.array(manifest["betas"])) if manifest["betas"] is not None else None
    return TaskSuite(manifest["kind"], manifest["seed"], tasks, spec, base, schedule)
