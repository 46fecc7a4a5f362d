"""Continual-learning metrics and adapter diagnostics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import matcore
from .errors import DimensionError, NonFiniteError, UndefinedInputError
from .history import merge_sum, reconstruction_similarity
from .lora import LoraAdapter


@dataclass
class PerformanceMatrix:
    """``r[t, i]``: score on task ``i`` after training through task ``t``."""

    r: np.ndarray
    task_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.r.ndim != 2 or self.r.shape[0] != self.r.shape[1] or self.r.shape[0] < 1:
            raise DimensionError(f"performance matrix must be square and non-empty, got {self.r.shape}")
        if not np.all(np.isfinite(self.r)):
            raise NonFiniteError("performance matrix has non-finite entries")
        if not self.task_names:
            self.task_names = [f"task{i}" for i in range(self.r.shape[0])]

    @property
    def T(self) -> int:
        return self.r.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + self.task_names)
        for name, row in zip(self.task_names, self.r):
            w.writerow([name] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PerformanceMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0][1:]
        return cls(np.array([[float(v) for v in row[1:]] for row in rows[1:]]), names)


@dataclass
class MetricsReport:
    last: float
    avg: float
    imm: list[float]
    bwt: float
    per_task_last: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def seen_average(r: np.ndarray) -> float:
    """Mean over ``t`` of the mean score on tasks seen so far (``i <= t``)."""
    return float(np.mean([np.mean(r[t, : t + 1]) for t in range(r.shape[0])]))


def compute_metrics(pm: PerformanceMatrix | np.ndarray) -> MetricsReport:
    if not isinstance(pm, PerformanceMatrix):
        pm = PerformanceMatrix(pm)
    r = pm.r
    T = pm.T
    final = r[T - 1]
    imm = np.diag(r)
    bwt = float(np.mean(final[: T - 1] - imm[: T - 1])) if T > 1 else 0.0
    return MetricsReport(
        last=float(np.mean(final)),
        avg=seen_average(r),
        imm=[float(v) for v in imm],
        bwt=bwt,
        per_task_last=[float(v) for v in final],
    )


# -- adapter diagnostics ------------------------------------------------------------
# ``adapters`` arguments are indexed [task][layer].


def _check_arch(adapters: Sequence[Sequence[LoraAdapter]]) -> int:
    if len(adapters) == 0:
        raise UndefinedInputError("no task adapters given")
    n_layers = len(adapters[0])
    shapes = [(ad.b.shape, ad.a.shape) for ad in adapters[0]]
    for task in adapters[1:]:
        if [(ad.b.shape, ad.a.shape) for ad in task] != shapes:
            raise DimensionError("task adapters do not share one architecture")
    return n_layers


def lora_similarity_per_layer(adapters, which: str = "A") -> np.ndarray:
    """Array ``[layer, i, j]`` of cosine similarities of the chosen factor."""
    if which not in ("A", "B"):
        raise ValueError("which must be 'A' or 'B'")
    n_layers = _check_arch(adapters)
    T = len(adapters)
    out = np.ones((n_layers, T, T))
    for l in range(n_layers):
        mats = [task[l].a if which == "A" else task[l].b for task in adapters]
        for i in range(T):
            for j in range(i + 1, T):
                out[l, i, j] = out[l, j, i] = matcore.cosine_similarity_flat(mats[i], mats[j])
    return out


def lora_similarity_analysis(adapters, which: str = "A") -> np.ndarray:
    """Task-by-task cosine similarity of the A (or B) factors, averaged over layers."""
    return lora_similarity_per_layer(adapters, which).mean(axis=0)


def mean_off_diagonal(m: np.ndarray) -> float:
    T = m.shape[0]
    if T < 2:
        raise UndefinedInputError("off-diagonal mean needs at least two tasks")
    return float((m.sum() - np.trace(m)) / (T * (T - 1)))


def energy_curve_per_layer(adapters, r: int) -> np.ndarray:
    """Array ``[k-1, layer]``: energy share of the top ``r`` singular values of the first ``k`` merged adapters."""
    n_layers = _check_arch(adapters)
    out = np.zeros((len(adapters), n_layers))
    for k in range(1, len(adapters) + 1):
        for l in range(n_layers):
            s = matcore.svd(merge_sum([task[l] for task in adapters[:k]])).singular_values
            out[k - 1, l] = matcore.energy_proportion(s, min(r, s.size)) if s[0] > 0 else 1.0
    return out


def energy_curve(adapters, r: int) -> list[float]:
    return [float(v) for v in energy_curve_per_layer(adapters, r).mean(axis=1)]


def reconstruction_curve_per_layer(adapters, r: int) -> np.ndarray:
    n_layers = _check_arch(adapters)
    out = np.zeros((len(adapters), n_layers))
    for k in range(1, len(adapters) + 1):
        for l in range(n_layers):
            stack = [task[l] for task in adapters[:k]]
            shape = stack[0].shape
            out[k - 1, l] = reconstruction_similarity(stack, min(r, *shape))
    return out


def reconstruction_curve(adapters, r: int) -> list[float]:
    """Layer-averaged cosine similarity between merged weights and their rank-r reconstruction."""
    return [float(v) for v in reconstruction_curve_per_layer(adapters, r).mean(axis=1)]
