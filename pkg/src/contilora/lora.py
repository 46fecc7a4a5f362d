"""LoRA adapter lifecycle: creation, freezing, stacking and weight composition."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError, UndefinedInputError


class AdapterMode(str, Enum):
    """Which adapters enter the effective weight of a layer."""

    BASE_ONLY = "base_only"
    HISTORY_ONLY = "history_only"
    HISTORY_PLUS_CURRENT = "history_plus_current"
    CURRENT_ONLY = "current_only"


@dataclass
class LoraAdapter:
    """One task's low-rank update ``b @ a`` (``b``: d_out x r, ``a``: r x d_in)."""

    b: np.ndarray
    a: np.ndarray
    task_id: int
    trainable: bool = True

    def __post_init__(self):
        if self.b.ndim != 2 or self.a.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise DimensionError(f"adapter factors {self.b.shape} and {self.a.shape} are not aligned")
        if not self.trainable:
            self.b.flags.writeable = False
            self.a.flags.writeable = False

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    def delta(self) -> np.ndarray:
        return self.b @ self.a

    def frozen(self) -> "LoraAdapter":
        return LoraAdapter(self.b.copy(), self.a.copy(), self.task_id, trainable=False)


@dataclass(frozen=True)
class HistoryFactors:
    """A rank-r stand-in ``b_his @ a_his`` for all past adapters of one layer.

    ``retained_energy`` is only meaningful for SVD compression; other
    history sources leave it as ``None``.
    """

    b_his: np.ndarray
    a_his: np.ndarray
    retained_energy: float | None = None
    source_task_count: int = 0

    def delta(self) -> np.ndarray:
        return self.b_his @ self.a_his


@dataclass
class AdapterStack:
    """Adapters attached to one layer.

    When ``use_compressed`` is set the history term of the effective
    weight is ``compressed.delta()``; otherwise it is the sum over
    ``frozen``.
    """

    frozen: tuple[LoraAdapter, ...] = ()
    current: LoraAdapter | None = None
    compressed: HistoryFactors | None = None
    use_compressed: bool = False

    def __post_init__(self):
        ids = [ad.task_id for ad in self.frozen]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"frozen task ids must be strictly increasing, got {ids}")
        if self.use_compressed and self.compressed is None:
            raise UndefinedInputError("use_compressed is set but no compressed history is attached")

    def is_empty(self) -> bool:
        return not self.frozen and self.current is None and not self.use_compressed

    def history_delta(self, shape) -> np.ndarray | None:
        if self.use_compressed:
            return self.compressed.delta()
        if not self.frozen:
            return None
        total = np.zeros(shape)
        for ad in self.frozen:
            total += ad.delta()
        return total

    def with_history(self, history: HistoryFactors | None) -> "AdapterStack":
        """Copy that composes its history term from ``history``."""
        return dataclasses.replace(self, compressed=history, use_compressed=history is not None)


def init_adapter(d_out: int, d_in: int, r: int, task_id: int, rng: np.random.Generator) -> LoraAdapter:
    """Fresh adapter with ``b = 0`` and ``a ~ N(0, 1/r)``."""
    if min(d_out, d_in, r) < 1:
        raise DimensionError(f"adapter dims must be positive, got d_out={d_out} d_in={d_in} r={r}")
    a = rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, d_in))
    return LoraAdapter(np.zeros((d_out, r)), a, task_id, trainable=True)


def effective_weight(base: np.ndarray, stack: AdapterStack | None, mode: AdapterMode | str) -> np.ndarray:
    """``base`` plus the adapter terms selected by ``mode``."""
    mode = AdapterMode(mode)
    w = base.copy()
    if stack is None or mode is AdapterMode.BASE_ONLY or stack.is_empty():
        return w
    if mode in (AdapterMode.HISTORY_ONLY, AdapterMode.HISTORY_PLUS_CURRENT):
        hist = stack.history_delta(base.shape)
        if hist is not None:
            if hist.shape != base.shape:
                raise DimensionError(f"history term {hist.shape} does not match base {base.shape}")
            w += hist
    if mode in (AdapterMode.HISTORY_PLUS_CURRENT, AdapterMode.CURRENT_ONLY):
        if stack.current is None:
            # between tasks the current term is simply absent
            if mode is AdapterMode.HISTORY_PLUS_CURRENT:
                return w
            raise UndefinedInputError(f"mode {mode.value} requires a current adapter")
        if stack.current.shape != base.shape:
            raise DimensionError(f"current adapter {stack.current.shape} does not match base {base.shape}")
        w += stack.current.delta()
    return w


def freeze_current(stack: AdapterStack) -> AdapterStack:
    """Move the current adapter to the end of the frozen list."""
    if stack.current is None:
        raise UndefinedInputError("no current adapter to freeze")
    return dataclasses.replace(stack, frozen=stack.frozen + (stack.current.frozen(),), current=None)
