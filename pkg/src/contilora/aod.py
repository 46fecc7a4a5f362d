"""Adaptive orthogonal decoupling.

The interference vector of a batch is the gradient of the current task's
loss with respect to the history factor ``b_his`` when the network runs
with its history only (no current adapter). The orthogonality penalty
then discourages the current ``b`` from lining up with it. Everything is
recomputed per batch; the vector is treated as a constant afterwards.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, UndefinedInputError
from .gradnet import LayerParams, NetworkSpec, Role, backward
from .lora import AdapterMode, HistoryFactors


class Scope(str, Enum):
    LORA_B_ONLY = "lora_b_only"
    FULL = "full"


@dataclass(frozen=True)
class InterferenceVector:
    """Per-layer interference matrices for one batch.

    With ``scope=lora_b_only`` each matrix has the shape of that layer's
    ``b_his``; with ``scope=full`` it has the shape of the layer weight.
    """

    per_layer: Mapping[int, np.ndarray]
    batch_id: int = 0
    scope: Scope = Scope.LORA_B_ONLY


def history_view(params: Sequence[LayerParams], history: Mapping[int, HistoryFactors]) -> list[LayerParams]:
    """Shallow copies of ``params`` whose layers compose history from ``history``.

    Layers missing from ``history`` keep only their base weight.
    """
    view = []
    for i, p in enumerate(params):
        stack = dataclasses.replace(p.adapters, frozen=(), current=None).with_history(history.get(i))
        view.append(LayerParams(p.base_weight, p.base_bias, stack))
    return view


def interference_vector(
    spec: NetworkSpec,
    params: Sequence[LayerParams],
    inputs,
    targets,
    history: Mapping[int, HistoryFactors],
    scope: Scope | str = Scope.LORA_B_ONLY,
    batch_id: int = 0,
    weights=None,
    view=None,
) -> InterferenceVector:
    """Gradient of the current-task loss w.r.t. the history factors.

    ``inputs``/``targets`` must be the very batch the task-loss step uses
    (for the diffusion suite: the same timestep and noise draws).
    ``view`` and ``weights`` may carry a precomputed :func:`history_view`
    and its history-only effective weights.
    """
    scope = Scope(scope)
    if not history:
        raise UndefinedInputError("interference vector needs a compressed history")
    if len(inputs) == 0:
        raise UndefinedInputError("interference vector of an empty batch is undefined")
    view = history_view(params, history) if view is None else view
    _, grads = backward(spec, view, inputs, targets, AdapterMode.HISTORY_ONLY, weights=weights)
    role = Role.HISTORY_B if scope is Scope.LORA_B_ONLY else Role.EFFECTIVE_WEIGHT
    return InterferenceVector({i: grads[(i, role)] for i in sorted(history)}, batch_id, scope)


def _pairs(iv: InterferenceVector, current: Mapping[int, np.ndarray]):
    if set(iv.per_layer) != set(current):
        raise DimensionError(f"layer sets differ: {sorted(iv.per_layer)} vs {sorted(current)}")
    for i in sorted(iv.per_layer):
        v, b = iv.per_layer[i], current[i]
        if v.shape != b.shape:
            raise DimensionError(f"layer {i}: interference {v.shape} vs current {b.shape}")
        yield i, v, b


def normalized(iv: InterferenceVector) -> InterferenceVector:
    """Each layer scaled to unit Frobenius norm (zero layers stay zero)."""
    out = {}
    for i, v in iv.per_layer.items():
        n = np.linalg.norm(v)
        out[i] = v / n if n > 0 else v
    return InterferenceVector(out, iv.batch_id, iv.scope)


def orth_loss(iv: InterferenceVector, current_b: Mapping[int, np.ndarray], squared: bool = False) -> float:
    """Sum over layers of ``|<iv, b>|`` (or ``<iv, b>**2`` when ``squared``)."""
    total = 0.0
    for _, v, b in _pairs(iv, current_b):
        inner = float(np.einsum("ij,ij->", v, b))
        total += inner * inner if squared else abs(inner)
    return total


def orth_loss_grad(iv: InterferenceVector, current_b: Mapping[int, np.ndarray], squared: bool = False) -> dict[int, np.ndarray]:
    """Gradient of :func:`orth_loss` w.r.t. ``b`` with ``iv`` held fixed.

    At a zero inner product the subgradient 0 is returned.
    """
    out = {}
    for i, v, b in _pairs(iv, current_b):
        inner = float(np.einsum("ij,ij->", v, b))
        out[i] = (2.0 * inner) * v if squared else np.sign(inner) * v
    return out


def orth_loss_grad_full(iv: InterferenceVector, current_b, current_a, squared: bool = False):
    """Loss and gradients for the full-weight scope, where the penalty is on ``<iv, b @ a>``."""
    loss, gb, ga = 0.0, {}, {}
    deltas = {i: current_b[i] @ current_a[i] for i in current_b}
    for i, v, d in _pairs(iv, deltas):
        inner = float(np.einsum("ij,ij->", v, d))
        loss += inner * inner if squared else abs(inner)
        coef = 2.0 * inner if squared else np.sign(inner)
        gb[i] = coef * (v @ current_a[i].T)
        ga[i] = coef * (current_b[i].T @ v)
    return loss, gb, ga


def param_orth_loss(history_a: Mapping[int, np.ndarray], current_a: Mapping[int, np.ndarray]) -> float:
    """Data-independent overlap penalty ``sum ||a_his @ a_t.T||_F^2``."""
    total = 0.0
    for i in sorted(history_a):
        if i not in current_a or history_a[i].shape[1] != current_a[i].shape[1]:
            raise DimensionError(f"layer {i}: history and current A factors are incompatible")
        overlap = history_a[i] @ current_a[i].T
        total += float(np.sum(overlap * overlap))
    return total


def param_orth_loss_grad(history_a: Mapping[int, np.ndarray], current_a: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    out = {}
    for i in sorted(history_a):
        ah, at = history_a[i], current_a[i]
        if ah.shape[1] != at.shape[1]:
            raise DimensionError(f"layer {i}: history and current A factors are incompatible")
        out[i] = 2.0 * (at @ ah.T) @ ah
    return out
