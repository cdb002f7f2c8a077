"""Gradient-guided task masks and the base/override parameter store.

A task's mask marks the top fraction of parameters ranked by mean absolute
loss gradient on the pre-trained base. Fine-tuning touches only a per-task
override copy of those entries; the base vector stays frozen, and at
inference the overrides are merged over the base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from . import tensor as T
from .tasks import Task


class MaskError(ValueError):
    pass


class MissingStageError(MaskError):
    """A pipeline stage (mask building, override init) has not been run for a task."""


@dataclass
class GradientProfile:
    task: Task
    abs_grad_sum: np.ndarray
    batches_seen: int = 0

    @classmethod
    def empty(cls, task, n: int) -> "GradientProfile":
        return cls(Task.parse(task), np.zeros(n), 0)

    def mean(self) -> np.ndarray:
        if self.batches_seen < 1:
            raise MaskError("gradient profile has seen no batches")
        return self.abs_grad_sum / self.batches_seen


@dataclass
class TaskMask:
    task: Task
    bits: np.ndarray  # bool, one per flat parameter
    gamma: float
    fraction: float = 0.10

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))


def top_k_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), evaluated on the decimal value of ``fraction`` (0.1 * 30 is 3, not 4)."""
    return int(math.ceil(Decimal(repr(float(fraction))) * n))


def accumulate_gradients(profile: GradientProfile, net, base_params: np.ndarray, batch,
                         loss_cfg=None) -> GradientProfile:
    """Add |d loss / d theta| for one (degraded, clean) batch to ``profile``."""
    from .training import LossConfig, total_loss

    base_params = np.asarray(base_params, dtype=np.float64)
    if base_params.shape != profile.abs_grad_sum.shape:
        raise T.ShapeError(
            f"profile has {profile.abs_grad_sum.size} entries, params have {base_params.size}")
    x, y = batch
    p = T.Tensor(base_params.copy(), requires_grad=True)
    loss = total_loss(net.forward(x, p), T.Tensor(y), loss_cfg or LossConfig())
    T.backward(loss)
    grad = p.grad if p.grad is not None else np.zeros_like(base_params)
    return GradientProfile(profile.task, profile.abs_grad_sum + np.abs(grad),
                           profile.batches_seen + 1)


def _select(values: np.ndarray, k: int) -> np.ndarray:
    # total order: value descending, index ascending
    order = np.lexsort((np.arange(values.size), -values))
    return order[:k]


def build_mask(profile: GradientProfile, fraction: float = 0.10, registry=None,
               per_layer: bool = False) -> TaskMask:
    """Mask the ``ceil(fraction * N)`` parameters with largest mean |gradient|.

    ``gamma`` is the k-th largest mean value. Ties at ``gamma`` go to the
    lower flat index. With ``per_layer`` (needs ``registry``) the top
    fraction is taken inside every parameter tensor separately and
    ``gamma`` is the smallest per-tensor threshold.
    """
    if profile.batches_seen < 1 or profile.abs_grad_sum.size == 0:
        raise MaskError("cannot build a mask from an empty gradient profile")
    if not 0.0 < fraction < 1.0:
        raise MaskError(f"fraction must lie in (0, 1), got {fraction}")
    values = profile.mean()
    bits = np.zeros(values.size, dtype=bool)
    if not per_layer:
        k = top_k_count(fraction, values.size)
        chosen = _select(values, k)
        bits[chosen] = True
        gamma = float(values[chosen[-1]])
    else:
        if registry is None:
            raise MaskError("per-layer masks need the parameter registry")
        gamma = math.inf
        for e in registry:
            local = values[e.offset:e.offset + e.length]
            k = top_k_count(fraction, e.length)
            chosen = _select(local, k)
            bits[e.offset + chosen] = True
            gamma = min(gamma, float(local[chosen[-1]]))
    return TaskMask(profile.task, bits, gamma, fraction)


@dataclass
class ParameterStore:
    base: np.ndarray
    overrides: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)

    @property
    def total_len(self) -> int:
        return self.base.size

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            self.base.copy(),
            {t: v.copy() for t, v in self.overrides.items()},
            {t: TaskMask(m.task, m.bits.copy(), m.gamma, m.fraction) for t, m in self.masks.items()},
        )

    def set_mask(self, mask: TaskMask) -> None:
        if mask.bits.size != self.base.size:
            raise T.ShapeError(f"mask has {mask.bits.size} bits, store has {self.base.size} params")
        self.masks[mask.task] = mask
        self.overrides.pop(mask.task, None)

    def tasks(self) -> list:
        return sorted(self.masks)

    def check(self) -> None:
        for t, m in self.masks.items():
            if t in self.overrides and self.overrides[t].size != m.popcount:
                raise MaskError(f"{t.label}: {self.overrides[t].size} overrides for {m.popcount} mask bits")


def init_overrides(store: ParameterStore, task) -> ParameterStore:
    """Start a task's overrides from the base values at its masked indices."""
    task = Task.parse(task)
    if task not in store.masks:
        raise MissingStageError(f"no mask for task {task.label}; run build-mask first")
    store.overrides[task] = store.base[store.masks[task].indices].copy()
    return store


def effective_params(store: ParameterStore, task) -> np.ndarray:
    """Base vector with the task's overrides written at its masked indices."""
    task = Task.parse(task)
    if task not in store.masks:
        raise MissingStageError(f"no mask for task {task.label}; run build-mask first")
    if task not in store.overrides:
        raise MissingStageError(f"no task parameters for {task.label}; overrides not initialised")
    out = store.base.copy()
    out[store.masks[task].indices] = store.overrides[task]
    return out


class Adam:
    """Adam over one flat float64 array, updated in place."""

    def __init__(self, n: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (grads * grads)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def masked_step(store: ParameterStore, task, grads: np.ndarray, state: Adam | None = None,
                lr: float = 1e-4):
    """One Adam step on ``overrides[task]`` using the full-length gradient at masked indices.

    Moments are kept only for masked entries. Returns ``(store, state)``.
    """
    task = Task.parse(task)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != store.base.shape:
        raise T.ShapeError(f"gradient has {grads.size} entries, store has {store.base.size}")
    if task not in store.overrides:
        raise MissingStageError(f"no task parameters for {task.label}; overrides not initialised")
    idx = store.masks[task].indices
    if state is None:
        state = Adam(idx.size, lr=lr)
    state.step(store.overrides[task], grads[idx])
    return store, state
