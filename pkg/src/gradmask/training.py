"""Losses and the three training stages: joint pre-training, mask building, masked fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import masking
from . import tensor as T
from .masking import Adam, GradientProfile, ParameterStore
from .metrics import EvalReport
from .tasks import ALL_TASKS, Task
from .unet import ConfigError, UNet, UNetConfig
from .weather import make_dataset, stack_pairs

log = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_depth: float = 0.1
    smooth_l1_beta: float = 1.0
    pseudo_depth_levels: int = 3

    def validate(self) -> None:
        if self.lambda_depth < 0:
            raise ConfigError("lambda_depth must be >= 0")
        if self.smooth_l1_beta <= 0:
            raise ConfigError("smooth_l1_beta must be > 0")
        if self.pseudo_depth_levels < 0:
            raise ConfigError("pseudo_depth_levels must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    image_size: tuple = (32, 32)
    samples_per_task: int = 200
    intensity: float = 0.5

    def validate(self, model_cfg: UNetConfig | None = None) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("batch_size", "samples_per_task"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        h, w = self.image_size
        if model_cfg is not None:
            m = 2 ** model_cfg.depth
            if h % m or w % m:
                raise ConfigError(f"image_size {h}x{w} not divisible by {m}")


# ---------------------------------------------------------------- losses

def smooth_l1(pred, target, beta: float = 1.0) -> T.Tensor:
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"smooth_l1: shape mismatch, {pred.shape} vs {target.shape}")
    return T.mean(T.huber(T.sub(pred, target), beta))


def pseudo_depth(img, levels: int = 3) -> T.Tensor:
    """Parameter-free structure map: luminance, then ``levels`` rounds of 2x2 average pooling."""
    img = T.as_tensor(img)
    if img.data.ndim != 4 or img.shape[1] != 3:
        raise T.ShapeError(f"pseudo_depth expects [N,3,H,W], got {img.shape}")
    m = 2 ** levels
    if img.shape[2] % m or img.shape[3] % m:
        raise T.ShapeError(f"pseudo_depth: {img.shape[2]}x{img.shape[3]} not divisible by {m}")
    d = T.channel_mix(img, LUMA)
    for _ in range(levels):
        d = T.avgpool2(d)
    return d


def total_loss(pred, target, cfg: LossConfig | None = None) -> T.Tensor:
    """Smooth L1 plus ``lambda_depth`` times the mean absolute pseudo-depth difference."""
    cfg = cfg or LossConfig()
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    loss = smooth_l1(pred, target, cfg.smooth_l1_beta)
    if cfg.lambda_depth == 0:
        return loss
    dp = pseudo_depth(pred, cfg.pseudo_depth_levels)
    dt = pseudo_depth(target, cfg.pseudo_depth_levels)
    return T.add(loss, T.scale(T.mean(T.abs_(T.sub(dp, dt))), cfg.lambda_depth))


def loss_and_grad(net: UNet, params: np.ndarray, x, y, loss_cfg: LossConfig):
    p = T.Tensor(params, requires_grad=True)
    loss = total_loss(net.forward(x, p), T.Tensor(y), loss_cfg)
    T.backward(loss)
    value = float(loss.data)
    if not np.isfinite(value) or not np.all(np.isfinite(p.grad)):
        raise DivergenceError(f"non-finite loss or gradient (loss={value})")
    return value, p.grad


# ---------------------------------------------------------------- data

# offsets keep train, calibration and evaluation seeds disjoint
TRAIN_SEED_BASE = 0
CALIB_SEED_BASE = 5_000_000
EVAL_SEED_DEFAULT = 9_000_000
_TASK_STRIDE = 1_000_000 // 4


def train_seed(cfg: TrainConfig, task: Task) -> int:
    return TRAIN_SEED_BASE + cfg.seed * 1_000_000 + int(task) * _TASK_STRIDE


def calib_seed(cfg: TrainConfig, task: Task) -> int:
    return CALIB_SEED_BASE + cfg.seed * 1_000_000 + int(task) * _TASK_STRIDE


def task_arrays(task, n: int, seed: int, size, intensity: float = 0.5):
    return stack_pairs(make_dataset(task, n, seed, size, intensity))


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------- stages

def pretrain_base(model_cfg: UNetConfig, train_cfg: TrainConfig, loss_cfg: LossConfig,
                  on_epoch=None, tasks=ALL_TASKS) -> ParameterStore:
    """Train all parameters jointly on round-robin batches of every task.

    ``on_epoch(epoch, task_label, mean_loss)`` is called once per task per epoch.
    """
    train_cfg.validate(model_cfg)
    loss_cfg.validate()
    net = UNet(model_cfg)
    params = net.init_params()
    data = {t: task_arrays(t, train_cfg.samples_per_task, train_seed(train_cfg, t),
                           train_cfg.image_size, train_cfg.intensity) for t in tasks}
    opt = Adam(params.size, lr=train_cfg.lr)
    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch, 7])
        per_task = {t: _batches(train_cfg.samples_per_task, train_cfg.batch_size, rng) for t in tasks}
        losses = {t: [] for t in tasks}
        for i in range(max(len(b) for b in per_task.values())):
            for t in tasks:
                if i >= len(per_task[t]):
                    continue
                idx = per_task[t][i]
                x, y = data[t]
                value, grad = loss_and_grad(net, params, x[idx], y[idx], loss_cfg)
                opt.step(params, grad)
                losses[t].append(value)
        for t in tasks:
            mean_loss = float(np.mean(losses[t]))
            log.info("pretrain epoch %d %s loss %.6g", epoch, t.label, mean_loss)
            if on_epoch is not None:
                on_epoch(epoch, t.label, mean_loss)
    return ParameterStore(params)


def build_task_mask(store: ParameterStore, model_cfg: UNetConfig, task, train_cfg: TrainConfig,
                    loss_cfg: LossConfig, fraction: float = 0.10, batches: int = 32,
                    per_layer: bool = False) -> ParameterStore:
    """Profile gradients on ``batches`` calibration batches, set the mask and init overrides."""
    task = Task.parse(task)
    if batches < 1:
        raise ConfigError("batches must be >= 1")
    net = UNet(model_cfg)
    if store.base.size != net.num_params:
        raise T.ShapeError(f"store has {store.base.size} params, model needs {net.num_params}")
    x, y = task_arrays(task, batches * train_cfg.batch_size, calib_seed(train_cfg, task),
                       train_cfg.image_size, train_cfg.intensity)
    profile = GradientProfile.empty(task, store.base.size)
    for b in range(batches):
        sl = slice(b * train_cfg.batch_size, (b + 1) * train_cfg.batch_size)
        profile = masking.accumulate_gradients(profile, net, store.base, (x[sl], y[sl]), loss_cfg)
    mask = masking.build_mask(profile, fraction, net.registry, per_layer=per_layer)
    store.set_mask(mask)
    return masking.init_overrides(store, task)


def finetune_task(store: ParameterStore, model_cfg: UNetConfig, task, train_cfg: TrainConfig,
                  loss_cfg: LossConfig, on_epoch=None) -> ParameterStore:
    """Masked Adam fine-tuning of ``overrides[task]``; the base vector is never written."""
    task = Task.parse(task)
    train_cfg.validate(model_cfg)
    loss_cfg.validate()
    if task not in store.masks:
        raise masking.MissingStageError(f"no mask for task {task.label}; run build-mask first")
    if task not in store.overrides:
        masking.init_overrides(store, task)
    if train_cfg.epochs == 0:
        return store
    net = UNet(model_cfg)
    x, y = task_arrays(task, train_cfg.samples_per_task, train_seed(train_cfg, task),
                       train_cfg.image_size, train_cfg.intensity)
    state = None
    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch, 11, int(task)])
        losses = []
        for idx in _batches(train_cfg.samples_per_task, train_cfg.batch_size, rng):
            params = masking.effective_params(store, task)
            value, grad = loss_and_grad(net, params, x[idx], y[idx], loss_cfg)
            store, state = masking.masked_step(store, task, grad, state, lr=train_cfg.lr)
            losses.append(value)
        mean_loss = float(np.mean(losses))
        log.info("finetune epoch %d %s loss %.6g", epoch, task.label, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, task.label, mean_loss)
    return store


# ---------------------------------------------------------------- evaluation

EVAL_MODES = ("degraded", "base", "masked")


def evaluate(net: UNet | None, params: np.ndarray | None, task, n: int, seed: int, size,
             intensity: float = 0.5, batch_size: int = 16) -> EvalReport:
    """PSNR/SSIM of restored (or, with ``params=None``, raw degraded) images on a held-out set."""
    task = Task.parse(task)
    x, y = task_arrays(task, n, seed, size, intensity)
    report = EvalReport(task.label)
    for start in range(0, n, batch_size):
        xb = x[start:start + batch_size]
        out = xb if params is None else net.predict(xb, params)
        for j in range(xb.shape[0]):
            report.add(str(start + j), out[j], y[start + j])
    return report


def evaluate_modes(store: ParameterStore, model_cfg: UNetConfig, task, n: int, seed: int,
                   size, intensity: float = 0.5) -> dict:
    """Reports for the degraded input, the base model and the task's masked parameters."""
    task = Task.parse(task)
    masked = masking.effective_params(store, task)
    net = UNet(model_cfg)
    return {
        "degraded": evaluate(None, None, task, n, seed, size, intensity),
        "base": evaluate(net, store.base, task, n, seed, size, intensity),
        "masked": evaluate(net, masked, task, n, seed, size, intensity),
    }
