"""Finite-difference check of the full network + loss gradient."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tasks import Task
from .training import LossConfig, pseudo_depth, total_loss
from .unet import UNet, UNetConfig
from .weather import make_pair

# absolute floor on the denominator: entries whose gradient is below it are
# compared on an absolute scale (FD rounding noise is ~1e-11 at h=1e-5)
GRAD_FLOOR = 1e-7


@dataclass
class GradcheckResult:
    checked: int
    skipped_kinks: int
    max_rel_err: float
    worst_index: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.checked > 0 and self.max_rel_err <= tol


def _loss_and_pattern(net, x, y, params, loss_cfg):
    trace = []
    with T.no_grad():
        out = net.forward(x, params, trace=trace)
        d = out.data - y
        trace.append(np.abs(d) < loss_cfg.smooth_l1_beta)
        if loss_cfg.lambda_depth:
            dd = pseudo_depth(out, loss_cfg.pseudo_depth_levels).data - \
                pseudo_depth(y, loss_cfg.pseudo_depth_levels).data
            trace.append(np.sign(dd))
        loss = float(total_loss(out, y, loss_cfg).data)
    return loss, trace


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def gradcheck(model_cfg: UNetConfig | None = None, loss_cfg: LossConfig | None = None,
              sample: float = 0.05, seed: int = 0, h: float = 1e-5, size=(32, 32),
              params: np.ndarray | None = None, task=Task.RAIN) -> GradcheckResult:
    """Compare backprop gradients with central differences on a random parameter sample.

    Samples whose +h/-h evaluations cross a relu, max-pool, smooth-L1 or
    absolute-value kink are skipped and counted.
    """
    model_cfg = model_cfg or UNetConfig()
    loss_cfg = loss_cfg or LossConfig()
    if not 0.0 < sample <= 1.0:
        raise ValueError(f"sample must lie in (0, 1], got {sample}")
    net = UNet(model_cfg)
    params = net.init_params() if params is None else np.asarray(params, dtype=np.float64).copy()
    x, y = make_pair(task, seed, size)
    x, y = x[None], y[None]

    p = T.Tensor(params.copy(), requires_grad=True)
    T.backward(total_loss(net.forward(x, p), T.Tensor(y), loss_cfg))
    analytic = p.grad

    rng = np.random.default_rng([seed, 99])
    k = max(1, math.ceil(sample * params.size))
    idx = np.sort(rng.choice(params.size, k, replace=False))

    worst, worst_i, checked, skipped = 0.0, -1, 0, 0
    for i in idx:
        old = params[i]
        params[i] = old + h
        lp, tp = _loss_and_pattern(net, x, y, params, loss_cfg)
        params[i] = old - h
        lm, tm = _loss_and_pattern(net, x, y, params, loss_cfg)
        params[i] = old
        if not _same_pattern(tp, tm):
            skipped += 1
            continue
        numeric = (lp - lm) / (2 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), GRAD_FLOOR)
        checked += 1
        if err > worst:
            worst, worst_i = err, int(i)
    return GradcheckResult(checked, skipped, worst, worst_i)
