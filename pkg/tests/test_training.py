import numpy as np
import pytest

from gradmask import masking
from gradmask import tensor as T
from gradmask.masking import MissingStageError, effective_params
from gradmask.tasks import ALL_TASKS, Task
from gradmask.training import (DivergenceError, LossConfig, TrainConfig, build_task_mask, evaluate,
                               evaluate_modes, finetune_task, pretrain_base, pseudo_depth,
                               smooth_l1, total_loss)
from gradmask.unet import ConfigError, UNetConfig
from oracles import numeric_grad, rel_err, scalar

# ---------------------------------------------------------------- losses


def test_smooth_l1_zero_on_equal(rng):
    x = rng.random((1, 3, 4, 4))
    assert smooth_l1(x, x).data == 0.0


@pytest.mark.parametrize("d,beta,expected", [(2.0, 1.0, 1.5), (0.5, 1.0, 0.125), (-3.0, 2.0, 2.0),
                                             (0.2, 0.5, 0.04)])
def test_smooth_l1_closed_form(d, beta, expected):
    assert smooth_l1(np.array([d]), np.array([0.0]), beta).data == pytest.approx(expected, rel=1e-15)


def test_smooth_l1_finite_differences(rng):
    y = rng.random((1, 3, 4, 4))
    x = y + rng.normal(0, 1.0, y.shape)
    fn = lambda t: smooth_l1(t, y, 1.0)
    p = T.Tensor(x, requires_grad=True)
    fn(p).backward()
    assert rel_err(p.grad, numeric_grad(scalar(fn), x)).max() <= 1e-6


def test_smooth_l1_shape_mismatch():
    with pytest.raises(T.ShapeError):
        smooth_l1(np.zeros((1, 3)), np.zeros((1, 4)))


def test_pseudo_depth_constant_gray():
    out = pseudo_depth(np.full((1, 3, 16, 16), 0.4), 3).data
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out, 0.4, rtol=1e-15)


def test_pseudo_depth_shape_and_errors():
    assert pseudo_depth(np.zeros((1, 3, 32, 32)), 3).shape == (1, 1, 4, 4)
    with pytest.raises(T.ShapeError):
        pseudo_depth(np.zeros((1, 3, 12, 12)), 3)


def test_pseudo_depth_finite_differences(rng):
    x = rng.random((1, 3, 8, 8))
    w = rng.normal(size=(1, 1, 2, 2))
    fn = lambda t: T.sum_(T.mul(pseudo_depth(t, 2), T.Tensor(w)))
    p = T.Tensor(x, requires_grad=True)
    fn(p).backward()
    assert rel_err(p.grad, numeric_grad(scalar(fn), x)).max() <= 1e-6


def test_total_loss_zero_on_equal(rng):
    x = rng.random((2, 3, 8, 8))
    assert total_loss(x, x, LossConfig(lambda_depth=1.0)).data == 0.0


def test_total_loss_without_depth_is_smooth_l1(rng):
    x, y = rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))
    cfg = LossConfig(lambda_depth=0.0)
    assert total_loss(x, y, cfg).data == smooth_l1(x, y, cfg.smooth_l1_beta).data


def test_total_loss_is_sum_of_terms(rng):
    x, y = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
    cfg = LossConfig(lambda_depth=1.0, pseudo_depth_levels=2)
    d = x - y
    pixel = np.mean(np.where(np.abs(d) < 1, 0.5 * d * d, np.abs(d) - 0.5))

    def depth(img):
        lum = 0.299 * img[0, 0] + 0.587 * img[0, 1] + 0.114 * img[0, 2]
        for _ in range(2):
            lum = 0.25 * (lum[::2, ::2] + lum[1::2, ::2] + lum[::2, 1::2] + lum[1::2, 1::2])
        return lum

    expected = pixel + np.mean(np.abs(depth(x) - depth(y)))
    assert abs(float(total_loss(x, y, cfg).data) - expected) <= 1e-12 * expected


def test_total_loss_non_negative_and_gradient(rng):
    y = rng.random((1, 3, 8, 8))
    x = y + rng.normal(0, 0.5, y.shape)
    cfg = LossConfig(lambda_depth=0.5, pseudo_depth_levels=2)
    fn = lambda t: total_loss(t, y, cfg)
    p = T.Tensor(x, requires_grad=True)
    loss = fn(p)
    assert loss.data >= 0
    loss.backward()
    assert rel_err(p.grad, numeric_grad(scalar(fn), x)).max() <= 1e-4


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(lambda_depth=-1).validate()
    with pytest.raises(ConfigError):
        LossConfig(smooth_l1_beta=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(image_size=(30, 32)).validate(UNetConfig())
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()


# ---------------------------------------------------------------- stages on a tiny setup

TINY_MODEL = UNetConfig(depth=1, base_channels=4)
TINY_TRAIN = TrainConfig(epochs=3, batch_size=4, lr=1e-3, image_size=(16, 16), samples_per_task=12)
TINY_LOSS = LossConfig(pseudo_depth_levels=2)


@pytest.fixture(scope="module")
def history():
    rows = []
    store = pretrain_base(TINY_MODEL, TINY_TRAIN, TINY_LOSS, on_epoch=lambda *r: rows.append(r))
    return store, rows


def test_pretrain_deterministic(history):
    store, _ = history
    again = pretrain_base(TINY_MODEL, TINY_TRAIN, TINY_LOSS)
    assert store.base.tobytes() == again.base.tobytes()
    assert not store.masks and not store.overrides


def test_pretrain_loss_decreases(history):
    _, rows = history
    assert len(rows) == 3 * TINY_TRAIN.epochs
    first = np.mean([r[2] for r in rows if r[0] == 0])
    last = np.mean([r[2] for r in rows if r[0] == TINY_TRAIN.epochs - 1])
    assert last < first
    assert [r[1] for r in rows[:3]] == ["rain", "raindrop", "snow"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_divergence_guard():
    with pytest.raises(DivergenceError):
        pretrain_base(TINY_MODEL, TrainConfig(epochs=2, batch_size=4, lr=1e300, image_size=(16, 16),
                                              samples_per_task=4), TINY_LOSS)


def test_build_task_mask_sets_mask_and_overrides(history):
    store = history[0].copy()
    build_task_mask(store, TINY_MODEL, Task.RAIN, TINY_TRAIN, TINY_LOSS, batches=2)
    m = store.masks[Task.RAIN]
    assert m.popcount == -(-store.total_len // 10)
    np.testing.assert_array_equal(effective_params(store, Task.RAIN), store.base)


def test_finetune_contracts(history):
    store = history[0].copy()
    build_task_mask(store, TINY_MODEL, Task.SNOW, TINY_TRAIN, TINY_LOSS, batches=2)
    build_task_mask(store, TINY_MODEL, Task.RAIN, TINY_TRAIN, TINY_LOSS, batches=2)
    base = store.base.tobytes()
    rain = effective_params(store, Task.RAIN).tobytes()
    unchanged = finetune_task(store.copy(), TINY_MODEL, Task.SNOW,
                              TrainConfig(**{**TINY_TRAIN.__dict__, "epochs": 0}), TINY_LOSS)
    assert unchanged.overrides[Task.SNOW].tobytes() == store.overrides[Task.SNOW].tobytes()

    before = store.overrides[Task.SNOW].copy()
    finetune_task(store, TINY_MODEL, Task.SNOW, TINY_TRAIN, TINY_LOSS)
    assert store.base.tobytes() == base
    assert effective_params(store, Task.RAIN).tobytes() == rain
    assert not np.array_equal(store.overrides[Task.SNOW], before)


def test_finetune_requires_mask(history):
    with pytest.raises(MissingStageError):
        finetune_task(history[0].copy(), TINY_MODEL, Task.RAIN, TINY_TRAIN, TINY_LOSS)


def test_finetune_deterministic(history):
    a, b = history[0].copy(), history[0].copy()
    for s in (a, b):
        build_task_mask(s, TINY_MODEL, Task.RAINDROP, TINY_TRAIN, TINY_LOSS, batches=2)
        finetune_task(s, TINY_MODEL, Task.RAINDROP, TINY_TRAIN, TINY_LOSS)
    assert a.overrides[Task.RAINDROP].tobytes() == b.overrides[Task.RAINDROP].tobytes()


def test_evaluate_modes(history):
    store = history[0].copy()
    build_task_mask(store, TINY_MODEL, Task.RAIN, TINY_TRAIN, TINY_LOSS, batches=1)
    reports = evaluate_modes(store, TINY_MODEL, Task.RAIN, 4, 123, (16, 16))
    assert set(reports) == {"degraded", "base", "masked"}
    # masks freshly initialised from the base predict exactly like it
    assert reports["base"].rows == reports["masked"].rows
    assert all(r.n_images == 4 for r in reports.values())
    assert reports["degraded"].rows == evaluate(None, None, Task.RAIN, 4, 123, (16, 16)).rows
