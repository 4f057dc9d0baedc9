import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhitnet.data import SyntheticSpec, generate_synthetic
from mhitnet.errors import ConfigurationError, DimensionError, NumericError, TrainingDiverged
from mhitnet.network import MhitNet
from mhitnet.tensor import Tensor
from mhitnet.training import (
    AdamConfig,
    AdamState,
    Dataset,
    LossConfig,
    adam_step,
    bce_loss,
    binary_dice,
    combined_loss,
    dice_loss,
    fit,
    lr_at_epoch,
)

from oracles import adam_scalar_oracle


def test_lr_schedule_values():
    # 1e-4 * 0.75 is correctly rounded; it sits one ulp from the literal 7.5e-5
    assert lr_at_epoch(0) == 1e-4
    assert lr_at_epoch(19) == 1e-4
    assert lr_at_epoch(20) == pytest.approx(7.5e-5, rel=1e-15)
    assert lr_at_epoch(25) == pytest.approx(7.5e-5, rel=1e-15)
    assert lr_at_epoch(41) == pytest.approx(5.625e-5, rel=1e-15)
    with pytest.raises(ConfigurationError):
        lr_at_epoch(-1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 500))
def test_lr_schedule_is_non_increasing(e):
    assert lr_at_epoch(e + 1) <= lr_at_epoch(e)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20), st.floats(-1, 1))
def test_adam_matches_scalar_oracle(grads, theta0):
    cfg = AdamConfig()
    p = {"w": np.array([theta0], dtype=np.float64)}
    state = AdamState()
    want = adam_scalar_oracle(theta0, grads, 1e-3)
    for g, w in zip(grads, want):
        adam_step(p, {"w": np.array([g])}, state, cfg, 1e-3)
        assert abs(p["w"][0] - w) <= 1e-10


def test_adam_first_step_moves_by_lr():
    # with bias correction the first update is lr * g / (|g| + eps)
    p = {"w": np.array([1.0])}
    adam_step(p, {"w": np.array([0.5])}, AdamState(), AdamConfig(), 0.01)
    assert p["w"][0] == pytest.approx(1.0 - 0.01, abs=1e-9)


def test_adam_refuses_nan_without_mutating():
    p = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = AdamState()
    with pytest.raises(NumericError):
        adam_step(p, {"a": np.array([0.1]), "b": np.array([np.nan])}, state, AdamConfig(), 1e-3)
    assert p["a"][0] == 1.0 and state.t == 0 and not state.m


def test_bce_matches_formula(rng):
    p = rng.uniform(0.01, 0.99, size=(2, 1, 3, 3))
    y = (rng.random((2, 1, 3, 3)) < 0.5).astype(np.float64)
    got = bce_loss(Tensor(p, dtype=np.float64), Tensor(y, dtype=np.float64)).item()
    assert got == pytest.approx(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)), rel=1e-12)


def test_bce_clamps_certain_mistakes():
    got = bce_loss(Tensor(np.array([0.0, 1.0]), dtype=np.float64), Tensor(np.array([1.0, 0.0]), dtype=np.float64))
    assert math.isfinite(got.item())
    assert got.item() == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_dice_loss_values():
    y = np.array([1.0, 1.0, 0.0, 0.0])
    assert dice_loss(Tensor(y, dtype=np.float64), y).item() == pytest.approx(0.0, abs=1e-12)
    # (2*0 + 1) / (2 + 2 + 1)
    assert dice_loss(Tensor(1 - y, dtype=np.float64), y).item() == pytest.approx(1 - 1 / 5)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


def test_combined_loss_weights(rng):
    p = Tensor(rng.uniform(0.1, 0.9, (1, 1, 4, 4)), dtype=np.float64)
    y = (rng.random((1, 1, 4, 4)) < 0.5).astype(np.float64)
    both = combined_loss(p, y, LossConfig(2.0, 3.0)).item()
    assert both == pytest.approx(2 * bce_loss(p, y).item() + 3 * dice_loss(p, y).item())
    with pytest.raises(ConfigurationError):
        LossConfig(0.0, 0.0)


def test_binary_dice_conventions():
    assert binary_dice(np.zeros(4), np.zeros(4)) == 1.0
    assert binary_dice(np.array([0.5, 0.3]), np.array([1.0, 0.0])) == 1.0


def _small_data():
    train, val = generate_synthetic(SyntheticSpec(image_size=16, n_train=8, n_val=4, seed=5))
    return train, val


def test_fit_is_deterministic(tiny_cfg):
    train, val = _small_data()
    runs = []
    for _ in range(2):
        net = MhitNet(tiny_cfg, seed=1)
        log = fit(net, train, 2, AdamConfig(lr0=1e-3), seed=7, batch_size=4, val=val)
        runs.append((log.step_losses, [p.data.copy() for p in net.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_fit_logs_schedule_and_drops_partial_batch(tiny_cfg):
    train, _ = _small_data()
    log = fit(MhitNet(tiny_cfg), train.subset(np.arange(7)), 2, AdamConfig(lr0=1e-3, decay_every=1), batch_size=3)
    assert [r.step for r in log.records] == [2, 4]
    assert [r.lr for r in log.records] == [1e-3, 7.5e-4]


def test_fit_divergence_restores_buffers(tiny_cfg):
    train, _ = _small_data()
    net = MhitNet(tiny_cfg)
    net.head.bias.data[...] = np.nan
    before = {n: b.copy() for n, b in net.named_buffers()}
    with pytest.raises(TrainingDiverged):
        fit(net, train, 1, batch_size=4)
    for n, b in net.named_buffers():
        assert np.array_equal(b, before[n])


def test_dataset_shape_check():
    with pytest.raises(DimensionError):
        Dataset(np.zeros((2, 1, 4, 4)), np.zeros((3, 1, 4, 4)))


def test_fit_empty_dataset(tiny_net):
    empty = Dataset(np.zeros((0, 1, 16, 16), np.float32), np.zeros((0, 1, 16, 16), np.float32))
    with pytest.raises(ConfigurationError):
        fit(tiny_net, empty, 1)
