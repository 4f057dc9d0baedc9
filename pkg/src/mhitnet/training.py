"""Losses, Adam, the step-decay learning-rate schedule, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, TrainingDiverged
from .layers import Module
from .tensor import Tensor, clip, log, mean, mul, no_grad, scale, sub, sum_

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class AdamConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.75
    decay_every: int = 20

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if self.lr0 <= 0 or self.eps <= 0:
            raise ConfigurationError("lr0 and eps must be positive")
        if self.decay_every < 1:
            raise ConfigurationError("decay_every must be >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class LossConfig:
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    smooth: float = 1.0

    def __post_init__(self):
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.bce_weight == 0 and self.dice_weight == 0:
            raise ConfigurationError("at least one loss weight must be positive")


def _check_pair(pred: Tensor, target):
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return target


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = _check_pair(pred, target)
    p = clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one = Tensor(np.ones((), dtype=pred.dtype), dtype=pred.dtype)
    ll = mul(y, log(p)) + mul(sub(one, y), log(sub(one, p)))
    return scale(mean(ll), -1.0)


def dice_loss(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """``1 - (2 sum(p y) + s) / (sum p + sum y + s)`` over the whole batch."""
    y = _check_pair(pred, target)
    inter = sum_(mul(pred, y))
    denom = sum_(pred) + float(y.data.sum()) + smooth
    ratio = (scale(inter, 2.0) + smooth) / denom
    return scale(ratio, -1.0) + 1.0


def combined_loss(pred: Tensor, target, cfg: LossConfig) -> Tensor:
    total = None
    if cfg.bce_weight:
        total = scale(bce_loss(pred, target), cfg.bce_weight)
    if cfg.dice_weight:
        d = scale(dice_loss(pred, target, cfg.smooth), cfg.dice_weight)
        total = d if total is None else total + d
    return total


def lr_at_epoch(epoch: int, cfg: AdamConfig | None = None) -> float:
    """``lr0 * 0.75 ** floor(epoch / 20)`` with the default config."""
    cfg = cfg or AdamConfig()
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: AdamConfig, lr_t: float) -> AdamState:
    """One bias-corrected Adam update, in place on the arrays in ``params``.

    ``params`` and ``grads`` map names to numpy arrays. The step is refused
    (nothing mutated) if any gradient is non-finite.
    """
    if lr_t <= 0:
        raise ConfigurationError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step aborted")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= lr_t * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return state


class Adam:
    """Adam bound to a module's named parameters."""

    def __init__(self, net: Module, cfg: AdamConfig | None = None):
        self.net = net
        self.cfg = cfg or AdamConfig()
        self.state = AdamState()

    def step(self, lr_t: float):
        named = dict(self.net.named_parameters())
        params = {n: p.data for n, p in named.items()}
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in named.items()}
        adam_step(params, grads, self.state, self.cfg, lr_t)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float32
    masks: np.ndarray  # (N, 1, H, W) float32 in {0, 1}

    def __post_init__(self):
        if self.images.shape != self.masks.shape:
            raise DimensionError(f"images {self.images.shape} and masks {self.masks.shape} differ")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.masks[idx])


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    val_dice: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "step", "lr", "loss", "val_dice"])
            for r in self.records:
                w.writerow([r.epoch, r.step, repr(r.lr), repr(r.loss), repr(r.val_dice)])


def binary_dice(pred: np.ndarray, target: np.ndarray, threshold: float = 0.4) -> float:
    """Dice of ``pred >= threshold`` against a binary target; 1.0 if both are empty."""
    a = pred >= threshold
    b = target > 0.5
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def predict(net: Module, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode probabilities for a stack of images."""
    was_training = net.training
    net.eval()
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(net(Tensor(images[i:i + batch_size])).data)
    net.train(was_training)
    return np.concatenate(outs, axis=0)


def evaluate_dice(net: Module, data: Dataset, threshold: float = 0.4, batch_size: int = 16) -> float:
    """Mean per-image Dice of eval-mode predictions."""
    probs = predict(net, data.images, batch_size)
    return float(np.mean([binary_dice(p, m, threshold) for p, m in zip(probs, data.masks)]))


def fit(net: Module, dataset: Dataset, epochs: int, cfg: AdamConfig | None = None,
        loss_cfg: LossConfig | None = None, seed: int = 0, batch_size: int = 8,
        val: Dataset | None = None, threshold: float = 0.4, flips: bool = False,
        max_steps: int | None = None, on_epoch=None) -> TrainLog:
    """Train ``net`` with Adam and the step-decay schedule.

    Each epoch shuffles ``dataset`` under ``seed``, drops the last partial
    batch, and logs the mean loss and the validation Dice (on ``val``, or on
    the training set when no validation set is given). If the loss turns
    non-finite the parameters of the last completed step are restored and
    :class:`TrainingDiverged` is raised.
    """
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    cfg = cfg or AdamConfig()
    loss_cfg = loss_cfg or LossConfig()
    batch_size = min(batch_size, len(dataset))
    rng = np.random.default_rng(seed)
    opt = Adam(net, cfg)
    log_ = TrainLog()
    val = val if val is not None else dataset
    step = 0
    for epoch in range(epochs):
        lr = lr_at_epoch(epoch, cfg)
        order = rng.permutation(len(dataset))
        n_batches = len(dataset) // batch_size
        net.train()
        losses = []
        for b in range(n_batches):
            if max_steps is not None and step >= max_steps:
                break
            idx = np.sort(order[b * batch_size:(b + 1) * batch_size])
            x, y = dataset.images[idx], dataset.masks[idx]
            if flips:
                flip = rng.random(2) < 0.5
                if flip[0]:
                    x, y = x[..., ::-1, :], y[..., ::-1, :]
                if flip[1]:
                    x, y = x[..., ::-1], y[..., ::-1]
                x, y = np.ascontiguousarray(x), np.ascontiguousarray(y)
            # parameters only change in opt.step; batch-norm buffers change in forward
            good = {n: b.copy() for n, b in net.named_buffers()}
            net.zero_grad()
            pred = net(Tensor(x))
            loss = combined_loss(pred, Tensor(y), loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                _restore_buffers(net, good)
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, step {step}")
            loss.backward()
            try:
                opt.step(lr)
            except NumericError as exc:
                _restore_buffers(net, good)
                raise TrainingDiverged(str(exc)) from exc
            losses.append(value)
            log_.step_losses.append(value)
            step += 1
        val_dice = evaluate_dice(net, val, threshold)
        rec = EpochRecord(epoch, step, lr, float(np.mean(losses)) if losses else float("nan"), val_dice)
        log_.records.append(rec)
        logger.info("epoch %d step %d lr %.3g loss %.4f val_dice %.4f", epoch, step, lr, rec.loss, val_dice)
        if on_epoch is not None:
            on_epoch(rec)
        if max_steps is not None and step >= max_steps:
            break
    return log_


def _restore_buffers(net: Module, saved: dict):
    for name, buf in net.named_buffers():
        buf[...] = saved[name]
