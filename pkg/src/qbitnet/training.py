"""Training loop: SGD with momentum or Adam, step-decay learning rate,
L2 regularization on the real master weights only, and a deterministic
tab-separated metrics log."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network, NumericFailure, softmax_cross_entropy

LOG_HEADER = "epoch\tlr\ttrain_loss\ttrain_acc\tval_acc"


@dataclass
class TrainConfig:
    optimizer: str = "sgd-momentum"  # or "adam"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    milestones: tuple = (80, 120, 160)
    lr_factor: float = 0.1
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("lr, batch_size and epochs must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("bad momentum or weight decay")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        self.milestones = ms


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Base lr scaled by lr_factor at each milestone; epochs are 1-based
    and a milestone takes effect starting at its epoch."""
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.lr * cfg.lr_factor ** passed


class SGDMomentum:
    def __init__(self, params, momentum, weight_decay):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if p.decay and self.weight_decay:
                g = g + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value -= lr * v


class Adam:
    def __init__(self, params, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1 - b1 ** self.t
        bias2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if p.decay and self.weight_decay:
                g = g + self.weight_decay * p.value
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.weight_decay)
    return SGDMomentum(params, cfg.momentum, cfg.weight_decay)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.lr:.6g}\t{self.train_loss:.6f}\t"
                f"{self.train_acc * 100:.2f}\t{self.val_acc * 100:.2f}")


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    best_epoch: int
    best_val_acc: float
    best_state: dict
    log_text: str = ""


def evaluate(net: Network, dataset, batch_size=256) -> float:
    """Top-1 accuracy with frozen statistics (eval-mode fake-quant path)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for x, y in dataset.batches(batch_size):
        logits, _ = net.forward(x, training=False)
        correct += int((np.argmax(logits, axis=1) == y).sum())
    return correct / len(dataset)


def train(net: Network, cfg: TrainConfig, train_data, val_data,
          log_stream=None, progress=None) -> TrainResult:
    """Run the full schedule; deterministic for a fixed seed and config.

    The best state (by validation accuracy, earliest epoch on ties) is
    snapshotted so the final reported model matches the best validation
    epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    params = net.params()
    opt = make_optimizer(cfg, params)
    metrics: list[EpochMetrics] = []
    lines = [LOG_HEADER]
    if log_stream is not None:
        log_stream.write(LOG_HEADER + "\n")
    best_epoch, best_val, best_state = 0, -1.0, net.state()
    n = len(train_data)
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = train_data.batch(idx, rng=rng)
            logits, cache = net.forward(x, training=True)
            loss, grad = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NumericFailure(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"step {start // cfg.batch_size}")
            net.backward(cache, grad)
            opt.step(lr)
            loss_sum += loss * len(idx)
            correct += int((np.argmax(logits, axis=1) == y).sum())
        val_acc = evaluate(net, val_data)
        row = EpochMetrics(epoch, lr, loss_sum / n, correct / n, val_acc)
        metrics.append(row)
        lines.append(row.line())
        if log_stream is not None:
            log_stream.write(row.line() + "\n")
        if progress is not None:
            progress(row)
        if val_acc > best_val:
            best_epoch, best_val, best_state = epoch, val_acc, net.state()
    return TrainResult(metrics, best_epoch, best_val, best_state,
                       log_text="\n".join(lines) + "\n")
