"""Dice loss, SGD with a poly learning-rate schedule, the training loop and metrics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GSConvError, ShapeError

log = logging.getLogger(__name__)

DICE_EPS = 1e-5


class NonFiniteGradient(GSConvError, FloatingPointError):
    prefix = "nonfinite-gradient"


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 1000
    base_lr: float = 0.01
    power: float = 0.9
    batch_size: int = 4
    momentum: float = 0.9
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.max_iters < 1 or self.batch_size < 1:
            raise ConfigError("max_iters and batch_size must be positive")
        if not self.base_lr > 0 or not self.power > 0:
            raise ConfigError("base_lr and power must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class MetricsRow:
    iteration: int
    loss: float
    dice: list[float]
    mdice: float
    lr: float

    def as_csv_row(self) -> list:
        return [self.iteration, repr(self.loss), *map(repr, self.dice), repr(self.mdice), repr(self.lr)]


def csv_header(num_foreground: int) -> list[str]:
    return ["iter", "loss", *[f"dice_class{k}" for k in range(1, num_foreground + 1)], "mDice", "lr"]


def write_metrics_csv(rows: list[MetricsRow], path_or_file, num_foreground: int) -> None:
    def _write(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(csv_header(num_foreground))
        for r in rows:
            w.writerow(r.as_csv_row())

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as f:
            _write(f)


# loss ------------------------------------------------------------------------


def softmax_channels(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs, grad_probs) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. softmax outputs."""
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes)[labels]


def dice_loss(probs, target, eps: float = DICE_EPS):
    """Soft Dice over foreground channels 1..K-1, pooled over the whole batch.

    dice_k = (2 sum p g + eps) / (sum p^2 + sum g^2 + eps); loss = 1 - mean_k dice_k.
    Returns ``(loss, grad_wrt_probs)``; the background channel gets zero gradient.
    """
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"probs {p.shape} and target {g.shape} differ")
    K = p.shape[-1]
    if K < 2:
        raise ShapeError("dice loss needs a background and at least one foreground channel")
    P = p.reshape(-1, K)[:, 1:]
    T = g.reshape(-1, K)[:, 1:]
    inter = (P * T).sum(axis=0)
    denom = (P * P).sum(axis=0) + (T * T).sum(axis=0) + eps
    num = 2.0 * inter + eps
    dice = num / denom
    loss = 1.0 - dice.mean()
    # d dice_k / d p = (2 g denom - num * 2 p) / denom^2
    grad = np.zeros_like(p).reshape(-1, K)
    grad[:, 1:] = -(2.0 * T / denom - num * 2.0 * P / denom**2) / (K - 1)
    return float(loss), grad.reshape(p.shape)


# optimisation ----------------------------------------------------------------


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration <= cfg.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iters}]")
    return cfg.base_lr * (1.0 - iteration / cfg.max_iters) ** cfg.power


def sgd_step(params: dict, grads: dict, lr: float, velocity: dict, momentum: float = 0.9) -> None:
    """In-place momentum SGD: v <- momentum*v + g; p <- p - lr*v."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= lr * v


# metrics ---------------------------------------------------------------------


def hard_dice(pred, label, num_classes: int) -> list[float]:
    """Per-foreground-class Dice of hard label maps; empty vs empty scores 1."""
    out = []
    for k in range(1, num_classes):
        P = pred == k
        G = label == k
        denom = int(P.sum()) + int(G.sum())
        out.append(1.0 if denom == 0 else 2.0 * int((P & G).sum()) / denom)
    return out


def predict(net, volumes, batch_size: int = 4) -> np.ndarray:
    preds = []
    for i in range(0, len(volumes), batch_size):
        logits = net.forward(np.stack(volumes[i : i + batch_size]), retain=False)
        preds.append(logits.argmax(axis=-1))
    return np.concatenate(preds)


def evaluate(net, dataset, batch_size: int = 4) -> tuple[list[float], float]:
    """Dataset-averaged per-class Dice of argmax predictions, and their mean."""
    K = net.spec.num_classes
    vols = [v for v, _ in dataset]
    preds = predict(net, vols, batch_size)
    scores = np.array([hard_dice(p, lab, K) for p, (_, lab) in zip(preds, dataset)])
    per_class = scores.mean(axis=0).tolist()
    return per_class, float(np.mean(per_class))


def normalize_volume(volume, foreground_mask) -> np.ndarray:
    """Standardise the whole volume with the mean/std of its foreground voxels.

    Falls back to whole-volume statistics (with a warning) when the mask is
    empty or the foreground is constant.
    """
    v = np.asarray(volume, dtype=np.float64)
    mask = np.asarray(foreground_mask, dtype=bool)
    if mask.shape != v.shape:
        mask = np.broadcast_to(mask.reshape(mask.shape + (1,) * (v.ndim - mask.ndim)), v.shape)
    fg = v[mask]
    if fg.size == 0 or fg.std() == 0:
        log.warning("foreground empty or constant; normalising with whole-volume statistics")
        fg = v
    std = fg.std()
    return (v - fg.mean()) / (std if std > 0 else 1.0)


# loop --------------------------------------------------------------------------


@dataclass
class Trainer:
    net: object
    cfg: TrainConfig
    velocity: dict = field(default_factory=dict)

    def step(self, x, y_onehot, iteration: int):
        lr = poly_lr(iteration, self.cfg)
        logits = self.net.forward(x)
        probs = softmax_channels(logits)
        loss, gp = dice_loss(probs, y_onehot)
        grads = self.net.backward(softmax_backward(probs, gp))
        sgd_step(self.net.params, grads, lr, self.velocity, self.cfg.momentum)
        return loss, probs, lr


def train(net, dataset, cfg: TrainConfig, callback=None) -> list[MetricsRow]:
    """Run ``cfg.max_iters`` SGD steps on ``dataset`` (a list of (volume, label)).

    Batches are drawn from a seeded sequence of shuffled epochs. A MetricsRow
    with the batch loss and the batch's hard Dice is emitted on the first
    iteration, every ``cfg.log_every`` iterations and on the last one.
    """
    if not dataset:
        raise ShapeError("empty dataset")
    shape = dataset[0][0].shape
    for v, lab in dataset:
        if v.shape != shape or lab.shape != shape[:-1]:
            raise ShapeError(f"inconsistent sample dims {v.shape}/{lab.shape}, expected {shape}")
    K = net.spec.num_classes
    rng = np.random.default_rng(cfg.seed)
    trainer = Trainer(net, cfg)
    order, pos = rng.permutation(len(dataset)), 0
    rows = []
    for it in range(cfg.max_iters):
        idx = []
        while len(idx) < cfg.batch_size:
            if pos == len(order):
                order, pos = rng.permutation(len(dataset)), 0
            idx.append(order[pos])
            pos += 1
        x = np.stack([dataset[i][0] for i in idx])
        labels = np.stack([dataset[i][1] for i in idx])
        loss, probs, lr = trainer.step(x, one_hot(labels, K), it)
        n = it + 1
        if n == 1 or n % cfg.log_every == 0 or n == cfg.max_iters:
            pred = probs.argmax(axis=-1)
            dice = np.mean([hard_dice(p, l, K) for p, l in zip(pred, labels)], axis=0).tolist()
            row = MetricsRow(n, loss, dice, float(np.mean(dice)), lr)
            rows.append(row)
            log.info("iter %d loss %.4f mDice %.3f lr %.5f", n, loss, row.mdice, lr)
            if callback is not None:
                callback(row)
    return rows
