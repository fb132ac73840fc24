"""SGD-with-momentum trainer using the vanilla tape for weight gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import graph
from .graph import BatchNorm, CrossEntropy
from .models import ModelDef, init_weights
from .rules import VANILLA
from .tensor import DTYPE
from .weights import WeightStore

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    bn_momentum: float = 0.1
    augment: bool = True
    seed: int = 0


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded copy plus random horizontal flip."""
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    rows = dy[:, None] + np.arange(h)[None, :]
    cols = dx[:, None] + np.arange(w)[None, :]
    cols = np.where(flip[:, None], cols[:, ::-1], cols)
    out = xp[np.arange(n)[:, None, None, None], np.arange(x.shape[1])[None, :, None, None],
             rows[:, None, :, None], cols[:, None, None, :]]
    return np.ascontiguousarray(out)


def _bn_entries(entries):
    for e in entries:
        if isinstance(e.layer, BatchNorm):
            yield e
        yield from _bn_entries(e.aux.get("shortcut", ()))


def _update_running_stats(tape: graph.Tape, weights: dict, momentum: float) -> None:
    m = DTYPE(momentum)
    for e in _bn_entries(tape.entries):
        x = e.input
        count = x.size // x.shape[1]
        unbiased = e.aux["batch_var"] * DTYPE(count / max(count - 1, 1))
        layer = e.layer
        weights[layer.mean] = ((1 - m) * weights[layer.mean] + m * e.aux["batch_mean"]).astype(DTYPE)
        weights[layer.var] = ((1 - m) * weights[layer.var] + m * unbiased).astype(DTYPE)


def _trainable(model: ModelDef) -> list[str]:
    stats = set()
    for layer in _all_layers(model.layers):
        if isinstance(layer, BatchNorm):
            stats.update((layer.mean, layer.var))
    return sorted(set(model.param_shapes) - stats)


def _all_layers(layers):
    for layer in layers:
        yield layer
        yield from _all_layers(getattr(layer, "shortcut", ()))


def accuracy(model: ModelDef, weights, x: np.ndarray, y: np.ndarray, batch: int = 250) -> float:
    if len(x) == 0:
        return 0.0
    return float((graph.predict(model, weights, x, batch) == y).mean())


def train(
    model: ModelDef,
    train_set: tuple[np.ndarray, np.ndarray],
    test_set: tuple[np.ndarray, np.ndarray] | None = None,
    cfg: TrainConfig = TrainConfig(),
    progress=None,
) -> WeightStore:
    """Train from a seeded initialisation; cosine learning-rate decay per step.

    Deterministic for a given seed on a fixed BLAS thread count.
    """
    x, y = train_set
    if len(x) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    weights = init_weights(model, cfg.seed)
    names = _trainable(model)
    velocity = {k: np.zeros_like(weights[k]) for k in names}
    steps_per_epoch = int(np.ceil(len(x) / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        running = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            xb = augment(x[idx], rng) if cfg.augment else x[idx]
            lr = DTYPE(0.5 * cfg.lr * (1 + np.cos(np.pi * step / total)))
            tape = graph.forward(model, weights, xb, training=True)
            loss, d = graph.loss_and_grad(tape, CrossEntropy(y[idx]))
            d = d / DTYPE(len(idx))
            grads: dict = {}
            graph.backward(tape, VANILLA, d, param_grads=grads)
            _update_running_stats(tape, weights, cfg.bn_momentum)
            for k in names:
                g = grads[k]
                if k.endswith(".w"):
                    g = g + DTYPE(cfg.weight_decay) * weights[k]
                velocity[k] = DTYPE(cfg.momentum) * velocity[k] + g
                weights[k] = (weights[k] - lr * velocity[k]).astype(DTYPE)
            running += loss / len(idx)
            step += 1
        msg = f"{model.name} epoch {epoch + 1}/{cfg.epochs} loss {running / steps_per_epoch:.4f}"
        if test_set is not None and progress is not None:
            msg += f" test acc {accuracy(model, weights, *test_set):.4f}"
        log.info(msg)
        if progress is not None:
            progress(msg)
    meta = {
        "model": model.name,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "momentum": cfg.momentum,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "train_size": int(len(x)),
    }
    if test_set is not None:
        meta["clean_accuracy"] = round(accuracy(model, weights, *test_set), 6)
    return WeightStore({k: np.ascontiguousarray(v, dtype=DTYPE) for k, v in weights.items()}, meta)
