"""SGD with momentum, Adam, and learning-rate schedules."""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor


def sgd_momentum_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    buffers: list[np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> None:
    """In place: ``v <- momentum*v + (g + wd*p)``; ``p <- p - lr*v``."""
    for p, g, v in zip(params, grads, buffers):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError("sgd_momentum_step", p.shape, g.shape)
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        p -= lr * v


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    m: list[np.ndarray],
    v: list[np.ndarray],
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update; ``step`` counts from 1."""
    if step < 1:
        raise ValueError("adam_step: step counter starts at 1")
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p -= (lr * (mi / c1) / (np.sqrt(vi / c2) + eps)).astype(p.dtype)


class SGD:
    """Momentum SGD over tensors; parameters whose grad is None are skipped entirely."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4, no_decay: set[int] | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = no_decay or set()
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            wd = 0.0 if id(p) in self.no_decay else self.weight_decay
            sgd_momentum_step([p.data], [p.grad], [buf], self.lr, self.momentum, wd)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        live = [i for i, p in enumerate(self.params) if p.grad is not None]
        adam_step(
            [self.params[i].data for i in live],
            [self.params[i].grad for i in live],
            [self.m[i] for i in live],
            [self.v[i] for i in live],
            self.t, self.lr, *self.betas, self.eps,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base_lr: float, t: int, total: int) -> float:
    """``base_lr * (1 + cos(pi * t / total)) / 2``."""
    if total <= 0:
        raise ValueError("cosine schedule needs a positive horizon")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(t, total) / total))


class ReduceLROnPlateau:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.5, min_delta: float = 0.0):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def lr_schedule(kind: str, base_lr: float, t: int = 0, total: int = 0, plateau: ReduceLROnPlateau | None = None) -> float:
    """Learning rate for ``kind`` in {cosine, plateau, constant} at step/epoch ``t``."""
    if kind == "cosine":
        return cosine_lr(base_lr, t, total)
    if kind == "plateau":
        return plateau.lr if plateau is not None else base_lr
    if kind == "constant":
        return base_lr
    raise ValueError(f"unknown schedule {kind!r}")
