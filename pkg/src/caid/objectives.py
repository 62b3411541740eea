"""Instance-discrimination losses, the reconstruction loss and their combination."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import Stream
from .tensor import ShapeError, Tensor


class Queue:
    """FIFO ring buffer of L2-normalised keys used as InfoNCE negatives."""

    def __init__(self, capacity: int, dim: int, batch_size: int | None = None, seed: int | None = None):
        if batch_size is not None and capacity % batch_size:
            raise ValueError(f"queue capacity {capacity} not divisible by batch size {batch_size}")
        self.capacity = capacity
        self.dim = dim
        self.storage = np.zeros((capacity, dim), np.float32)
        self.cursor = 0
        self.count = 0
        if seed is not None:
            keys = Stream(seed, "queue-init").normal(capacity * dim).reshape(capacity, dim)
            self.push(keys / np.linalg.norm(keys, axis=1, keepdims=True))

    @property
    def full(self) -> bool:
        return self.count >= self.capacity

    def push(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError("queue.push", keys.shape, (None, self.dim))
        if np.any(np.abs(np.linalg.norm(keys, axis=1) - 1.0) > 1e-4):
            raise ValueError("queue.push: keys must be L2-normalised")
        for row in keys.astype(np.float32):
            self.storage[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def keys(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if not self.full:
            return self.storage[: self.count].copy()
        return np.concatenate([self.storage[self.cursor :], self.storage[: self.cursor]])

    def state(self) -> np.ndarray:
        return self.keys()


def _check_unit(name: str, t: Tensor, tol: float = 1e-4) -> None:
    norms = np.linalg.norm(t.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"{name}: inputs must be L2-normalised (max deviation {np.max(np.abs(norms - 1)):.2e})")


def info_nce(z: Tensor, z_pos: Tensor, keys: np.ndarray | Queue, tau: float) -> Tensor:
    """Contrastive loss of each query against its positive and the queued negatives.

    ``z`` and ``z_pos`` are (d,) or (b, d) unit vectors; the result is averaged
    over rows.  The positive logit sits at index 0 of the softmax denominator.
    """
    if tau <= 0:
        raise ValueError("info_nce: temperature must be positive")
    if isinstance(keys, Queue):
        keys = keys.keys()
    if z.ndim == 1:
        z = T.reshape(z, (1, -1))
        z_pos = T.reshape(z_pos, (1, -1))
    if z.shape != z_pos.shape:
        raise ShapeError("info_nce", z.shape, z_pos.shape)
    _check_unit("info_nce", z)
    _check_unit("info_nce", z_pos)
    negatives = Tensor(np.asarray(keys, dtype=z.dtype))
    if negatives.shape[1] != z.shape[1]:
        raise ShapeError("info_nce", z.shape, negatives.shape)
    pos = T.tsum(z * z_pos, axis=1, keepdims=True)
    neg = T.matmul(z, T.transpose(negatives))
    logits = T.scale(T.concat([pos, neg], axis=1), 1.0 / tau)
    loss = T.logsumexp(logits, axis=1) - T.reshape(T.scale(pos, 1.0 / tau), (-1,))
    return T.mean(loss)


def _standardize_columns(z: Tensor, eps: float) -> Tensor:
    centered = z - T.mean(z, axis=0, keepdims=True)
    var = T.mean(centered * centered, axis=0, keepdims=True)
    std = T.sqrt(T.maximum(var, eps * eps))
    return centered / std


def barlow_twins(z_a: Tensor, z_b: Tensor, lambda_bt: float = 0.005, eps: float = 1e-5) -> Tensor:
    """Redundancy-reduction loss on the batch cross-correlation of two embeddings.

    Columns are standardised over the batch (biased variance, standard
    deviation floored at ``eps``) before forming ``C = z_a^T z_b / b``.
    """
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ShapeError("barlow_twins", z_a.shape, z_b.shape)
    b = z_a.shape[0]
    if b < 2:
        raise ValueError("barlow_twins: batch size must be at least 2")
    za = _standardize_columns(z_a, eps)
    zb = _standardize_columns(z_b, eps)
    c = T.scale(T.matmul(T.transpose(za), zb), 1.0 / b)
    diag = T.take_diag(c)
    on = T.tsum((1.0 - diag) * (1.0 - diag))
    off = T.tsum(c * c) - T.tsum(diag * diag)
    return on + T.scale(off, lambda_bt)


def _neg_cosine(p: Tensor, y: Tensor) -> Tensor:
    if np.any(np.linalg.norm(p.data, axis=-1) == 0) or np.any(np.linalg.norm(y.data, axis=-1) == 0):
        raise ValueError("simsiam: zero-norm input")
    cos = T.tsum(T.l2_normalize(p) * T.l2_normalize(y), axis=-1)
    return -T.mean(cos)


def simsiam(p_a: Tensor, y_b: Tensor, p_b: Tensor, y_a: Tensor) -> Tensor:
    """Symmetrised negative cosine; targets ``y_a``/``y_b`` are detached."""
    for a, b in ((p_a, y_b), (p_b, y_a)):
        if a.shape != b.shape:
            raise ShapeError("simsiam", a.shape, b.shape)
    return T.scale(_neg_cosine(p_a, T.stop_gradient(y_b)) + _neg_cosine(p_b, T.stop_gradient(y_a)), 0.5)


def reconstruction_l2(target, recon: Tensor) -> Tensor:
    """Mean squared error over every pixel."""
    target = T.as_tensor(target, recon)
    if target.shape != recon.shape:
        raise ShapeError("reconstruction_l2", target.shape, recon.shape)
    return T.mean_square(recon - target)


def combined(l_ca: Tensor, l_id: Tensor, lambda_ca: float) -> Tensor:
    """``lambda_ca * l_ca + l_id``."""
    if l_ca.size != 1 or l_id.size != 1:
        raise ShapeError("combined", l_ca.shape, l_id.shape, detail="expected scalars")
    return T.scale(l_ca, lambda_ca) + l_id
