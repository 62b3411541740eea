"""Two-phase pretraining: instance discrimination warm-up, then joint training
with the reconstruction loss."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import objectives as obj
from . import tensor as T
from .checkpoint import Checkpoint, config_hash
from .data import AugmentConfig, Dataset, make_pair
from .networks import METHODS, CaidModel, EncoderSpec, build_model, ema_update
from .nn import norm_parameter_ids
from .optim import SGD, cosine_lr
from .rng import Stream, derive_key
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    method: str = "moco_v2"
    epochs_warmup: int = 10
    epochs_joint: int = 30
    batch_size: int = 32
    lambda_ca: float = 10.0
    tau: float = 0.2
    lambda_bt: float = 0.005
    ema_m: float = 0.999
    queue_size: int = 512
    optimizer: str = "sgd"
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    data_seed: int = 0
    init_seed: int = 0
    augment_seed: int = 0
    val_fraction: float = 0.1
    crop_size: int = 24

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs_warmup < 0 or self.epochs_joint < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lambda_ca < 0:
            raise ValueError("lambda_ca must be non-negative")
        if self.tau <= 0 or self.lambda_bt <= 0:
            raise ValueError("tau and lambda_bt must be positive")
        if not 0.0 <= self.ema_m <= 1.0:
            raise ValueError("ema_m must lie in [0, 1]")
        if self.optimizer != "sgd":
            raise ValueError("pretraining supports optimizer 'sgd' only")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown pretraining schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        return config_hash(self.to_dict())


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class PretrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[EpochRecord]
    step_id_losses: list[float] = field(default_factory=list)
    model: CaidModel | None = None


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the first ``floor(val_fraction * n)`` indices go to validation."""
    perm = Stream(seed, "split").permutation(n)
    n_val = int(math.floor(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _embed(model: CaidModel, x: Tensor) -> Tensor:
    return model.projector(T.global_avg_pool(model.encoder(x)[-1]))


def discrimination_loss(model: CaidModel, x: Tensor, x2: Tensor, cfg: RunConfig, queue: obj.Queue | None):
    """Returns ``(loss, keys)``; keys are the momentum-encoder outputs for MoCo, else None."""
    if cfg.method == "moco_v2":
        q = T.l2_normalize(_embed(model, x))
        with no_grad():
            k = model.momentum_projector(T.global_avg_pool(model.momentum_encoder(x2)[-1]))
            k = T.l2_normalize(k)
        return obj.info_nce(q, T.stop_gradient(k), queue.keys(), cfg.tau), k.data
    if cfg.method == "barlow_twins":
        return obj.barlow_twins(_embed(model, x), _embed(model, x2), cfg.lambda_bt), None
    z1 = _embed(model, x)
    z2 = _embed(model, x2)
    return obj.simsiam(model.predictor(z1), z2, model.predictor(z2), z1), None


def context_loss(model: CaidModel, corrupted: Tensor, target: np.ndarray) -> Tensor:
    recon = T.sigmoid(model.decoder(model.encoder(corrupted)))
    return obj.reconstruction_l2(target, recon)


def _batch(dataset_images: np.ndarray, indices, seeds, fill: float, aug: AugmentConfig):
    pairs = [make_pair(dataset_images[i], s, fill, aug) for i, s in zip(indices, seeds)]
    stack = lambda attr: np.stack([getattr(p, attr) for p in pairs])[:, None].astype(np.float32)
    return stack("x"), stack("x2"), stack("corrupted"), stack("s_c")


def model_tensors(model: CaidModel, include_decoder: bool) -> "OrderedDict[str, np.ndarray]":
    state = model.state_dict()
    return OrderedDict(
        (k, v.copy()) for k, v in state.items() if include_decoder or not k.startswith("decoder.")
    )


def pretrain(config: RunConfig, dataset: Dataset, spec: EncoderSpec | None = None,
             on_epoch=None) -> PretrainResult:
    """Warm-up on the discrimination loss, then joint ``lambda_ca * L_ca + L_id`` training.

    Validation loss is the combined loss whenever the run has a joint phase
    (so every epoch is scored on the same objective), otherwise ``L_id``.
    For MoCo the validation ``L_id`` uses the other validation keys as
    negatives instead of the training queue.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("pretrain: empty dataset")
    train_idx, val_idx = split_indices(n, config.val_fraction, config.data_seed)
    if config.batch_size > len(train_idx):
        raise ValueError(f"batch size {config.batch_size} exceeds training split of {len(train_idx)}")
    images = dataset.images()
    fill = float(images[train_idx].mean())
    aug = AugmentConfig(crop_size=config.crop_size, out_size=images.shape[-1])
    spec = spec or EncoderSpec(image_size=images.shape[-1])

    model = build_model(config.method, spec, config.init_seed)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = SGD(trainable, config.lr, config.momentum, config.weight_decay, norm_parameter_ids(model))
    queue = None
    if config.method == "moco_v2":
        queue = obj.Queue(config.queue_size, spec.proj_dim, config.batch_size, seed=config.init_seed)

    steps_per_epoch = len(train_idx) // config.batch_size
    total_epochs = config.epochs_warmup + config.epochs_joint
    total_steps = max(1, steps_per_epoch * total_epochs)
    has_joint = config.epochs_joint > 0
    digest = config.digest()

    history: list[EpochRecord] = []
    step_losses: list[float] = []
    best: Checkpoint | None = None
    step = 0
    lr = config.lr
    for epoch in range(total_epochs):
        joint = epoch >= config.epochs_warmup
        model.train()
        order = train_idx[Stream(config.data_seed, "epoch", epoch).permutation(len(train_idx))]
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            seeds = [derive_key(config.augment_seed, epoch, int(i)) for i in idx]
            x, x2, corrupted, target = _batch(images, idx, seeds, fill, aug)
            lr = cosine_lr(config.lr, step, total_steps) if config.schedule == "cosine" else config.lr
            opt.lr = lr
            opt.zero_grad()
            l_id, keys = discrimination_loss(model, Tensor(x), Tensor(x2), config, queue)
            if joint:
                l_ca = context_loss(model, Tensor(corrupted), target)
                loss = obj.combined(l_ca, l_id, config.lambda_ca)
            else:
                loss = l_id
            loss.backward()
            opt.step()
            for online, momentum in model.momentum_pairs():
                ema_update(online, momentum, config.ema_m)
            if queue is not None:
                queue.push(keys)
            step_losses.append(float(l_id.data))
            epoch_losses.append(float(loss.data))
            step += 1

        val = validation_loss(model, images, val_idx, config, queue, fill, aug, has_joint)
        phase = "joint" if joint else "warmup"
        rec = EpochRecord(epoch, phase, float(np.mean(epoch_losses)) if epoch_losses else float("nan"), val, lr)
        history.append(rec)
        log.info("epoch %d %s train=%.4f val=%.4f lr=%.4g", epoch, phase, rec.train_loss, val, lr)
        if on_epoch is not None:
            on_epoch(rec)
        if best is None or val < best.val_loss:
            best = Checkpoint(model_tensors(model, has_joint), epoch, val, digest)

    last = Checkpoint(model_tensors(model, has_joint), total_epochs - 1,
                      history[-1].val_loss if history else float("nan"), digest)
    if best is None:
        best = last
    return PretrainResult(best, last, history, step_losses, model)


def validation_loss(model: CaidModel, images: np.ndarray, val_idx: np.ndarray, config: RunConfig,
                    queue, fill: float, aug: AugmentConfig, has_joint: bool) -> float:
    """Eval-mode objective on the validation split with fixed augmentation seeds."""
    if len(val_idx) == 0:
        return float("nan")
    model.eval()
    chunks = [val_idx[i : i + config.batch_size] for i in range(0, len(val_idx), config.batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    total, count = 0.0, 0
    queries, keys = [], []
    try:
        with no_grad():
            for idx in chunks:
                if len(idx) < 2 and config.method == "barlow_twins":
                    continue
                seeds = [derive_key(config.augment_seed, "val", int(i)) for i in idx]
                x, x2, corrupted, target = _batch(images, idx, seeds, fill, aug)
                value = 0.0
                if config.method == "moco_v2":
                    q, k = _moco_pair(model, Tensor(x), Tensor(x2))
                    queries.append(q)
                    keys.append(k)
                else:
                    value = float(discrimination_loss(model, Tensor(x), Tensor(x2), config, queue)[0].data)
                if has_joint:
                    value += config.lambda_ca * float(context_loss(model, Tensor(corrupted), target).data)
                total += value * len(idx)
                count += len(idx)
    finally:
        model.train()
    if not count:
        return float("nan")
    if queries:
        total += split_info_nce(np.concatenate(queries), np.concatenate(keys), config.tau) * count
    return total / count


def _moco_pair(model: CaidModel, x: Tensor, x2: Tensor) -> tuple[np.ndarray, np.ndarray]:
    q = T.l2_normalize(_embed(model, x)).data.astype(np.float64)
    k = model.momentum_projector(T.global_avg_pool(model.momentum_encoder(x2)[-1]))
    return q, T.l2_normalize(k).data.astype(np.float64)


def split_info_nce(q: np.ndarray, k: np.ndarray, tau: float) -> float:
    """InfoNCE where each query's negatives are the keys of every other sample.

    Used for validation so the score does not drift with the training queue.
    """
    logits = q @ k.T / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - np.diag(logits)))


def load_into_model(model: CaidModel, ckpt: Checkpoint) -> None:
    """Copy every tensor present in ``ckpt`` into ``model`` (non-strict)."""
    model.load_state_dict(ckpt.tensors, strict=False)
