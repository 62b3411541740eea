"""Downstream evaluation: fine-tune encoders for multi-label classification
(AUC) and encoder+decoder for segmentation (Dice)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .analysis import two_sample_ttest
from .checkpoint import Checkpoint
from .data import Dataset, hflip, jitter, resize_bilinear, sample_bilinear
from .networks import Decoder, Encoder, EncoderSpec
from .nn import Linear, Module
from .optim import Adam, ReduceLROnPlateau, cosine_lr
from .rng import Stream, derive_key
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

KINDS = ("classification", "segmentation")


class TransferError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: fraction of positive/negative pairs ranked correctly, ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise TransferError(f"auc: {scores.shape[0]} scores vs {labels.shape[0]} labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise TransferError("auc needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mean_auc(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[int]]:
    """Mean AUC over classes; single-class columns are skipped and returned."""
    values, skipped = [], []
    for k in range(labels.shape[1]):
        try:
            values.append(auc(scores[:, k], labels[:, k]))
        except TransferError:
            skipped.append(k)
    if skipped:
        log.warning("auc: skipped single-class columns %s", skipped)
    if not values:
        raise TransferError("auc undefined for every class")
    return float(np.mean(values)), skipped


def dice(pred_mask, gt_mask, smooth: float = 1e-6) -> float:
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise TransferError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    return float((2.0 * inter + smooth) / (a.sum() + b.sum() + smooth))


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    arm: str
    metric: str
    seeds: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def add(self, seed: int, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise TransferError(f"{self.metric} value {value} outside [0, 1]")
        self.seeds.append(int(seed))
        self.values.append(float(value))

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else float("nan")

    def ttest(self, other: "EvalResult") -> tuple[float, float]:
        return two_sample_ttest(self.values, other.values)

    def rows(self) -> list[tuple]:
        return [(self.arm, s, self.metric, v) for s, v in zip(self.seeds, self.values)]


def write_results_csv(results: list[EvalResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "seed", "metric", "value"])
        for r in results:
            for arm, seed, metric, value in r.rows():
                w.writerow([arm, seed, metric, repr(value)])


def read_results_csv(path) -> list[EvalResult]:
    out: dict[tuple[str, str], EvalResult] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["arm", "seed", "metric", "value"]:
            raise TransferError(f"{path}: expected header arm,seed,metric,value")
        for row in reader:
            key = (row["arm"], row["metric"])
            res = out.setdefault(key, EvalResult(row["arm"], row["metric"]))
            res.seeds.append(int(row["seed"]))
            res.values.append(float(row["value"]))
    return list(out.values())


def write_significance_csv(rows: list[tuple[str, str, float, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm_a", "arm_b", "t", "p"])
        for a, b, t, p in rows:
            w.writerow([a, b, repr(float(t)), repr(float(p))])


# ---------------------------------------------------------------------------
# Data handling
# ---------------------------------------------------------------------------


def subset_labels(dataset: Dataset, fraction: float, seed: int, batch_size: int = 1) -> Dataset:
    """Seeded sample of ``floor(fraction * n)`` items without replacement, in original order."""
    if not 0.0 < fraction <= 1.0:
        raise TransferError(f"label fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset
    k = int(math.floor(fraction * len(dataset)))
    if k < batch_size:
        raise TransferError(f"subset of {k} samples is smaller than one batch ({batch_size})")
    chosen = Stream(seed, "label-subset").permutation(len(dataset))[:k]
    return dataset.subset(np.sort(chosen))


def split(dataset: Dataset, fraction: float, seed: int, label: str) -> tuple[Dataset, Dataset]:
    """Returns ``(rest, held_out)`` with ``floor(fraction * n)`` held out."""
    perm = Stream(seed, label).permutation(len(dataset))
    k = int(math.floor(fraction * len(dataset)))
    return dataset.subset(np.sort(perm[k:])), dataset.subset(np.sort(perm[:k]))


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    h, w = img.shape
    a = math.radians(degrees)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows = cy + (yy - cy) * math.cos(a) - (xx - cx) * math.sin(a)
    cols = cx + (yy - cy) * math.sin(a) + (xx - cx) * math.cos(a)
    return sample_bilinear(img, rows, cols)


def elastic_warp(img: np.ndarray, mask: np.ndarray, rng: Stream, alpha: float = 1.5, grid: int = 4):
    """Smooth random displacement (coarse grid upsampled bilinearly) applied to image and mask."""
    h, w = img.shape
    dy = resize_bilinear((rng.uniform(grid * grid, -alpha, alpha)).reshape(grid, grid).astype(np.float32), h, w)
    dx = resize_bilinear((rng.uniform(grid * grid, -alpha, alpha)).reshape(grid, grid).astype(np.float32), h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    warped = sample_bilinear(img, yy + dy, xx + dx)
    warped_mask = (sample_bilinear(mask.astype(np.float32), yy + dy, xx + dx) >= 0.5).astype(np.float32)
    return np.clip(warped, 0.0, 1.0), warped_mask


@dataclass(frozen=True)
class DownstreamAugment:
    crop_min: int = 28
    p_flip: float = 0.5
    max_rotation: float = 10.0
    scale_range: tuple = (0.8, 1.2)
    shift_range: tuple = (-0.1, 0.1)
    warp_alpha: float = 1.5


def augment_classification(img: np.ndarray, seed: int, cfg: DownstreamAugment) -> np.ndarray:
    h, w = img.shape
    rng = Stream(seed, "cls-aug")
    size = rng.integers(cfg.crop_min, h + 1)
    top = rng.integers(0, h - size + 1)
    left = rng.integers(0, w - size + 1)
    out = resize_bilinear(img[top : top + size, left : left + size], h, w)
    if rng.uniform() < cfg.p_flip:
        out = hflip(out)
    out = rotate(out, rng.uniform(None, -cfg.max_rotation, cfg.max_rotation))
    return np.clip(out, 0.0, 1.0)


def augment_segmentation(img: np.ndarray, mask: np.ndarray, seed: int, cfg: DownstreamAugment):
    rng = Stream(seed, "seg-aug")
    out = jitter(img, rng.uniform(None, *cfg.scale_range), rng.uniform(None, *cfg.shift_range))
    return elastic_warp(out, mask, rng, cfg.warp_alpha)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class Classifier(Module):
    def __init__(self, spec: EncoderSpec, n_classes: int, rng: Stream):
        super().__init__()
        self.encoder = Encoder(spec, rng.child("encoder"))
        self.head = Linear(spec.feature_dim, n_classes, rng.child("head"))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(T.global_avg_pool(self.encoder(x)[-1]))


class Segmenter(Module):
    def __init__(self, spec: EncoderSpec, rng: Stream):
        super().__init__()
        self.encoder = Encoder(spec, rng.child("encoder"))
        self.decoder = Decoder(spec, rng.child("decoder"))

    def forward(self, x: Tensor) -> Tensor:
        return self.decoder(self.encoder(x))


def _load_prefix(module: Module, ckpt: Checkpoint, prefix: str) -> bool:
    """Copy ``prefix.*`` tensors into ``module``; False when the checkpoint has none."""
    own = module.state_dict()
    found = {k[len(prefix) + 1 :]: v for k, v in ckpt.tensors.items() if k.startswith(prefix + ".")}
    if not found:
        return False
    missing = sorted(set(own) - set(found))
    extra = sorted(set(found) - set(own))
    if missing or extra:
        raise TransferError(f"checkpoint/architecture mismatch in {prefix}: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, v in found.items():
        if v.shape != own[k].shape:
            raise TransferError(f"checkpoint/architecture mismatch at {prefix}.{k}: {v.shape} vs {own[k].shape}")
    module.load_state_dict(found)
    return True


def initialise(model: Module, init: Checkpoint | None) -> dict:
    """Transfer encoder (and decoder when both sides have one); heads stay fresh."""
    loaded = {"encoder": False, "decoder": False}
    if init is None:
        return loaded
    loaded["encoder"] = _load_prefix(model.encoder, init, "encoder")
    if not loaded["encoder"]:
        raise TransferError("checkpoint has no encoder tensors")
    if isinstance(model, Segmenter):
        loaded["decoder"] = _load_prefix(model.decoder, init, "decoder")
    return loaded


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class DownstreamTask:
    kind: str = "classification"
    fraction: float = 1.0
    epochs: int = 30
    batch_size: int = 16
    lr: float | None = None
    plateau_patience: int = 5
    early_stop_patience: int = 10
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    split_seed: int = 0
    augment: DownstreamAugment = field(default_factory=DownstreamAugment)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TransferError(f"unknown task kind {self.kind!r}")
        if self.lr is None:
            self.lr = 2e-4 if self.kind == "classification" else 1e-3


@dataclass
class RunOutcome:
    test_metric: float
    best_val_loss: float
    best_epoch: int
    val_history: list[float]
    model: Module
    loaded: dict


def _batches(n: int, batch_size: int, rng: Stream) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # avoid a size-1 batch in train-mode batch norm
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _predict(model: Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[i : i + batch_size, None])).data)
    model.train()
    return np.concatenate(outs).astype(np.float64)


def _loss_on(model: Module, images: np.ndarray, targets: np.ndarray, kind: str) -> float:
    logits = _predict(model, images)
    if kind == "segmentation":
        targets = targets[:, None]
    z = logits
    return float(np.mean(np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))))


def finetune(init: Checkpoint | None, task: DownstreamTask, train: Dataset, test: Dataset, seed: int,
             spec: EncoderSpec | None = None) -> RunOutcome:
    """One fine-tuning run with early stopping on a 10% validation split."""
    spec = spec or EncoderSpec(image_size=train.images().shape[-1])
    train = subset_labels(train, task.fraction, derive_key(seed, "fraction"), 2)
    fit, val = split(train, task.val_fraction, derive_key(seed, "val"), "val-split")
    if len(fit) < 2:
        raise TransferError("fine-tuning split too small")
    if len(val) == 0:
        val = fit
    rng = Stream(seed, "finetune-init")
    if task.kind == "classification":
        model: Module = Classifier(spec, len(train.class_names) or train.labels().shape[1], rng)
        targets_of = lambda ds: ds.labels()
    else:
        model = Segmenter(spec, rng)
        targets_of = lambda ds: ds.masks()
    loaded = initialise(model, init)
    model.train()

    params = [p for p in model.parameters() if p.requires_grad]
    opt = Adam(params, task.lr)
    plateau = ReduceLROnPlateau(task.lr, task.plateau_patience)
    fit_x, fit_y = fit.images(), targets_of(fit)
    val_x, val_y = val.images(), targets_of(val)
    steps_per_epoch = len(_batches(len(fit), task.batch_size, Stream(0)))
    total = max(1, steps_per_epoch * task.epochs)

    best_val, best_epoch, best_state = math.inf, -1, model.state_dict()
    history = []
    since_best = 0
    step = 0
    for epoch in range(task.epochs):
        for idx in _batches(len(fit), task.batch_size, Stream(seed, "ft-order", epoch)):
            xs, ys = [], []
            for i in idx:
                aug_seed = derive_key(seed, "ft-aug", epoch, int(i))
                if task.kind == "classification":
                    xs.append(augment_classification(fit_x[i], aug_seed, task.augment))
                    ys.append(fit_y[i])
                else:
                    img, msk = augment_segmentation(fit_x[i], fit_y[i], aug_seed, task.augment)
                    xs.append(img)
                    ys.append(msk[None])
            if task.kind == "segmentation":
                opt.lr = cosine_lr(task.lr, step, total)
            else:
                opt.lr = plateau.lr
            opt.zero_grad()
            logits = model(Tensor(np.stack(xs)[:, None].astype(np.float32)))
            loss = T.bce_with_logits(logits, np.stack(ys).astype(np.float32))
            loss.backward()
            opt.step()
            step += 1
        v = _loss_on(model, val_x, val_y, task.kind)
        history.append(v)
        if task.kind == "classification":
            plateau.step(v)
        if v < best_val:
            best_val, best_epoch, best_state = v, epoch, model.state_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= task.early_stop_patience:
                break
    model.load_state_dict(best_state)
    return RunOutcome(evaluate(model, test, task.kind), best_val, best_epoch, history, model, loaded)


def evaluate(model: Module, test: Dataset, kind: str) -> float:
    logits = _predict(model, test.images())
    if kind == "classification":
        return mean_auc(logits, test.labels())[0]
    pred = logits[:, 0] >= 0.0  # sigmoid(z) >= 0.5
    gts = test.masks()
    return float(np.mean([dice(p, g) for p, g in zip(pred, gts)]))


def run_arm(arm: str, init: Checkpoint | None, task: DownstreamTask, dataset: Dataset,
            seeds: list[int], inits: dict[int, Checkpoint] | None = None) -> EvalResult:
    """Fine-tune once per seed on a fixed train/test split.

    ``inits`` optionally maps each seed to its own pretrained checkpoint.
    """
    train, test = split(dataset, task.test_fraction, task.split_seed, "test-split")
    result = EvalResult(arm, "auc" if task.kind == "classification" else "dice")
    for seed in seeds:
        ckpt = inits[seed] if inits is not None else init
        out = finetune(ckpt, task, train, test, seed)
        log.info("%s seed %d: %s=%.4f (best epoch %d)", arm, seed, result.metric, out.test_metric, out.best_epoch)
        result.add(seed, out.test_metric)
    return result


def finetune_classification(init: Checkpoint | None, task: DownstreamTask, dataset: Dataset,
                            seeds: list[int], arm: str = "") -> EvalResult:
    if task.kind != "classification":
        raise TransferError("finetune_classification needs a classification task")
    return run_arm(arm or ("pretrained" if init else "random"), init, task, dataset, seeds)


def finetune_segmentation(init: Checkpoint | None, task: DownstreamTask, dataset: Dataset,
                          seeds: list[int], arm: str = "") -> EvalResult:
    if task.kind != "segmentation":
        raise TransferError("finetune_segmentation needs a segmentation task")
    return run_arm(arm or ("pretrained" if init else "random"), init, task, dataset, seeds)
