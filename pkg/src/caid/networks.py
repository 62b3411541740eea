"""Mini-ResNet encoder, projection heads, U-Net decoder and the momentum copy."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, Linear, Module, ReLU, Sequential
from .rng import Stream
from .tensor import Tensor, no_grad

METHODS = ("moco_v2", "barlow_twins", "simsiam")


@dataclass(frozen=True)
class EncoderSpec:
    in_channels: int = 1
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    image_size: int = 32
    proj_dim: int = 64

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: Stream):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng.child("conv1"), stride=stride)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng.child("conv2"))
        # zero-init so every block starts as its shortcut
        self.bn2 = BatchNorm(cout, zero_init=True)
        if stride != 1 or cin != cout:
            self.down = Conv2d(cin, cout, 1, rng.child("down"), stride=stride)
            self.down_bn = BatchNorm(cout)
        else:
            self.down = None

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = self.down_bn(self.down(x)) if self.down is not None else x
        return T.relu(out + short)


class Encoder(Module):
    """Returns the five tap activations: stem output and the end of each stage."""

    def __init__(self, spec: EncoderSpec, rng: Stream):
        super().__init__()
        self.spec = spec
        self.stem = Conv2d(spec.in_channels, spec.stem_channels, 3, rng.child("stem"), stride=2)
        self.stem_bn = BatchNorm(spec.stem_channels)
        cin = spec.stem_channels
        self.stages = []
        for i, cout in enumerate(spec.stage_channels):
            blocks = []
            for j in range(spec.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(BasicBlock(cin, cout, stride, rng.child("stage", i, j)))
                cin = cout
            stage = Sequential(*blocks)
            setattr(self, f"stage{i + 1}", stage)
            self.stages.append(stage)

    def forward(self, x: Tensor) -> list[Tensor]:
        h = T.relu(self.stem_bn(self.stem(x)))
        taps = [h]
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        return taps


def mlp(dims: list[int], rng: Stream, norm: bool, last_norm: bool = False) -> Sequential:
    layers = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        layers.append(Linear(dims[i], dims[i + 1], rng.child("fc", i), bias=not (norm and not last)))
        if not last:
            if norm:
                layers.append(BatchNorm(dims[i + 1]))
            layers.append(ReLU())
        elif last_norm:
            layers.append(BatchNorm(dims[i + 1]))
    return Sequential(*layers)


class Decoder(Module):
    """U-Net decoder: upsample, concatenate the matching encoder tap, convolve.

    Produces one-channel logits at input resolution.
    """

    def __init__(self, spec: EncoderSpec, rng: Stream):
        super().__init__()
        c1 = spec.stem_channels
        s1, s2, s3, s4 = spec.stage_channels
        self.up3 = Conv2d(s4 + s3, s3, 3, rng.child("up3"))
        self.bn3 = BatchNorm(s3)
        self.up2 = Conv2d(s3 + s2, s2, 3, rng.child("up2"))
        self.bn2 = BatchNorm(s2)
        self.up1 = Conv2d(s2 + s1 + c1, s1, 3, rng.child("up1"))
        self.bn1 = BatchNorm(s1)
        self.up0 = Conv2d(s1, s1 // 2, 3, rng.child("up0"))
        self.bn0 = BatchNorm(s1 // 2)
        self.head = Conv2d(s1 // 2, 1, 1, rng.child("head"), bias=True)

    def forward(self, taps: list[Tensor]) -> Tensor:
        stem, t1, t2, t3, t4 = taps
        h = T.upsample2x(t4)
        h = T.relu(self.bn3(self.up3(T.concat([h, t3]))))
        h = T.upsample2x(h)
        h = T.relu(self.bn2(self.up2(T.concat([h, t2]))))
        h = T.upsample2x(h)
        h = T.relu(self.bn1(self.up1(T.concat([h, t1, stem]))))
        h = T.upsample2x(h)
        h = T.relu(self.bn0(self.up0(h)))
        return self.head(h)


class CaidModel(Module):
    """Online network (encoder, heads, decoder) plus the momentum copy for MoCo-v2."""

    def __init__(self, method: str, spec: EncoderSpec, seed: int):
        super().__init__()
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        self.method = method
        self.spec = spec
        rng = Stream(seed, "init")
        d, p = spec.feature_dim, spec.proj_dim
        self.encoder = Encoder(spec, rng.child("encoder"))
        if method == "moco_v2":
            self.projector = mlp([d, d, p], rng.child("projector"), norm=False)
        elif method == "barlow_twins":
            self.projector = mlp([d, d, d, p], rng.child("projector"), norm=True)
        else:
            self.projector = mlp([d, d, d, p], rng.child("projector"), norm=True, last_norm=True)
            self.predictor = mlp([p, p // 4, p], rng.child("predictor"), norm=True)
        self.decoder = Decoder(spec, rng.child("decoder"))
        if method == "moco_v2":
            self.momentum_encoder = _frozen_copy(self.encoder)
            self.momentum_projector = _frozen_copy(self.projector)

    @property
    def has_predictor(self) -> bool:
        return "predictor" in self._modules

    def online_modules(self) -> list[Module]:
        mods = [self.encoder, self.projector]
        if self.has_predictor:
            mods.append(self.predictor)
        return mods

    def momentum_pairs(self) -> list[tuple[Module, Module]]:
        if self.method != "moco_v2":
            return []
        return [(self.encoder, self.momentum_encoder), (self.projector, self.momentum_projector)]

    def embed(self, x: Tensor) -> Tensor:
        return self.projector(T.global_avg_pool(self.encoder(x)[-1]))


def _frozen_copy(module: Module) -> Module:
    clone = copy.deepcopy(module)
    for p in clone.parameters():
        p.requires_grad = False
        p.grad = None
    return clone


def build_model(method: str, spec: EncoderSpec | None = None, seed: int = 0) -> CaidModel:
    return CaidModel(method, spec or EncoderSpec(), seed)


def ema_update(online: Module, momentum: Module, m: float) -> None:
    """``xi <- m * xi + (1 - m) * theta`` for every parameter pair."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA coefficient must lie in [0, 1], got {m}")
    theta = list(online.named_parameters())
    xi = list(momentum.named_parameters())
    if len(theta) != len(xi):
        raise T.ShapeError("ema_update", (len(theta),), (len(xi),), detail="parameter count")
    for (n1, p), (n2, q) in zip(theta, xi):
        if p.shape != q.shape:
            raise T.ShapeError("ema_update", p.shape, q.shape, detail=n1)
        q.data = (m * q.data + (1.0 - m) * p.data).astype(q.dtype)


def extract_features(encoder: Encoder, images: np.ndarray, layer_id: int, batch_size: int = 64) -> np.ndarray:
    """GAP features at tap ``layer_id`` (1 = stem, 5 = last stage), eval mode."""
    if layer_id not in (1, 2, 3, 4, 5):
        raise ValueError(f"layer_id must be in 1..5, got {layer_id}")
    return extract_all_features(encoder, images, batch_size)[layer_id - 1]


def extract_all_features(encoder: Encoder, images: np.ndarray, batch_size: int = 64) -> list[np.ndarray]:
    """GAP features at every tap, as a list of five (n, channels) arrays."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    was_training = encoder.training
    encoder.eval()
    chunks: list[list[np.ndarray]] = [[] for _ in range(5)]
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                taps = encoder(Tensor(images[i : i + batch_size]))
                for k, t in enumerate(taps):
                    chunks[k].append(t.data.mean(axis=(2, 3)))
    finally:
        encoder.train(was_training)
    return [np.concatenate(c).astype(np.float64) for c in chunks]
