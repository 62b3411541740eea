"""Dataset I/O, the synthetic chest-film generator and the two-crop augmentation pipeline."""

from __future__ import annotations

import csv
import math
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Stream, derive_key


class DataError(ValueError):
    """Malformed dataset input; ``row`` is the 1-based manifest data row when known."""

    def __init__(self, msg: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {msg}" if row is not None else msg)


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray
    labels: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise DataError(f"{self.id}: pixels outside [0, 1]")
        if self.mask is not None and self.mask.shape != self.pixels.shape:
            raise DataError(f"{self.id}: mask shape {self.mask.shape} != image shape {self.pixels.shape}")


@dataclass
class Dataset:
    samples: list[ImageSample]
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples]).astype(np.float32)

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples]).astype(np.float32)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], list(self.class_names))


# ---------------------------------------------------------------------------
# PGM / manifest I/O
# ---------------------------------------------------------------------------


def read_pgm(path: str | Path) -> np.ndarray:
    """Read an 8-bit binary (P5) PGM as a uint8 array."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise DataError(f"{path}: unsupported PGM variant {raw[:2]!r}")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    body = raw[pos : pos + width * height]
    if len(body) != width * height:
        raise DataError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


MANIFEST_HEADER = ["id", "image_path", "labels", "mask_path"]


def load_dataset(manifest_path: str | Path, class_names: list[str] | None = None) -> Dataset:
    """Load a CSV manifest of PGM images.

    The class list comes from ``class_names``, else ``classes.txt`` beside the
    manifest, else the sorted union of labels in the manifest.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    with manifest_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = list(reader)
    if class_names is None:
        cls_file = root / "classes.txt"
        if cls_file.is_file():
            class_names = [c for c in cls_file.read_text().split() if c]
        else:
            class_names = sorted({c for r in rows if len(r) > 2 for c in r[2].split("|") if c})
    index = {c: i for i, c in enumerate(class_names)}
    samples = []
    for rowno, row in enumerate(rows, start=1):
        if len(row) != 4:
            raise DataError(f"expected 4 fields, got {len(row)}", rowno)
        sid, img_path, labels, mask_path = row
        try:
            pixels = read_pgm(root / img_path).astype(np.float32) / 255.0
        except FileNotFoundError:
            raise DataError(f"missing image file {img_path}", rowno) from None
        except DataError as exc:
            raise DataError(str(exc), rowno) from None
        vec = np.zeros(len(class_names), np.uint8)
        for name in filter(None, labels.split("|")):
            if name not in index:
                raise DataError(f"label {name!r} not in class list {class_names}", rowno)
            vec[index[name]] = 1
        mask = None
        if mask_path:
            try:
                mask = (read_pgm(root / mask_path) > 127).astype(np.uint8)
            except FileNotFoundError:
                raise DataError(f"missing mask file {mask_path}", rowno) from None
        samples.append(ImageSample(sid, pixels, vec, mask))
    return Dataset(samples, list(class_names))


def write_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write PGM files, ``classes.txt`` and ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(s.mask is not None for s in dataset.samples)
    if has_masks:
        (out / "masks").mkdir(exist_ok=True)
    (out / "classes.txt").write_text("\n".join(dataset.class_names) + "\n")
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in dataset.samples:
            img_rel = f"images/{s.id}.pgm"
            write_pgm(out / img_rel, s.pixels)
            mask_rel = ""
            if s.mask is not None:
                mask_rel = f"masks/{s.id}.pgm"
                write_pgm(out / mask_rel, (s.mask > 0).astype(np.uint8) * 255)
            names = [] if s.labels is None else [dataset.class_names[i] for i in np.flatnonzero(s.labels)]
            writer.writerow([s.id, img_rel, "|".join(names), mask_rel])
    return manifest


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 500
    size: int = 32
    n_classes: int = 4
    noise: float = 0.05
    jitter: int = 2
    patch_radius: float = 3.0
    contrast: float = 0.18


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    # one-pixel soft edge
    return np.clip((1.0 - d) * min(ry, rx), 0.0, 1.0)


def anatomy_template(size: int) -> np.ndarray:
    """Body outline with two lung fields, identical for every image."""
    s = float(size)
    body = _ellipse(size, 0.52 * s, 0.5 * s, 0.46 * s, 0.44 * s)
    left = _ellipse(size, 0.48 * s, 0.30 * s, 0.30 * s, 0.14 * s)
    right = _ellipse(size, 0.48 * s, 0.70 * s, 0.30 * s, 0.14 * s)
    return 0.1 + 0.35 * body + 0.35 * (left + right)


def _class_sites(size: int, n_classes: int) -> list[tuple[float, float]]:
    sites = []
    rows = [0.34, 0.62, 0.48, 0.76, 0.22]
    for k in range(n_classes):
        col = 0.30 if k % 2 == 0 else 0.70
        row = rows[(k // 2) % len(rows)]
        sites.append((row * size, col * size))
    return sites


def _class_texture(size: int, k: int, n_classes: int) -> np.ndarray:
    theta = math.pi * k / max(n_classes, 1)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.cos(2 * math.pi / 3.0 * (xx * math.cos(theta) + yy * math.sin(theta)))


def generate_synthetic(config: SyntheticConfig, seed: int) -> Dataset:
    """Globally similar images that differ by a small class-specific texture patch.

    Each image carries exactly one class; its patch location and texture are
    fixed per class, shifted by up to ``jitter`` pixels, and every pixel gets
    Gaussian noise of standard deviation ``noise``.
    """
    if config.n <= 0:
        raise ValueError("generate_synthetic: n must be positive")
    if config.n_classes <= 0:
        raise ValueError("generate_synthetic: n_classes must be positive")
    size = config.size
    base = anatomy_template(size)
    sites = _class_sites(size, config.n_classes)
    textures = [_class_texture(size, k, config.n_classes) for k in range(config.n_classes)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    names = [f"c{k}" for k in range(config.n_classes)]
    samples = []
    width = len(str(config.n - 1))
    for i in range(config.n):
        rng = Stream(seed, "synthetic", i)
        k = rng.integers(0, config.n_classes)
        dy = rng.integers(-config.jitter, config.jitter + 1) if config.jitter else 0
        dx = rng.integers(-config.jitter, config.jitter + 1) if config.jitter else 0
        cy, cx = sites[k][0] + dy, sites[k][1] + dx
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2) <= config.patch_radius**2
        img = base + config.contrast * disk * (0.5 + 0.5 * textures[k])
        if config.noise > 0:
            img = img + config.noise * rng.normal(size * size).reshape(size, size)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        labels = np.zeros(config.n_classes, np.uint8)
        labels[k] = 1
        samples.append(ImageSample(f"img{i:0{width}d}", img, labels, disk.astype(np.uint8)))
    return Dataset(samples, names)


# ---------------------------------------------------------------------------
# Geometric helpers
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-interpolation weights for half-pixel-centred bilinear resampling."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    return (_bilinear_matrix(out_h, h) @ img.astype(np.float64) @ _bilinear_matrix(out_w, w).T).astype(np.float32)


def sample_bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates with edge clamping."""
    h, w = img.shape
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return (top * (1 - fr) + bot * fr).astype(np.float32)


# ---------------------------------------------------------------------------
# Two-crop augmentation pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    crop_size: int = 24
    out_size: int = 32
    p_flip: float = 0.5
    p_jitter: float = 0.5
    scale_range: tuple = (0.6, 1.4)
    shift_range: tuple = (-0.2, 0.2)
    p_blur: float = 0.5
    sigma_range: tuple = (0.1, 1.0)
    p_cutout: float = 0.5
    p_shuffle: float = 0.5
    grid: int = 4

    def forced_off(self) -> "AugmentConfig":
        return AugmentConfig(
            self.crop_size, self.out_size, 0.0, 0.0, self.scale_range, self.shift_range, 0.0,
            self.sigma_range, 0.0, 0.0, self.grid,
        )


def crop_box(size: tuple[int, int], crop_size: int, rng: Stream) -> tuple[int, int]:
    h, w = size
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop size {crop_size} larger than image {h}x{w}")
    top = rng.integers(0, h - crop_size + 1)
    left = rng.integers(0, w - crop_size + 1)
    return top, left


def two_crop(image: np.ndarray, seed: int, crop_size: int = 24, out_size: int | None = None):
    """Two independent random crops, resized back to ``out_size`` (default: image size).

    Returns ``(s_c, s_c2, boxes)`` where boxes holds each crop's top-left corner.
    """
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape
    out_size = out_size or h
    crops, boxes = [], []
    for which in ("crop_a", "crop_b"):
        top, left = crop_box((h, w), crop_size, Stream(seed, which))
        patch = image[top : top + crop_size, left : left + crop_size]
        crops.append(resize_bilinear(patch, out_size, out_size))
        boxes.append((top, left))
    return crops[0], crops[1], boxes


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def jitter(img: np.ndarray, scale: float, shift: float) -> np.ndarray:
    """Contrast about the image mean, then brightness shift, clamped to [0, 1]."""
    m = float(img.mean())
    return np.clip((img - m) * scale + m + shift, 0.0, 1.0).astype(np.float32)


def gaussian_blur3(img: np.ndarray, sigma: float) -> np.ndarray:
    k = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * sigma * sigma))
    k /= k.sum()
    p = np.pad(img.astype(np.float64), 1, mode="edge")
    rows = k[0] * p[:-2] + k[1] * p[1:-1] + k[2] * p[2:]
    out = k[0] * rows[:, :-2] + k[1] * rows[:, 1:-1] + k[2] * rows[:, 2:]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def cutout(img: np.ndarray, rects: list[tuple[int, int, int, int]], fill: float) -> np.ndarray:
    out = img.copy()
    for top, left, h, w in rects:
        out[top : top + h, left : left + w] = fill
    return out


def shuffle_patches(img: np.ndarray, perm, grid: int) -> np.ndarray:
    """Rearrange a ``grid x grid`` partition: output patch ``i`` is input patch ``perm[i]``."""
    h, w = img.shape
    if h % grid or w % grid:
        raise ValueError(f"image side {h}x{w} not divisible by grid {grid}")
    ph, pw = h // grid, w // grid
    tiles = img.reshape(grid, ph, grid, pw).transpose(0, 2, 1, 3).reshape(grid * grid, ph, pw)
    tiles = tiles[np.asarray(perm)]
    return tiles.reshape(grid, grid, ph, pw).transpose(0, 2, 1, 3).reshape(h, w).copy()


def _apply(img: np.ndarray, name: str, params: dict) -> np.ndarray:
    if name == "hflip":
        return hflip(img)
    if name == "jitter":
        return jitter(img, params["scale"], params["shift"])
    if name == "blur":
        return gaussian_blur3(img, params["sigma"])
    if name == "cutout":
        return cutout(img, params["rects"], params["fill"])
    if name == "shuffle":
        return shuffle_patches(img, params["perm"], params["grid"])
    raise ValueError(f"unknown augmentation {name!r}")


def replay(img: np.ndarray, provenance: list[tuple[str, dict, int]]) -> np.ndarray:
    """Re-apply recorded augmentations in order."""
    out = np.asarray(img, dtype=np.float32)
    for name, params, _ in provenance:
        out = _apply(out, name, params)
    return out


def augment_view(crop: np.ndarray, seed: int, cfg: AugmentConfig = AugmentConfig()):
    """Photometric/flip augmentation of one crop; returns ``(x, provenance)``."""
    x = np.asarray(crop, dtype=np.float32)
    prov = []
    sub = Stream(seed, "hflip")
    if sub.uniform() < cfg.p_flip:
        prov.append(("hflip", {}, sub.key))
    sub = Stream(seed, "jitter")
    if sub.uniform() < cfg.p_jitter:
        prov.append(("jitter", {"scale": sub.uniform(None, *cfg.scale_range),
                                "shift": sub.uniform(None, *cfg.shift_range)}, sub.key))
    sub = Stream(seed, "blur")
    if sub.uniform() < cfg.p_blur:
        prov.append(("blur", {"sigma": sub.uniform(None, *cfg.sigma_range)}, sub.key))
    return replay(x, prov), prov


def _cutout_rect(side: int, rng: Stream) -> tuple[int, int, int, int]:
    area = side * side
    lo, hi = 0.10 * area, 0.25 * area
    heights = [h for h in range(1, side + 1) if math.ceil(lo / h) <= min(side, math.floor(hi / h))]
    h = heights[rng.integers(0, len(heights))]
    w = rng.integers(math.ceil(lo / h), min(side, math.floor(hi / h)) + 1)
    top = rng.integers(0, side - h + 1)
    left = rng.integers(0, side - w + 1)
    return top, left, h, w


def context_corrupt(crop: np.ndarray, seed: int, fill: float, cfg: AugmentConfig = AugmentConfig()):
    """Cutout and patch shuffling for the reconstruction input; returns ``(img, provenance)``."""
    img = np.asarray(crop, dtype=np.float32)
    h, w = img.shape
    if h != w:
        raise ValueError("context_corrupt: crop must be square")
    if h % cfg.grid:
        raise ValueError(f"context_corrupt: side {h} not divisible by grid {cfg.grid}")
    prov = []
    sub = Stream(seed, "cutout")
    if sub.uniform() < cfg.p_cutout:
        n_rects = sub.integers(1, 3)
        rects = [_cutout_rect(h, sub) for _ in range(n_rects)]
        prov.append(("cutout", {"rects": rects, "fill": float(fill)}, sub.key))
    sub = Stream(seed, "shuffle")
    if sub.uniform() < cfg.p_shuffle:
        perm = sub.permutation(cfg.grid * cfg.grid).tolist()
        prov.append(("shuffle", {"perm": perm, "grid": cfg.grid}, sub.key))
    return replay(img, prov), prov


@dataclass
class AugmentedPair:
    s_c: np.ndarray
    s_c2: np.ndarray
    x: np.ndarray
    x2: np.ndarray
    corrupted: np.ndarray
    provenance: dict


def make_pair(image: np.ndarray, seed: int, fill: float, cfg: AugmentConfig = AugmentConfig()) -> AugmentedPair:
    """Crops, both augmented views and the corrupted reconstruction input for one image.

    Corruption is applied on top of view ``x``; the reconstruction target is
    the untouched crop ``s_c``.
    """
    s_c, s_c2, boxes = two_crop(image, derive_key(seed, "crops"), cfg.crop_size, cfg.out_size)
    x, prov_a = augment_view(s_c, derive_key(seed, "view_a"), cfg)
    x2, prov_b = augment_view(s_c2, derive_key(seed, "view_b"), cfg)
    corrupted, prov_c = context_corrupt(x, derive_key(seed, "corrupt"), fill, cfg)
    prov = {"crops": boxes, "x": prov_a, "x2": prov_b, "corrupted": prov_c}
    return AugmentedPair(s_c, s_c2, x, x2, corrupted, prov)
