"""Synthetic lesion / texture datasets with retain-forget-val splits.

Segmentation images are a smooth background plus 1-3 bright elliptical
lesions and Gaussian noise; masks are the exact lesion support. Each item
belongs to a shape family ("round" or "elongated"); a ``forget_ratio``
share of the training pool is elongated, so ``forget_mode="by-morphology"``
can hand the whole elongated family to the forget split while
``forget_mode="random"`` samples forget ids uniformly.

Classification images are sinusoidal gratings whose spatial period encodes
one of ``n_classes`` labels; the family is the grating orientation
(near-horizontal vs near-vertical).

On disk: ``images/<id>.pgm``, ``masks/<id>.pgm`` (8-bit P5), a
``manifest.tsv`` with ``id<TAB>split<TAB>label`` lines and a flat
``genspec.txt``.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .config import ConfigError, parse_kv

SPLITS = ("retain", "forget", "val")
FORGET_MODES = ("random", "by-morphology")
CLASS_PERIODS = (3.0, 5.5, 10.0)


class DatasetError(ValueError):
    """Invalid generation spec, corrupt files or split violations."""


@dataclass
class GenSpec:
    task: str = "seg"
    count: int = 200
    height: int = 32
    width: int = 32
    lesions_min: int = 1
    lesions_max: int = 3
    radius_min: float = 0.12
    radius_max: float = 0.22
    elongated_major_min: float = 0.22
    elongated_major_max: float = 0.32
    elongated_aspect_min: float = 2.6
    elongated_aspect_max: float = 3.4
    bg_level_min: float = 0.12
    bg_level_max: float = 0.28
    bg_texture: float = 0.05
    fg_contrast_min: float = 0.30
    fg_contrast_max: float = 0.45
    fg_texture: float = 0.04
    noise_sigma: float = 0.06
    n_classes: int = 3
    grating_amplitude: float = 0.3
    forget_mode: str = "random"
    forget_ratio: float = 0.10
    val_count: int = 40
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_train(self) -> int:
        return self.count - self.val_count

    @property
    def n_forget(self) -> int:
        return int(math.floor(self.forget_ratio * self.n_train + 1e-9))

    def validate(self) -> None:
        if self.task not in ("seg", "cls"):
            raise DatasetError(f"task must be 'seg' or 'cls', got {self.task!r}")
        if self.height % 4 or self.width % 4:
            raise DatasetError(f"image size {self.height}x{self.width} must be divisible by 4")
        if self.forget_mode not in FORGET_MODES:
            raise DatasetError(f"forget_mode must be one of {FORGET_MODES}, got {self.forget_mode!r}")
        if not 0 < self.forget_ratio < 1:
            raise DatasetError(f"forget_ratio must be in (0, 1), got {self.forget_ratio}")
        if not 0 < self.val_count < self.count:
            raise DatasetError(f"val_count must be in (0, count), got {self.val_count}")
        if self.n_forget < 1:
            raise DatasetError("forget ratio yields an empty forget set")
        if self.n_forget >= self.n_train:
            raise DatasetError("forget ratio yields an empty retain set")
        if not 1 <= self.lesions_min <= self.lesions_max:
            raise DatasetError("invalid lesion count range")
        if not 0 < self.radius_min <= self.radius_max < 0.5:
            raise DatasetError("invalid radius range")
        if self.n_classes < 2:
            raise DatasetError("need at least two classes")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "GenSpec":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        try:
            raw = parse_kv(text)
        except ConfigError as exc:
            raise DatasetError(str(exc)) from None
        for key, value in raw.items():
            if key not in types:
                raise DatasetError(f"unknown genspec key {key!r}")
            kind = types[key]
            kwargs[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        return cls(**kwargs)


@dataclass
class Item:
    id: str
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    target: object  # mask [1, H, W] float32 in {0, 1} or int label
    split: str
    family: str = ""
    clean: Optional[np.ndarray] = None
    background: Optional[np.ndarray] = None


@dataclass
class SplitDataset:
    items: list
    spec: GenSpec

    @property
    def task(self) -> str:
        return self.spec.task

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return [it for it in self.items if it.split == name]

    def train(self) -> list:
        return [it for it in self.items if it.split != "val"]

    def manifest(self) -> dict[str, str]:
        return {it.id: it.split for it in self.items}

    def counts(self) -> dict[str, int]:
        return {s: sum(it.split == s for it in self.items) for s in SPLITS}

    def by_id(self) -> dict:
        return {it.id: it for it in self.items}

    def validate(self) -> None:
        """Check disjoint/exhaustive splits, forget ratio and binary masks."""
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate item ids")
        for it in self.items:
            if it.split not in SPLITS:
                raise DatasetError(f"item {it.id}: invalid split tag {it.split!r}")
            if self.task == "seg":
                if not np.isin(it.target, (0.0, 1.0)).all():
                    raise DatasetError(f"item {it.id}: mask is not binary")
                if not it.target.any():
                    raise DatasetError(f"item {it.id}: empty lesion mask")
        counts = self.counts()
        if counts["val"] != self.spec.val_count:
            raise DatasetError(f"expected {self.spec.val_count} val items, found {counts['val']}")
        if abs(counts["forget"] - self.spec.forget_ratio * self.spec.n_train) > 1:
            raise DatasetError(f"forget count {counts['forget']} does not match ratio {self.spec.forget_ratio}")


# -- generation -------------------------------------------------------------

def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0, 1) * 255) / 255).astype(np.float32)


def _assign_splits(spec: GenSpec, rng: np.random.Generator) -> tuple[list, list]:
    """Return per-item split names and family flags (True = special family)."""
    order = rng.permutation(spec.count)
    val_idx = set(order[: spec.val_count].tolist())
    train_idx = [i for i in range(spec.count) if i not in val_idx]
    n_f = spec.n_forget
    special_train = set(rng.choice(train_idx, size=n_f, replace=False).tolist())
    val_sorted = sorted(val_idx)
    n_special_val = int(round(spec.forget_ratio * spec.val_count))
    special_val = set(rng.choice(val_sorted, size=n_special_val, replace=False).tolist())
    if spec.forget_mode == "by-morphology":
        forget = special_train
    else:
        forget = set(rng.choice(train_idx, size=n_f, replace=False).tolist())
    splits, special = [], []
    for i in range(spec.count):
        splits.append("val" if i in val_idx else "forget" if i in forget else "retain")
        special.append(i in special_train or i in special_val)
    return splits, special


def _smooth_background(rng, h, w, spec: GenSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    level = rng.uniform(spec.bg_level_min, spec.bg_level_max)
    gx, gy = rng.uniform(-0.06, 0.06, size=2)
    fx, fy = rng.uniform(0.5, 2.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    tex = np.sin(2 * np.pi * fx * xx + phase[0]) * np.sin(2 * np.pi * fy * yy + phase[1])
    return level + gx * xx + gy * yy + spec.bg_texture * tex


def _ellipse(h, w, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _lesion_image(rng, spec: GenSpec, elongated: bool) -> tuple:
    h, w = spec.height, spec.width
    size = min(h, w)
    while True:
        bg = _smooth_background(rng, h, w, spec)
        mask = np.zeros((h, w), dtype=bool)
        lesion = np.zeros((h, w))
        for _ in range(int(rng.integers(spec.lesions_min, spec.lesions_max + 1))):
            if elongated:
                a = rng.uniform(spec.elongated_major_min, spec.elongated_major_max) * size
                b = a / rng.uniform(spec.elongated_aspect_min, spec.elongated_aspect_max)
            else:
                b = rng.uniform(spec.radius_min, spec.radius_max) * size
                a = b * rng.uniform(1.0, 1.4)
            cy = rng.uniform(a * 0.5, h - a * 0.5)
            cx = rng.uniform(a * 0.5, w - a * 0.5)
            shape = _ellipse(h, w, cy, cx, a, b, rng.uniform(0, np.pi))
            contrast = rng.uniform(spec.fg_contrast_min, spec.fg_contrast_max)
            fphase = rng.uniform(0, 2 * np.pi)
            yy, xx = np.mgrid[0:h, 0:w]
            mottle = spec.fg_texture * np.sin(0.9 * xx + 0.7 * yy + fphase)
            lesion = np.where(shape, np.maximum(lesion, contrast + mottle), lesion)
            mask |= shape
        if mask.any():
            break
    clean = bg + lesion
    noisy = clean + rng.normal(0, spec.noise_sigma, size=(h, w))
    return _quantize(noisy)[None], mask.astype(np.float32)[None], bg, clean


def generate(spec: GenSpec, keep_clean: bool = False) -> SplitDataset:
    """Segmentation dataset; see module docstring for the image model.

    ``keep_clean`` attaches the noiseless rendering and its background to
    each item (``item.clean``, ``item.background``) for inspection.
    """
    if spec.task != "seg":
        raise DatasetError("generate() builds segmentation data; use generate_cls()")
    rng = np.random.default_rng(spec.seed)
    splits, special = _assign_splits(spec, rng)
    items = []
    for i in range(spec.count):
        img, mask, bg, clean = _lesion_image(rng, spec, special[i])
        item = Item(f"s{i:04d}", img, mask, splits[i], "elongated" if special[i] else "round")
        if keep_clean:
            item.clean, item.background = clean, bg
        items.append(item)
    ds = SplitDataset(items, spec)
    ds.validate()
    return ds


def _grating(rng, spec: GenSpec, label: int, rotated: bool) -> np.ndarray:
    h, w = spec.height, spec.width
    period = CLASS_PERIODS[label % len(CLASS_PERIODS)] * (1 + 0.6 * (label // len(CLASS_PERIODS)))
    period *= rng.uniform(0.92, 1.08)
    deg = rng.uniform(55, 125) if rotated else rng.uniform(-35, 35)
    theta = np.deg2rad(deg)
    yy, xx = np.mgrid[0:h, 0:w]
    proj = xx * np.sin(theta) + yy * np.cos(theta)
    base = 0.5 + spec.grating_amplitude * np.sin(2 * np.pi * proj / period + rng.uniform(0, 2 * np.pi))
    return _quantize(base + rng.normal(0, spec.noise_sigma, size=(h, w)))[None]


def generate_cls(spec: GenSpec) -> SplitDataset:
    """Texture-classification dataset with balanced labels."""
    if spec.task != "cls":
        raise DatasetError("generate_cls() builds classification data; use generate()")
    rng = np.random.default_rng(spec.seed)
    splits, special = _assign_splits(spec, rng)
    labels = rng.permutation(np.arange(spec.count) % spec.n_classes)
    items = []
    for i in range(spec.count):
        img = _grating(rng, spec, int(labels[i]), special[i])
        items.append(Item(f"c{i:04d}", img, int(labels[i]), splits[i], "rotated" if special[i] else "standard"))
    ds = SplitDataset(items, spec)
    ds.validate()
    return ds


def make(spec: GenSpec) -> SplitDataset:
    return generate(spec) if spec.task == "seg" else generate_cls(spec)


def radial_spectrum(image: np.ndarray) -> np.ndarray:
    """Radially averaged FFT magnitude (DC removed), orientation invariant."""
    img = np.asarray(image, dtype=np.float64).reshape(image.shape[-2:])
    mag = np.abs(np.fft.fftshift(np.fft.fft2(img - img.mean())))
    h, w = mag.shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - h // 2, xx - w // 2).astype(int)
    n_bins = min(h, w) // 2
    sums = np.bincount(r.ravel(), mag.ravel(), minlength=n_bins + 1)[:n_bins]
    counts = np.bincount(r.ravel(), minlength=n_bins + 1)[:n_bins]
    feats = sums / np.maximum(counts, 1)
    return feats / (np.linalg.norm(feats) + 1e-12)


# -- batching ---------------------------------------------------------------

def stack_images(items) -> np.ndarray:
    return np.stack([it.image for it in items]).astype(np.float32)


def stack_targets(items, task: str) -> np.ndarray:
    if task == "seg":
        return np.stack([it.target for it in items]).astype(np.float32)
    return np.array([it.target for it in items], dtype=np.int64)


def iter_batches(items, batch_size: int, rng: Optional[np.random.Generator] = None,
                 expect_split: Optional[str] = None) -> Iterator[list]:
    """Yield lists of items; shuffled when ``rng`` is given.

    ``expect_split`` guards retain/val loaders against forget leakage.
    """
    items = list(items)
    if expect_split is not None:
        for it in items:
            if it.split != expect_split:
                raise DatasetError(f"{expect_split} loader received item {it.id} from split {it.split}")
    order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


# -- persistence ------------------------------------------------------------

_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def write_pgm(path, array: np.ndarray) -> None:
    """Write a 2-d uint8 array (or [1, H, W]) as binary P5."""
    arr = np.asarray(array)
    arr = arr.reshape(arr.shape[-2:])
    if arr.dtype != np.uint8:
        raise DatasetError(f"PGM writer expects uint8, got {arr.dtype}")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = _PGM_HEADER.match(blob)
    if m is None:
        raise DatasetError(f"{path}: corrupt PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255 or w <= 0 or h <= 0:
        raise DatasetError(f"{path}: unsupported PGM maxval {maxval} or size {w}x{h}")
    payload = blob[m.end():]
    if len(payload) != w * h:
        raise DatasetError(f"{path}: expected {w * h} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def save(ds: SplitDataset, directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if ds.task == "seg":
        (root / "masks").mkdir(exist_ok=True)
    lines = []
    for it in ds.items:
        write_pgm(root / "images" / f"{it.id}.pgm", to_u8(it.image))
        if ds.task == "seg":
            write_pgm(root / "masks" / f"{it.id}.pgm", to_u8(it.target))
            label = "-"
        else:
            label = str(it.target)
        lines.append(f"{it.id}\t{it.split}\t{label}\n")
    (root / "manifest.tsv").write_text("".join(lines))
    (root / "genspec.txt").write_text(ds.spec.to_text())


def load(directory) -> SplitDataset:
    root = Path(directory)
    try:
        spec = GenSpec.from_text((root / "genspec.txt").read_text())
        manifest = (root / "manifest.tsv").read_text().splitlines()
    except FileNotFoundError as exc:
        raise DatasetError(f"{root}: missing dataset file {exc.filename}") from exc
    items, seen = [], set()
    for lineno, line in enumerate(manifest, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"manifest line {lineno}: expected 3 tab-separated fields")
        item_id, split, label = parts
        if item_id in seen:
            raise DatasetError(f"manifest: duplicate id {item_id}")
        seen.add(item_id)
        if split not in SPLITS:
            raise DatasetError(f"manifest: item {item_id} has invalid split tag {split!r}")
        img_path = root / "images" / f"{item_id}.pgm"
        if not img_path.exists():
            raise DatasetError(f"manifest: item {item_id} has no image file")
        image = (read_pgm(img_path).astype(np.float32) / 255)[None]
        if spec.task == "seg":
            mask_path = root / "masks" / f"{item_id}.pgm"
            if not mask_path.exists():
                raise DatasetError(f"manifest: item {item_id} has no mask file")
            raw = read_pgm(mask_path)
            if not np.isin(raw, (0, 255)).all():
                raise DatasetError(f"item {item_id}: mask values must be 0 or 255")
            target = (raw == 255).astype(np.float32)[None]
        else:
            target = int(label)
        items.append(Item(item_id, image, target, split))
    ds = SplitDataset(items, spec)
    ds.validate()
    return ds
