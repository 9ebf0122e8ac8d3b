"""Synthetic fine-grained classification task with ground-truth part masks.

Each image is smooth value noise with one P x P class glyph pasted at a
uniformly random location. Only the glyph carries label information, so
where a model looks can be scored against the paste mask.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .interp import axis_weights, resize_bilinear

SPLITS = ("train", "val", "test")
MAGIC = b"LFG1"

# glyph foreground colors; classes share hues so color alone is not enough
PALETTE = np.array(
    [
        [0.95, 0.25, 0.20],
        [0.20, 0.85, 0.30],
        [0.25, 0.35, 0.95],
        [0.95, 0.90, 0.20],
    ]
)


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    image_size: int = 64
    patch_size: int = 8
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    background_noise_scale: float = 0.5
    seed: int = 7

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("data.num_classes must be >= 2")
        if self.patch_size < 1 or self.patch_size > self.image_size // 4:
            raise ConfigError(
                f"data.patch_size: need 1 <= P <= S/4 = {self.image_size // 4}, got {self.patch_size}"
            )
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < self.num_classes:
                raise ConfigError(f"data.{name} must be >= num_classes ({self.num_classes})")
        if not 0 <= self.background_noise_scale <= 1:
            raise ConfigError("data.background_noise_scale must lie in [0, 1]")

    def counts(self) -> Dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


@dataclass
class SyntheticSample:
    image: np.ndarray  # 3 x S x S float32 in [0, 1]
    label: int
    patch_mask: np.ndarray  # S x S uint8
    patch_origin: Tuple[int, int]


@dataclass
class Split:
    """Stacked arrays for one split; cheaper to batch than a list of samples."""

    images: np.ndarray  # N x 3 x S x S
    labels: np.ndarray  # N
    masks: np.ndarray  # N x S x S uint8
    origins: np.ndarray  # N x 2

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, i: int) -> SyntheticSample:
        return SyntheticSample(self.images[i], int(self.labels[i]), self.masks[i], tuple(int(v) for v in self.origins[i]))

    def samples(self) -> List[SyntheticSample]:
        return [self.sample(i) for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples: List[SyntheticSample]) -> "Split":
        return cls(
            images=np.stack([s.image for s in samples]).astype(np.float32),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            masks=np.stack([s.patch_mask for s in samples]).astype(np.uint8),
            origins=np.array([s.patch_origin for s in samples], dtype=np.int64).reshape(-1, 2),
        )


# ----------------------------------------------------------------------------
# generation


def make_glyphs(spec: DatasetSpec) -> np.ndarray:
    """K x 3 x P x P class templates.

    Binary patterns (2x2-pixel cells when P is even) are redrawn until every
    pair differs in at least P^2/4 pixels; each class then gets a palette foreground over a dark ground.
    """
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    p = spec.patch_size
    cell = 2 if p % 2 == 0 and p >= 4 else 1
    min_dist = p * p / 4
    bits: List[np.ndarray] = []
    while len(bits) < spec.num_classes:
        coarse = rng.random((p // cell, p // cell)) < 0.5
        cand = np.kron(coarse, np.ones((cell, cell), dtype=bool))
        if all(np.count_nonzero(cand != b) >= min_dist for b in bits):
            bits.append(cand)
    hues = rng.permutation(np.arange(spec.num_classes) % len(PALETTE))
    glyphs = np.empty((spec.num_classes, 3, p, p))
    for k, b in enumerate(bits):
        fg = PALETTE[hues[k]]
        glyphs[k] = np.where(b[None], fg[:, None, None], 0.05)
    return glyphs


def value_noise(rng: np.random.Generator, size: int, scale: float, cell: int = 8) -> np.ndarray:
    grid = rng.random((3, size // cell + 1, size // cell + 1))
    smooth = resize_bilinear(grid, size, size)
    return 0.5 + scale * (smooth - 0.5)


def _split_offset(spec: DatasetSpec, split: str) -> int:
    counts = spec.counts()
    return sum(counts[s] for s in SPLITS[: SPLITS.index(split)])


def make_sample(spec: DatasetSpec, index: int, glyphs: Optional[np.ndarray] = None) -> SyntheticSample:
    """Sample ``index`` (global across splits) depends only on (spec, index)."""
    if glyphs is None:
        glyphs = make_glyphs(spec)
    rng = np.random.default_rng([spec.seed, index])
    s, p = spec.image_size, spec.patch_size
    label = int(rng.integers(spec.num_classes))
    image = value_noise(rng, s, spec.background_noise_scale)
    r, c = (int(v) for v in rng.integers(0, s - p + 1, size=2))
    image[:, r:r + p, c:c + p] = glyphs[label]
    mask = np.zeros((s, s), dtype=np.uint8)
    mask[r:r + p, c:c + p] = 1
    return SyntheticSample(image.astype(np.float32), label, mask, (r, c))


def generate(spec: DatasetSpec) -> Dict[str, Split]:
    spec.validate()
    glyphs = make_glyphs(spec)
    out = {}
    for split, n in spec.counts().items():
        off = _split_offset(spec, split)
        out[split] = Split.from_samples([make_sample(spec, off + i, glyphs) for i in range(n)])
    return out


@lru_cache(maxsize=4)
def generate_cached(spec: DatasetSpec) -> Dict[str, Split]:
    return generate(spec)


# ----------------------------------------------------------------------------
# transforms


def hflip(sample: SyntheticSample) -> SyntheticSample:
    mask = sample.patch_mask[..., ::-1].copy()
    return SyntheticSample(sample.image[..., ::-1].copy(), sample.label, mask, _mask_origin(mask))


def _crop_origin(rng, size, crop, r, c, p):
    # uniform over crops that keep the whole patch; patch-centred if none exists
    lo_r, hi_r = max(0, r + p - crop), min(r, size - crop)
    lo_c, hi_c = max(0, c + p - crop), min(c, size - crop)
    if lo_r > hi_r or lo_c > hi_c:
        cr = int(np.clip(r + p // 2 - crop // 2, 0, size - crop))
        cc = int(np.clip(c + p // 2 - crop // 2, 0, size - crop))
        return cr, cc
    return int(rng.integers(lo_r, hi_r + 1)), int(rng.integers(lo_c, hi_c + 1))


def augment_batch(images, masks, origins, rng: np.random.Generator, crop_size: int, flip_prob: float, patch_size: int):
    """Random patch-preserving crop, bilinear resize back to S, random h-flip.

    Returns (images, masks) with the same shapes as the inputs.
    """
    n, _, s, _ = images.shape
    if crop_size > s:
        raise ConfigError(f"augment.crop_size {crop_size} exceeds image size {s}")
    crops = np.array([_crop_origin(rng, s, crop_size, r, c, patch_size) for r, c in origins], dtype=np.int64)
    flips = rng.random(n) < flip_prob
    if crop_size == s:
        out_img = images.copy()
        out_mask = masks.copy()
    else:
        lo, hi, frac = axis_weights(crop_size, s)
        fr = frac.astype(images.dtype)
        rows_lo = (crops[:, 0:1] + lo)[:, None, :, None]
        rows_hi = (crops[:, 0:1] + hi)[:, None, :, None]
        cols_lo = (crops[:, 1:2] + lo)[:, None, None, :]
        cols_hi = (crops[:, 1:2] + hi)[:, None, None, :]

        def resample(a):
            a_lo = np.take_along_axis(a, np.broadcast_to(rows_lo, a.shape[:2] + (s, 1)), axis=2)
            a_hi = np.take_along_axis(a, np.broadcast_to(rows_hi, a.shape[:2] + (s, 1)), axis=2)
            a = a_lo * (1 - fr[:, None]) + a_hi * fr[:, None]
            b_lo = np.take_along_axis(a, np.broadcast_to(cols_lo, a.shape[:2] + (1, s)), axis=3)
            b_hi = np.take_along_axis(a, np.broadcast_to(cols_hi, a.shape[:2] + (1, s)), axis=3)
            return b_lo * (1 - fr) + b_hi * fr

        out_img = resample(images)
        m = resample(masks[:, None].astype(images.dtype))[:, 0]
        out_mask = (m >= 0.5).astype(np.uint8)
    out_img[flips] = out_img[flips][..., ::-1]
    out_mask[flips] = out_mask[flips][..., ::-1]
    return out_img, out_mask


def augment(sample: SyntheticSample, rng: np.random.Generator, crop_size: int, flip_prob: float) -> SyntheticSample:
    p = int(round(np.sqrt(sample.patch_mask.sum())))
    imgs, masks = augment_batch(
        sample.image[None], sample.patch_mask[None], [sample.patch_origin], rng, crop_size, flip_prob, p
    )
    rows, cols = np.nonzero(masks[0])
    origin = (int(rows.min()), int(cols.min())) if rows.size else sample.patch_origin
    return SyntheticSample(imgs[0], sample.label, masks[0], origin)


def eval_transform_arrays(images: np.ndarray, masks: np.ndarray, resize_to: int, center_crop: int):
    if center_crop > resize_to:
        raise ConfigError(f"eval.center_crop {center_crop} exceeds eval.resize_to {resize_to}")
    img = resize_bilinear(images, resize_to, resize_to)
    m = resize_bilinear(masks.astype(np.float64), resize_to, resize_to)
    o = (resize_to - center_crop) // 2
    img = img[..., o:o + center_crop, o:o + center_crop]
    m = m[..., o:o + center_crop, o:o + center_crop]
    return np.ascontiguousarray(img, dtype=images.dtype), (m >= 0.5).astype(np.uint8)


def eval_transform(sample: SyntheticSample, resize_to: int, center_crop: int) -> SyntheticSample:
    img, mask = eval_transform_arrays(sample.image, sample.patch_mask, resize_to, center_crop)
    rows, cols = np.nonzero(mask)
    origin = (int(rows.min()), int(cols.min())) if rows.size else sample.patch_origin
    return SyntheticSample(img, sample.label, mask, origin)


def eval_split(split: Split, resize_to: int, center_crop: int) -> Split:
    if resize_to == center_crop == split.images.shape[-1]:
        return split
    img, masks = eval_transform_arrays(split.images, split.masks, resize_to, center_crop)
    origins = np.array([_mask_origin(m) for m in masks], dtype=np.int64).reshape(-1, 2)
    return Split(img, split.labels, masks, origins)


def _mask_origin(mask):
    rows, cols = np.nonzero(mask)
    return (int(rows.min()), int(cols.min())) if rows.size else (0, 0)


def shuffled_labels(split: Split, seed: int) -> Split:
    perm = np.random.default_rng([seed, 0x5EED]).permutation(len(split))
    return replace(split, labels=split.labels[perm])


# ----------------------------------------------------------------------------
# LFG1 binary format

_HEADER = struct.Struct("<4s7I")


def _record_dtype(s: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("row", "<u2"), ("col", "<u2"), ("image", "<f4", (3 * s * s,)), ("mask", "u1", (s * s,))])


def write_dataset(path, spec: DatasetSpec, splits: Dict[str, Split]) -> None:
    s = spec.image_size
    counts = [len(splits[k]) for k in SPLITS]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, spec.num_classes, s, spec.patch_size, *counts, spec.seed))
        for k in SPLITS:
            sp = splits[k]
            rec = np.zeros(len(sp), dtype=_record_dtype(s))
            rec["label"] = sp.labels
            rec["row"] = sp.origins[:, 0]
            rec["col"] = sp.origins[:, 1]
            rec["image"] = sp.images.reshape(len(sp), -1)
            rec["mask"] = sp.masks.reshape(len(sp), -1)
            fh.write(rec.tobytes())
    tmp.replace(path)


def read_dataset(path) -> Tuple[DatasetSpec, Dict[str, Split]]:
    raw = Path(path).read_bytes()
    magic, k, s, p, n_train, n_val, n_test, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ConfigError(f"{path}: not an LFG1 dataset (magic {magic!r})")
    spec = DatasetSpec(num_classes=k, image_size=s, patch_size=p, n_train=n_train, n_val=n_val, n_test=n_test, seed=seed)
    dt = _record_dtype(s)
    recs = np.frombuffer(raw, dtype=dt, offset=_HEADER.size, count=n_train + n_val + n_test)
    out, start = {}, 0
    for name, n in zip(SPLITS, (n_train, n_val, n_test)):
        r = recs[start:start + n]
        out[name] = Split(
            images=r["image"].reshape(n, 3, s, s).astype(np.float32),
            labels=r["label"].astype(np.int64),
            masks=r["mask"].reshape(n, s, s).copy(),
            origins=np.stack([r["row"], r["col"]], axis=1).astype(np.int64),
        )
        start += n
    return spec, out
