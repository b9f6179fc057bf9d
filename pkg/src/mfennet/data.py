"""Datasets: netpbm ingestion, resizing, augmentation, synthetic ellipses, batching.

On-disk layout is ``root/images/<id>.ppm`` (or ``.pgm``) with matching
``root/masks/<id>.pgm``. Only 8-bit binary netpbm (P5/P6) is read; convert
PNG/JPEG beforehand, e.g. ``convert in.png out.ppm``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .engine.tensor import Tensor, get_dtype


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# netpbm


def _read_token(buf: bytes, pos: int) -> tuple:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6); returns uint8 ``(h, w)`` or ``(h, w, 3)``."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    try:
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        m_tok, pos = _read_token(buf, pos)
        w, h, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise DataError(f"{path}: malformed netpbm header") from exc
    if not (0 < maxval < 256):
        raise DataError(f"{path}: only 8-bit netpbm is supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    pos += 1  # single whitespace byte after maxval
    payload = buf[pos:pos + w * h * channels]
    if len(payload) != w * h * channels:
        raise DataError(f"{path}: truncated pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)


def write_pnm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError("write_pnm expects uint8 data")
    if arr.ndim == 2:
        magic, (h, w) = b"P5", arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, (h, w) = b"P6", arr.shape[:2]
    else:
        raise DataError(f"cannot write array of shape {arr.shape} as netpbm")
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(arr).tobytes())


# ---------------------------------------------------------------------------
# resampling (arrays are (c, h, w))


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a ``(c, h, w)`` array to ``size x size``."""
    c, h, w = img.shape
    if (h, w) == (size, size):
        return img.copy()

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h)
    c0, c1, fc = axis(w)
    top = img[:, r0][:, :, c0] * (1 - fc) + img[:, r0][:, :, c1] * fc
    bot = img[:, r1][:, :, c0] * (1 - fc) + img[:, r1][:, :, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    c, h, w = img.shape
    ri = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    ci = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return img[:, ri][:, :, ci]


def binarize(mask: np.ndarray) -> np.ndarray:
    return (mask >= 0.5).astype(mask.dtype)


# ---------------------------------------------------------------------------
# samples and datasets


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, h, w), values in [0, 1]
    mask: np.ndarray  # (1, 1, h, w), values in {0, 1}
    id: str
    meta: dict = field(default_factory=dict)

    def validate(self) -> "Sample":
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise DataError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ in size")
        if not np.all(np.isfinite(self.image)) or self.image.min() < 0 or self.image.max() > 1:
            raise DataError(f"sample {self.id}: image values must be finite and in [0, 1]")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"sample {self.id}: mask is not binary")
        return self


@dataclass
class Dataset:
    samples: list
    split: str = "all"
    source: str = ""

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("sample ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    @property
    def size(self) -> int:
        return self.samples[0].image.shape[-1] if self.samples else 0

    def ids(self) -> list:
        return [s.id for s in self.samples]

    def stacked(self) -> tuple:
        imgs = np.concatenate([s.image for s in self.samples])
        masks = np.concatenate([s.mask for s in self.samples])
        return imgs, masks


_IMAGE_EXT = (".ppm", ".pgm")


def load_image(path, size: Optional[int] = None) -> np.ndarray:
    """Image file as a ``(1, 3, h, w)`` float array in [0, 1], optionally resized."""
    raw = read_pnm(path).astype(np.float64) / 255.0
    img = np.repeat(raw[None], 3, axis=0) if raw.ndim == 2 else raw.transpose(2, 0, 1)
    if size is not None:
        img = np.clip(resize_bilinear(img, size), 0.0, 1.0)
    return img[None].astype(np.float32)


def load_mask(path, size: Optional[int] = None) -> np.ndarray:
    raw = read_pnm(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    m = (raw.astype(np.float32) / max(int(raw.max()), 1))[None]
    if size is not None:
        m = resize_nearest(m, size)
    return binarize(m)[None].astype(np.float32)


def load_dataset(root, size: int = 256, split: str = "all") -> Dataset:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        if not root.exists():
            raise DataError(f"data directory {root} does not exist")
        raise DataError(f"no samples found in {root} (expected images/ and masks/ subdirectories)")
    images = {p.stem: p for p in sorted(img_dir.iterdir()) if p.suffix.lower() in _IMAGE_EXT}
    masks = {p.stem: p for p in sorted(mask_dir.iterdir()) if p.suffix.lower() == ".pgm"}
    if not images and not masks:
        raise DataError(f"no samples found in {root}")
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise DataError(f"unmatched image/mask basenames in {root}: {', '.join(orphans)}")
    samples = []
    for stem in sorted(images):
        s = Sample(load_image(images[stem], size), load_mask(masks[stem], size), stem)
        samples.append(s.validate())
    return Dataset(samples, split, str(root))


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds:
        img = np.round(s.image[0].transpose(1, 2, 0) * 255).astype(np.uint8)
        write_pnm(root / "images" / f"{s.id}.ppm", img)
        write_pnm(root / "masks" / f"{s.id}.pgm", (s.mask[0, 0] * 255).astype(np.uint8))


def split(ds: Dataset, train_frac: float = 0.8, seed: int = 0) -> tuple:
    """Seeded shuffle then prefix split into (train, val)."""
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(round(train_frac * len(ds)))
    if len(ds) >= 2:
        n_train = min(max(n_train, 1), len(ds) - 1)
    train = [ds[int(i)] for i in order[:n_train]]
    val = [ds[int(i)] for i in order[n_train:]]
    return Dataset(train, "train", ds.source), Dataset(val, "val", ds.source)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    vertical: bool = False
    crop_frac: float = 0.875


def hflip(sample: Sample) -> Sample:
    return replace(sample, image=sample.image[..., ::-1].copy(), mask=sample.mask[..., ::-1].copy())


def vflip(sample: Sample) -> Sample:
    return replace(sample, image=sample.image[..., ::-1, :].copy(), mask=sample.mask[..., ::-1, :].copy())


def crop_resize(sample: Sample, top: int, left: int, side: int) -> Sample:
    size = sample.image.shape[-1]
    img = sample.image[0, :, top:top + side, left:left + side]
    mask = sample.mask[0, :, top:top + side, left:left + side]
    img = np.clip(resize_bilinear(img, size), 0, 1).astype(sample.image.dtype)
    mask = binarize(resize_nearest(mask, size)).astype(sample.mask.dtype)
    return replace(sample, image=img[None], mask=mask[None])


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Random horizontal flip (p=flip_p) then a random square crop resized back."""
    out = sample
    if rng.random() < cfg.flip_p:
        out = hflip(out)
    if cfg.vertical and rng.random() < cfg.flip_p:
        out = vflip(out)
    size = sample.image.shape[-1]
    side = int(round(cfg.crop_frac * size))
    if 0 < side < size:
        top = int(rng.integers(0, size - side + 1))
        left = int(rng.integers(0, size - side + 1))
        out = crop_resize(out, top, left, side)
    return out


# ---------------------------------------------------------------------------
# synthetic ellipses


def ellipse_mask(size: int, ellipses) -> np.ndarray:
    """Union of filled ellipses sampled at integer pixel coordinates."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for cy, cx, ay, ax, theta in ellipses:
        dy, dx = yy - cy, xx - cx
        c, s = np.cos(theta), np.sin(theta)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    return mask


def _synth_one(rng: np.random.Generator, size: int) -> tuple:
    while True:
        count = int(rng.integers(1, 4))
        ellipses = []
        for _ in range(count):
            cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
            ay, ax = rng.uniform(0.10 * size, 0.30 * size, size=2)
            theta = rng.uniform(0, np.pi)
            ellipses.append((float(cy), float(cx), float(ay), float(ax), float(theta)))
        mask = ellipse_mask(size, ellipses)
        frac = mask.mean()
        if 0.0 < frac < 0.6:
            break
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = rng.uniform(2, 6, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.5 + 0.5 * np.sin(2 * np.pi * freq[0] * yy + phase[0]) * np.cos(2 * np.pi * freq[1] * xx + phase[1])
    bg_color = rng.uniform(0.1, 0.35, size=3)
    fg_color = rng.uniform(0.6, 0.95, size=3)
    img = bg_color[:, None, None] + 0.15 * texture[None]
    img = np.where(mask[None], fg_color[:, None, None], img)
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img, mask, ellipses


def synth_dataset(n: int, size: int, seed: int = 0) -> Dataset:
    """``n`` images with 1-3 filled ellipses on a textured background; fully seeded."""
    if n < 1:
        raise DataError("synth_dataset needs n >= 1")
    if size < 16 or size % 16:
        raise DataError(f"synthetic image size must be a positive multiple of 16, got {size}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        img, mask, ellipses = _synth_one(rng, size)
        samples.append(
            Sample(
                img[None].astype(np.float32),
                mask[None, None].astype(np.float32),
                f"synth_{seed}_{i:04d}",
                {"ellipses": ellipses},
            )
        )
    return Dataset(samples, "all", f"synth:n={n},size={size},seed={seed}")


# ---------------------------------------------------------------------------
# batching


def iterate_batches(
    ds: Dataset,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    augment_cfg: Optional[AugmentConfig] = None,
) -> Iterator[tuple]:
    """Yield ``(images, masks)`` Tensor pairs; order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(ds))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    aug_rng = np.random.default_rng([seed, epoch, 1]) if augment_cfg is not None else None
    dtype = get_dtype()
    for start in range(0, len(order), batch_size):
        chunk = [ds[int(i)] for i in order[start:start + batch_size]]
        if aug_rng is not None:
            chunk = [augment(s, aug_rng, augment_cfg) for s in chunk]
        imgs = np.concatenate([s.image for s in chunk]).astype(dtype)
        masks = np.concatenate([s.mask for s in chunk]).astype(dtype)
        yield Tensor(imgs), Tensor(masks)
