"""Training loop, IoU/Dice evaluation and checkpoint persistence."""
from __future__ import annotations

import hashlib
import io
import logging
import math
import struct
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .data import AugmentConfig, Dataset, iterate_batches
from .engine import AdamState, adam_step, bce_with_logits, no_grad
from .engine.tensor import Tensor, get_dtype
from .model import ModelConfig, ModelGraph, build

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics


def _binary_pairs(pred_logits, gt_mask, threshold: float) -> tuple:
    p = pred_logits.numpy() if isinstance(pred_logits, Tensor) else np.asarray(pred_logits)
    g = gt_mask.numpy() if isinstance(gt_mask, Tensor) else np.asarray(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match mask shape {g.shape}")
    pred = expit(p.astype(np.float64)) > threshold
    gt = g > 0.5
    return pred.reshape(len(pred), -1), gt.reshape(len(gt), -1)


def pair_counts(pred_logits, gt_mask, threshold: float = 0.5) -> tuple:
    """Per-item (|P and G|, |P|, |G|) integer counts."""
    pred, gt = _binary_pairs(pred_logits, gt_mask, threshold)
    inter = (pred & gt).sum(axis=1)
    return inter, pred.sum(axis=1), gt.sum(axis=1)


def iou_per_item(pred_logits, gt_mask, threshold: float = 0.5) -> np.ndarray:
    inter, p, g = pair_counts(pred_logits, gt_mask, threshold)
    union = p + g - inter
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def dice_per_item(pred_logits, gt_mask, threshold: float = 0.5) -> np.ndarray:
    inter, p, g = pair_counts(pred_logits, gt_mask, threshold)
    total = p + g
    return np.where(total == 0, 1.0, 2 * inter / np.maximum(total, 1))


def iou(pred_logits, gt_mask, threshold: float = 0.5) -> float:
    """Mean over batch items of |P and G| / |P or G|; an empty union scores 1."""
    return float(iou_per_item(pred_logits, gt_mask, threshold).mean())


def dice(pred_logits, gt_mask, threshold: float = 0.5) -> float:
    """Mean over batch items of 2|P and G| / (|P| + |G|); both empty scores 1."""
    return float(dice_per_item(pred_logits, gt_mask, threshold).mean())


# ---------------------------------------------------------------------------
# training


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    augment: bool = True
    eval_every: int = 1
    checkpoint_dir: Optional[str] = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        return self


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    iou: Optional[float]
    dice: Optional[float]
    seconds: float
    steps: int = 0

    def csv(self) -> str:
        f = lambda v: "" if v is None else repr(float(v))
        return f"{self.epoch},{self.loss!r},{f(self.iou)},{f(self.dice)},{self.seconds:.3f}"


HISTORY_HEADER = "epoch,loss,iou,dice,seconds"


def evaluate(model: ModelGraph, ds: Dataset, threshold: float = 0.5, batch_size: int = 16) -> tuple:
    """Per-image IoU and Dice averaged over the dataset."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    ious, dices = [], []
    with no_grad():
        for x, y in iterate_batches(ds, batch_size, shuffle=False):
            logits = model.forward(x)
            ious.append(iou_per_item(logits, y, threshold))
            dices.append(dice_per_item(logits, y, threshold))
    return float(np.concatenate(ious).mean()), float(np.concatenate(dices).mean())


def train(
    model: ModelGraph,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    history_path=None,
    echo=None,
    on_epoch: Optional[Callable[[MetricsRecord], bool]] = None,
    augment_cfg: AugmentConfig = AugmentConfig(),
) -> list:
    """Adam + BCE training. ``on_epoch`` may return True to end the run early.

    Writes ``best.ckpt`` (best validation IoU) and ``final.ckpt`` under
    ``cfg.checkpoint_dir`` when one is given.
    """
    cfg.validate()
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation datasets must be non-empty")
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    hist_fh = open(history_path, "w") if history_path else None
    out = echo if echo is not None else sys.stdout
    for fh in (hist_fh, out):
        if fh:
            print(HISTORY_HEADER, file=fh, flush=True)

    state = AdamState(lr=cfg.lr)
    history, best_iou, steps = [], -1.0, 0
    model.store.zero_grad()
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            losses = []
            batches = iterate_batches(
                train_ds, cfg.batch_size, cfg.seed, epoch, True, augment_cfg if cfg.augment else None
            )
            for b, (x, y) in enumerate(batches):
                loss = bce_with_logits(model.forward(x), y)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b}")
                loss.backward()
                adam_step(model.store, state)
                losses.append(value)
                steps += 1
            m_iou = m_dice = None
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                m_iou, m_dice = evaluate(model, val_ds)
                if ckpt_dir and m_iou > best_iou:
                    save_checkpoint(model, ckpt_dir / "best.ckpt")
                if m_iou > best_iou:
                    best_iou = m_iou
            rec = MetricsRecord(epoch, float(np.mean(losses)), m_iou, m_dice, time.perf_counter() - t0, steps)
            history.append(rec)
            for fh in (hist_fh, out):
                if fh:
                    print(rec.csv(), file=fh, flush=True)
            if on_epoch is not None and on_epoch(rec):
                break
    finally:
        if hist_fh:
            hist_fh.close()
    if ckpt_dir:
        save_checkpoint(model, ckpt_dir / "final.ckpt")
    return history


def param_digest(model: ModelGraph) -> str:
    h = hashlib.sha256()
    for p in model.store:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   b"MFEN" | u32 version | u32 len | config text (utf-8 key=value lines)
#   u32 param count | per param: u32 name len | name | u32 rank | u32 dims... | f32 payload


MAGIC = b"MFEN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def config_text(model: ModelGraph) -> str:
    from .config import format_value

    lines = [f"kind={model.kind}"]
    lines += [f"{k}={format_value(v)}" for k, v in model.config.to_dict().items()]
    return "\n".join(lines) + "\n"


def save_checkpoint(model: ModelGraph, path) -> None:
    buf = io.BytesIO()
    cfg = config_text(model).encode()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(model.store)))
    for p in model.store:
        name = p.name.encode()
        shape = p.data.shape
        buf.write(struct.pack("<I", len(name)) + name)
        buf.write(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> tuple:
    """Parse a checkpoint into (kind, ModelConfig, ordered list of (name, array))."""
    from .config import parse_model_section

    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not an MFEN checkpoint")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint format version {version}, expected {VERSION}")
    text = r.take(r.u32()).decode()
    kind, cfg = parse_model_section(text)
    params = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        params.append((name, arr))
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return kind, cfg, params


def load_into(model: ModelGraph, params: list, path="<checkpoint>") -> None:
    names = set(model.store.names())
    seen = set()
    for name, arr in params:
        if name not in names:
            raise UnknownParameterError(f"{path}: unknown parameter name {name!r}")
        p = model.store[name]
        if p.data.shape != arr.shape:
            raise ShapeMismatchError(
                f"{path}: parameter {name!r} has shape {arr.shape} in the checkpoint but {p.data.shape} in the model"
            )
        seen.add(name)
    missing = [n for n in model.store.names() if n not in seen]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks parameter {missing[0]!r}")
    for name, arr in params:
        model.store[name].data[...] = arr.astype(get_dtype())


def load_checkpoint(path, model: Optional[ModelGraph] = None) -> ModelGraph:
    """Rebuild the graph from the stored config (or load into ``model``) and restore parameters."""
    kind, cfg, params = read_checkpoint(path)
    if model is None:
        model = build(kind, cfg, allocate=True)
    load_into(model, params, path)
    return model
