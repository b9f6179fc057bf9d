import struct

import numpy as np
import pytest

from mfennet.data import Dataset, Sample, synth_dataset
from mfennet.engine import Tensor, no_grad
from mfennet.model import ModelConfig, build_mfennet
from mfennet.train_eval import (
    BadMagicError,
    CheckpointError,
    ShapeMismatchError,
    TrainConfig,
    TrainingAborted,
    TruncatedCheckpointError,
    UnknownParameterError,
    VersionMismatchError,
    dice,
    dice_per_item,
    evaluate,
    iou,
    iou_per_item,
    load_checkpoint,
    param_digest,
    save_checkpoint,
    train,
)

TINY = ModelConfig(stage_widths=(4, 4, 8, 8, 8), blocks_per_stage=(1, 0, 1, 0, 0)).for_input(16)


def logits_for(mask):
    return np.where(mask > 0.5, 20.0, -20.0)


def brute(pred, gt):
    inter = union = p = g = 0
    for a, b in zip(pred.ravel(), gt.ravel()):
        inter += a and b
        union += a or b
        p += a
        g += b
    iou_v = 1.0 if union == 0 else inter / union
    dice_v = 1.0 if p + g == 0 else 2 * inter / (p + g)
    return iou_v, dice_v


# -- metrics ------------------------------------------------------------------


def test_half_overlap_example():
    pred = np.zeros((1, 1, 4, 4)); pred[..., :, :2] = 1
    gt = np.zeros((1, 1, 4, 4)); gt[..., :2, :] = 1
    assert iou(logits_for(pred), gt) == pytest.approx(1 / 3, abs=0)
    assert dice(logits_for(pred), gt) == 0.5


def test_identity_and_both_empty():
    gt = (np.random.default_rng(0).uniform(size=(3, 1, 8, 8)) > 0.5).astype(float)
    assert iou(logits_for(gt), gt) == dice(logits_for(gt), gt) == 1.0
    empty = np.zeros((1, 1, 4, 4))
    assert iou(logits_for(empty), empty) == dice(logits_for(empty), empty) == 1.0


def test_fifty_random_pairs_match_bruteforce():
    rng = np.random.default_rng(42)
    for k in range(50):
        density = rng.uniform(0, 1)
        pred = rng.uniform(size=(1, 1, 16, 16)) < density
        gt = rng.uniform(size=(1, 1, 16, 16)) < rng.uniform(0, 1)
        if k == 0:
            pred[:] = gt[:] = False
        i_ref, d_ref = brute(pred, gt)
        i = iou_per_item(logits_for(pred), gt.astype(float))[0]
        d = dice_per_item(logits_for(pred), gt.astype(float))[0]
        assert i == i_ref and d == d_ref
        assert d == pytest.approx(2 * i / (1 + i), rel=1e-15, abs=1e-15)
        assert d >= i


def test_metrics_reject_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


class MaskOracle:
    """Stands in for a model: returns +-20 logits looked up from the image bytes."""

    def __init__(self, ds):
        self.table = {s.image.tobytes(): logits_for(s.mask) for s in ds}

    def forward(self, x):
        arr = x.numpy().astype(np.float32)
        return Tensor(np.concatenate([self.table[arr[i:i + 1].tobytes()] for i in range(len(arr))]))


def test_perfect_oracle_scores_one():
    ds = synth_dataset(5, 16, seed=1)
    assert evaluate(MaskOracle(ds), ds, batch_size=2) == (1.0, 1.0)


def test_evaluate_is_pure_and_rejects_empty():
    ds = synth_dataset(3, 16, seed=1)
    model = build_mfennet(TINY, seed=0)
    before = param_digest(model)
    a = evaluate(model, ds)
    b = evaluate(model, ds)
    assert a == b and param_digest(model) == before
    with pytest.raises(ValueError):
        evaluate(model, Dataset([]))


# -- training -----------------------------------------------------------------


def test_train_history_and_checkpoints(tmp_path, capsys):
    ds = synth_dataset(4, 16, seed=3)
    model = build_mfennet(TINY, seed=0)
    cfg = TrainConfig(epochs=3, batch_size=2, lr=1e-3, checkpoint_dir=str(tmp_path))
    hist = train(model, ds, ds, cfg, history_path=tmp_path / "h.csv")
    assert [r.epoch for r in hist] == [0, 1, 2]
    assert hist[-1].steps == 6
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,iou,dice,seconds" and len(lines) == 4
    assert "epoch,loss,iou,dice,seconds" in capsys.readouterr().out
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "final.ckpt").exists()
    assert all(0.0 <= r.iou <= r.dice <= 1.0 or r.iou == r.dice == 1.0 for r in hist)


def test_lr_zero_leaves_parameters_bitwise():
    ds = synth_dataset(4, 16, seed=3)
    model = build_mfennet(TINY, seed=0)
    before = param_digest(model)
    train(model, ds, ds, TrainConfig(epochs=1, batch_size=2, lr=0.0), echo=open("/dev/null", "w"))
    assert param_digest(model) == before


def test_training_is_bitwise_reproducible():
    ds = synth_dataset(4, 16, seed=3)

    def run():
        m = build_mfennet(TINY, seed=0)
        h = train(m, ds, ds, TrainConfig(epochs=2, batch_size=2, lr=1e-3, seed=9), echo=open("/dev/null", "w"))
        return [r.loss for r in h], param_digest(m)

    assert run() == run()


def test_on_epoch_can_stop_early():
    ds = synth_dataset(2, 16, seed=3)
    model = build_mfennet(TINY, seed=0)
    hist = train(model, ds, ds, TrainConfig(epochs=5, batch_size=2), echo=open("/dev/null", "w"), on_epoch=lambda r: r.epoch == 1)
    assert len(hist) == 2


def test_nonfinite_loss_aborts_with_context():
    ds = synth_dataset(2, 16, seed=3)
    model = build_mfennet(TINY, seed=0)
    model.store["head.bias"].data[...] = np.nan
    with pytest.raises(TrainingAborted, match="epoch 0, batch 0"):
        train(model, ds, ds, TrainConfig(epochs=1, batch_size=2), echo=open("/dev/null", "w"))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0).validate()


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = build_mfennet(TINY, seed=4)
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 16, 16)).astype(np.float32))
    with no_grad():
        y0 = model.forward(x).numpy()
    save_checkpoint(model, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.config == model.config
    with no_grad():
        assert np.array_equal(back.forward(x).numpy(), y0)
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:4] == b"MFEN" and struct.unpack("<I", raw[4:8])[0] == 1


def _corrupt(tmp_path, mutate):
    model = build_mfennet(TINY, seed=4)
    save_checkpoint(model, tmp_path / "a.ckpt")
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    (tmp_path / "bad.ckpt").write_bytes(bytes(mutate(raw)))
    return tmp_path / "bad.ckpt"


def test_checkpoint_errors_are_distinct(tmp_path):
    def magic(raw):
        raw[:4] = b"XXXX"
        return raw

    def version(raw):
        raw[4:8] = struct.pack("<I", 7)
        return raw

    with pytest.raises(BadMagicError):
        load_checkpoint(_corrupt(tmp_path, magic))
    with pytest.raises(VersionMismatchError, match="version 7"):
        load_checkpoint(_corrupt(tmp_path, version))
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(_corrupt(tmp_path, lambda r: r[:-10]))

    def rename(raw):
        i = raw.find(b"head.bias")
        raw[i:i + 4] = b"tail"
        return raw

    with pytest.raises(UnknownParameterError, match="tail.bias"):
        load_checkpoint(_corrupt(tmp_path, rename))


def test_checkpoint_shape_mismatch_names_parameter(tmp_path):
    save_checkpoint(build_mfennet(TINY, seed=0), tmp_path / "a.ckpt")
    other = build_mfennet(ModelConfig(stage_widths=(8, 4, 8, 8, 8), blocks_per_stage=(1, 0, 1, 0, 0)).for_input(16))
    with pytest.raises(ShapeMismatchError, match="enc0.embed.weight"):
        load_checkpoint(tmp_path / "a.ckpt", other)
    assert issubclass(ShapeMismatchError, CheckpointError)
