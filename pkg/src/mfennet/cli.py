"""Command-line entry point: synth, train, eval, predict, count, gradcheck.

Config keys can be set in a ``key=value`` file (``--config``) and overridden
with ``--section.key value`` on the command line, e.g.::

    mfennet train --data synth --epochs 3 --out runs/demo --train.batch_size 8
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import zoom
from scipy.special import expit

from . import config as config_mod
from .complexity import Convention, calibration, format_calibration, report
from .data import DataError, load_dataset, load_image, save_dataset, split, synth_dataset, write_pnm
from .engine import no_grad
from .engine.tensor import Tensor, get_dtype
from .model import ConfigError, build
from .train_eval import CheckpointError, TrainingAborted, evaluate, load_checkpoint, save_checkpoint, train

# short flags accepted by `train` next to the dotted names
ALIASES = {
    "--epochs": "train.epochs",
    "--lr": "train.lr",
    "--seed": "train.seed",
    "--batch-size": "train.batch_size",
    "--data": "data.dir",
    "--size": "data.size",
    "--model": "model.kind",
    "--out": "out",
}


class UsageError(Exception):
    pass


def parse_overrides(tokens: Sequence[str]) -> list:
    """``--key value`` / ``--key=value`` tokens to (dotted key, raw value) pairs."""
    pairs = []
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok.split("=", 1)
        else:
            key = tok
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"missing value for {tok}") from None
        pairs.append((ALIASES.get(key, key[2:]), value))
    return pairs


def load_data(cfg: config_mod.RunConfig):
    d = cfg.data
    if d.dir == "synth":
        return synth_dataset(d.synth_n, d.size, d.synth_seed)
    return load_dataset(d.dir, d.size)


def train_val(ds, cfg: config_mod.RunConfig) -> tuple:
    # train_frac >= 1 trains and evaluates on the same samples (overfit runs)
    if cfg.data.train_frac >= 1.0:
        return ds, ds
    return split(ds, cfg.data.train_frac, cfg.data.split_seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, extra) -> int:
    cfg = config_mod.load(args.config, parse_overrides(extra))
    ds = load_data(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_mod.dump(cfg))
    train_ds, val_ds = train_val(ds, cfg)
    model_cfg = cfg.model.for_input(cfg.data.size) if cfg.kind == "mfennet" else cfg.model
    model = build(cfg.kind, model_cfg, seed=cfg.train.seed)
    tcfg = cfg.train
    if tcfg.checkpoint_dir is None:
        tcfg = replace(tcfg, checkpoint_dir=str(out))
    save_checkpoint(model, Path(tcfg.checkpoint_dir) / "initial.ckpt")
    history = train(
        model, train_ds, val_ds, tcfg,
        history_path=out / "history.csv",
        augment_cfg=cfg.data.augment_config(),
    )
    last = history[-1]
    print(f"done: {len(history)} epochs, {last.steps} steps, val iou={last.iou:.4f} dice={last.dice:.4f}")
    return 0


def cmd_eval(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {' '.join(extra)}")
    model = load_checkpoint(args.checkpoint)
    size = args.size or model.config.input_size
    if args.data == "synth":
        ds = synth_dataset(args.synth_n, size, args.synth_seed)
    else:
        ds = load_dataset(args.data, size)
    m_iou, m_dice = evaluate(model, ds, threshold=args.threshold)
    print(f"samples={len(ds)} iou={m_iou:.6f} dice={m_dice:.6f}")
    return 0


def cmd_predict(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {' '.join(extra)}")
    model = load_checkpoint(args.checkpoint)
    size = args.size or model.config.input_size
    original = load_image(args.image)
    _, _, h, w = original.shape
    x = load_image(args.image, size)
    with no_grad():
        logits = model.forward(Tensor(x.astype(get_dtype())))
    prob = expit(logits.numpy()[0].astype(np.float64))
    if (h, w) != (size, size):
        prob = zoom(prob, (1, h / size, w / size), order=1, grid_mode=True, mode="nearest")
    mask = (prob[0] > args.threshold).astype(np.uint8) * 255
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pnm(out, mask)
    prob_path = out.with_name(out.stem + "_prob.npy")
    np.save(prob_path, prob[0].astype(np.float32))
    print(f"wrote {out} ({w}x{h}) and {prob_path}")
    return 0


def cmd_count(args, extra) -> int:
    cfg = config_mod.load(args.config, parse_overrides(extra))
    kind = args.model or cfg.kind
    convention = Convention[args.convention]
    model_cfg = cfg.model.for_input(args.input) if kind == "mfennet" else None
    model = build(kind, model_cfg, allocate=False)
    rep = report(model, (1, cfg.model.in_channels, args.input, args.input), convention)
    print(rep.csv() if args.csv else rep.table(), end="")
    print(rep.summary())
    if args.input == 256:
        print("calibration: " + format_calibration(calibration(rep, kind), convention))
    return 0


def cmd_gradcheck(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {' '.join(extra)}")
    from .gradsuite import TOLERANCE, run_suite

    entries = run_suite(
        size=args.size,
        include_model=not args.ops_only,
        probe_count=args.probes,
        model_probe_count=args.model_probes,
        report=lambda e: print(e.line(), flush=True),
    )
    failed = [e.name for e in entries if not e.passed]
    if failed:
        print(f"gradcheck FAILED (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"gradcheck passed: {len(entries)} checks below {TOLERANCE:g}")
    return 0


def cmd_synth(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {' '.join(extra)}")
    ds = synth_dataset(args.n, args.size, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfennet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model; extra --section.key value pairs override the config")
    t.add_argument("--config", help="key=value config file")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="IoU/Dice of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory, or 'synth'")
    e.add_argument("--size", type=int, default=None)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--synth-n", type=int, default=16)
    e.add_argument("--synth-seed", type=int, default=7)
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="write a binary mask PGM and a probability map")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True, help="output .pgm; the probability map goes next to it as *_prob.npy")
    pr.add_argument("--size", type=int, default=None, help="network input size (default: from the checkpoint)")
    pr.add_argument("--threshold", type=float, default=0.5)
    pr.set_defaults(fn=cmd_predict)

    c = sub.add_parser("count", help="parameter and FLOP table")
    c.add_argument("--model", choices=("mfennet", "unet"), default=None)
    c.add_argument("--input", type=int, default=256)
    c.add_argument("--convention", choices=[m.name for m in Convention], default="MAC_AS_ONE")
    c.add_argument("--csv", action="store_true", help="print rows as CSV instead of a table")
    c.add_argument("--config", help="key=value config file")
    c.set_defaults(fn=cmd_count)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    g.add_argument("--size", type=int, default=16, help="full-model input side (op cases use <= 8)")
    g.add_argument("--probes", type=int, default=6)
    g.add_argument("--model-probes", type=int, default=3)
    g.add_argument("--ops-only", action="store_true")
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic ellipse dataset")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.fn(args, extra)
    except config_mod.ConfigKeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DataError, ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
