"""Command-line interface.

Config files are flat ``key=value`` text; blank lines and ``#`` comments are
ignored. See README.md for the recognized keys per command.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import ops
from .data import PersonTrack, SynthConfig, load_dataset, synth_generate
from .tensor import Tensor, grad_check
from .train_eval import (TrainConfig, cross_dataset_eval, evaluate,
                         export_attention, load_checkpoint, train,
                         write_attention_csv, write_cmc_csv)


def parse_kv_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    if not text:
        return ()
    pairs = []
    for chunk in text.split(","):
        epoch, mult = chunk.split(":")
        pairs.append((int(epoch), float(mult)))
    return tuple(pairs)


def synth_config_from_file(path: Path) -> SynthConfig:
    kv = parse_kv_file(path)
    return SynthConfig(
        num_identities=int(kv.get("num_identities", 10)),
        frames_per_track=int(kv.get("frames_per_track", 24)),
        image_hw=(int(kv.get("image_height", 64)), int(kv.get("image_width", 48))),
        noise_sigma=float(kv.get("noise_sigma", 9.0)),
        occlusion_prob=float(kv.get("occlusion_prob", 0.2)),
        seed=int(kv.get("seed", 0)),
    )


def train_config_from_file(path: Path) -> TrainConfig:
    kv = parse_kv_file(path)
    if "dataset_root" not in kv:
        raise ValueError(f"{path}: dataset_root is required")
    return TrainConfig(
        dataset_root=Path(kv["dataset_root"]),
        checkpoint_path=Path(kv.get("checkpoint", "checkpoint.bin")),
        out_dir=Path(kv.get("out_dir", ".")),
        epochs=int(kv.get("epochs", 1400)),
        base_lr=float(kv.get("base_lr", 1e-4)),
        lr_schedule=_parse_schedule(kv.get("lr_schedule", "1300:0.1")),
        margin=float(kv.get("margin", 2.0)),
        clip_length=int(kv.get("clip_length", 16)),
        seed=int(kv.get("seed", 0)),
        eval_repetitions=int(kv.get("eval_repetitions", 10)),
        eval_shot=kv.get("eval_shot", "multi"),
    )


def _cmd_synth(args) -> int:
    cfg = synth_config_from_file(args.config)
    synth_generate(cfg, Path(args.out))
    print(f"wrote {cfg.num_identities} identities x 2 cameras to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = train_config_from_file(args.config)
    ckpt = train(cfg)
    print(f"trained {ckpt.epoch} epochs; checkpoint at {cfg.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = train_config_from_file(args.config)
    ckpt = load_checkpoint(Path(args.checkpoint))
    report = evaluate(cfg, ckpt, repetitions=cfg.eval_repetitions)
    write_cmc_csv(report, cfg.out_dir / "cmc.csv")
    curve = report.mean_curve.accuracy_at_rank
    shown = ", ".join(f"rank-{k}: {curve[k - 1]:.3f}"
                      for k in (1, 5, 10, 20) if k <= len(curve))
    print(f"mean CMC over {report.repetitions} splits: {shown}")
    return 0


def _cmd_cross_eval(args) -> int:
    cfg_a = train_config_from_file(args.config_a)
    cfg_b = train_config_from_file(args.config_b)
    ckpt = load_checkpoint(Path(args.checkpoint)) if args.checkpoint else None
    report = cross_dataset_eval(cfg_a.dataset_root, cfg_b.dataset_root, cfg_a,
                                checkpoint=ckpt,
                                repetitions=cfg_a.eval_repetitions)
    write_cmc_csv(report, cfg_a.out_dir / "cmc_cross.csv")
    print(f"cross-dataset mean rank-1: {report.mean_curve.rank1:.3f}")
    return 0


def _cmd_attn(args) -> int:
    ckpt = load_checkpoint(Path(args.checkpoint))
    from .train_eval import model_from_checkpoint
    cnn, att, _ = model_from_checkpoint(ckpt)
    track_dir = Path(args.track)
    frames = tuple(sorted(track_dir.glob("*.png")))
    if len(frames) < 2:
        raise ValueError(f"{track_dir} holds fewer than 2 png frames")
    track = PersonTrack(track_dir.name, track_dir.parent.name, frames)
    rows = export_attention(cnn, att, track)
    write_attention_csv(rows, Path(args.out))
    print(f"wrote {len(rows)} attention rows to {args.out}")
    return 0


def _gradcheck_cases():
    rng = np.random.default_rng(7)

    def t(shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    kernel2 = t((3, 2, 3, 3))
    bias2 = t(3)
    x1 = t((2, 10))
    kernel1 = t((3, 2, 3))
    bias1 = t(3)
    tk = t((2, 3, 4))
    weight = t((4, 6))
    wbias = t(4)
    other = Tensor(rng.normal(size=8))
    return {
        "conv2d": (t((2, 8, 8)),
                   lambda p: ops.reduce_sum(ops.tanh(ops.conv2d(p, kernel2, bias2,
                                                                (1, 1), (1, 1))))),
        "conv1d": (x1, lambda p: ops.reduce_sum(ops.tanh(ops.conv1d(p, kernel1, bias1,
                                                                    1, 1)))),
        "transposed_conv1d": (t((2, 5)),
                              lambda p: ops.reduce_sum(ops.sigmoid(
                                  ops.transposed_conv1d(p, tk, 2)))),
        "maxpool": (t((3, 9)), lambda p: ops.reduce_sum(ops.maxpool(p, 2, 2))),
        "linear": (t(6), lambda p: ops.reduce_sum(ops.tanh(ops.linear(p, weight, wbias)))),
        "l2_normalize": (t(8), lambda p: ops.reduce_sum(ops.mul(ops.l2_normalize(p),
                                                                ops.l2_normalize(p)))),
        "euclidean_distance": (t(8), lambda p: ops.euclidean_distance(p, other)),
        "log_softmax": (t(7), lambda p: ops.scale(ops.select(ops.log_softmax(p), 2), -1.0)),
        "sigmoid": (t(9), lambda p: ops.reduce_sum(ops.sigmoid(p))),
        "tanh": (t(9), lambda p: ops.reduce_sum(ops.tanh(p))),
    }


def _cmd_gradcheck(args) -> int:
    cases = _gradcheck_cases()
    if args.op:
        if args.op not in cases:
            raise ValueError(f"unknown op {args.op!r}; choose from {sorted(cases)}")
        cases = {args.op: cases[args.op]}
    failed = []
    for name, (point, fn) in cases.items():
        err = grad_check(fn, point, h=1e-5)
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:20s} max relative error {err:.3e}  {status}")
        if err >= 1e-4:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="videoreid",
                                     description="Video re-identification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-camera dataset")
    p.add_argument("config")
    p.add_argument("out")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train on the configured dataset")
    p.add_argument("config")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="CMC evaluation of a checkpoint")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cross-eval", help="train on dataset A, evaluate on dataset B")
    p.add_argument("config_a")
    p.add_argument("config_b")
    p.add_argument("--checkpoint", default=None,
                   help="reuse an existing checkpoint instead of training")
    p.set_defaults(func=_cmd_cross_eval)

    p = sub.add_parser("attn", help="export per-frame attention scores as CSV")
    p.add_argument("checkpoint")
    p.add_argument("track", help="directory of png frames")
    p.add_argument("out")
    p.set_defaults(func=_cmd_attn)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", default=None)
    p.set_defaults(func=_cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: report and exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
