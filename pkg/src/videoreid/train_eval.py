"""Training loop, checkpointing, CMC evaluation, and attention export.

Training follows the batch-size-1 Siamese protocol: one epoch presents
2 * P_train pairs alternating positive/negative, each pair is forwarded
through both branches, the combined loss is backpropagated, and plain SGD
steps with a multiplicative learning-rate schedule. Evaluation ranks camera-A
probes against the camera-B gallery by descriptor distance and reports CMC
curves, optionally averaged over repeated test splits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import (AttentionConfig, AttentionParams, attention_scores,
                        init_attention, video_descriptor)
from .data import (DatasetIndex, PersonTrack, TrackTensorCache, load_dataset,
                   sample_pair, split_half)
from .frame_cnn import CnnParams, forward_video, init_cnn
from .losses import IdentityClassifier, combined_loss, init_classifier
from .tensor import SgdConfig, Tape, Tensor, backward, sgd_step

CHECKPOINT_MAGIC = b"REIDCKPT"
CHECKPOINT_VERSION = 1


class UnsupportedModeError(ValueError):
    """Requested an evaluation mode this method cannot support."""


@dataclass
class TrainConfig:
    dataset_root: Path
    checkpoint_path: Path
    out_dir: Path
    epochs: int = 1400
    base_lr: float = 1e-4
    lr_schedule: tuple[tuple[int, float], ...] = ((1300, 0.1),)
    margin: float = 2.0
    clip_length: int = 16
    seed: int = 0
    eval_repetitions: int = 10
    eval_shot: str = "multi"

    def __post_init__(self):
        self.dataset_root = Path(self.dataset_root)
        self.checkpoint_path = Path(self.checkpoint_path)
        self.out_dir = Path(self.out_dir)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.lr_schedule = tuple((int(e), float(m)) for e, m in self.lr_schedule)
        thresholds = [e for e, _ in self.lr_schedule]
        if thresholds != sorted(thresholds):
            raise ValueError("lr_schedule thresholds must be ascending")

    def to_dict(self) -> dict:
        return {
            "dataset_root": str(self.dataset_root),
            "checkpoint_path": str(self.checkpoint_path),
            "out_dir": str(self.out_dir),
            "epochs": self.epochs,
            "base_lr": self.base_lr,
            "lr_schedule": [list(pair) for pair in self.lr_schedule],
            "margin": self.margin,
            "clip_length": self.clip_length,
            "seed": self.seed,
            "eval_repetitions": self.eval_repetitions,
            "eval_shot": self.eval_shot,
        }


@dataclass
class Checkpoint:
    version: int
    epoch: int
    tensors: dict[str, np.ndarray]
    config: dict
    rng_state: dict


@dataclass
class CmcCurve:
    """accuracy_at_rank[k-1] is the fraction of probes whose true match ranks <= k."""
    accuracy_at_rank: np.ndarray

    @property
    def rank1(self) -> float:
        return float(self.accuracy_at_rank[0])

    def at(self, k: int) -> float:
        return float(self.accuracy_at_rank[k - 1])


@dataclass
class EvalReport:
    curves: list[CmcCurve]
    mean_curve: CmcCurve
    repetitions: int
    distance_matrices: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Checkpoint serialization


def _model_meta(cnn: CnnParams, att: AttentionParams, clf: IdentityClassifier) -> dict:
    return {
        "channel_plan": list(cnn.channel_plan),
        "input_hw": list(cnn.input_hw),
        "feature_dim": cnn.fc_weight.data.shape[0],
        "num_identities": clf.num_identities,
        "attention": {
            "w1": att.config.w1,
            "w2": att.config.w2,
            "hidden": list(att.config.hidden),
            "upsample_stride": att.config.upsample_stride,
            "upsample_kernel": att.config.upsample_kernel,
            "min_length": att.config.min_length,
            "feature_dim": att.config.feature_dim,
            "score_activation": att.config.score_activation,
        },
    }


def make_checkpoint(cnn: CnnParams, att: AttentionParams, clf: IdentityClassifier,
                    config: TrainConfig, rng: np.random.Generator,
                    epoch: int) -> Checkpoint:
    tensors = {}
    for name, t in {**cnn.named_tensors(), **att.named_tensors(),
                    **clf.named_tensors()}.items():
        tensors[name] = t.data.copy()
    cfg_dict = config.to_dict()
    cfg_dict["model"] = _model_meta(cnn, att, clf)
    state = rng.bit_generator.state
    rng_state = {"bit_generator": state["bit_generator"],
                 "state": {k: int(v) for k, v in state["state"].items()},
                 "has_uint32": int(state["has_uint32"]),
                 "uinteger": int(state["uinteger"])}
    return Checkpoint(version=CHECKPOINT_VERSION, epoch=epoch, tensors=tensors,
                      config=cfg_dict, rng_state=rng_state)


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """Self-describing binary: magic, version, JSON manifest, raw f64 payloads."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.tensors)
    header = {
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "tensors": [{"name": n, "shape": list(ckpt.tensors[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path: Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", raw[12:20])[0]
    header = json.loads(raw[20:20 + header_len])
    offset = 20 + header_len
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        arr = data.reshape(shape).astype(np.float64)
        tensors[entry["name"]] = arr
    if offset != len(raw):
        raise ValueError("checkpoint payload length mismatch")
    return Checkpoint(version=version, epoch=header["epoch"], tensors=tensors,
                      config=header["config"], rng_state=header["rng_state"])


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[CnnParams, AttentionParams, IdentityClassifier]:
    """Rebuild parameter containers; every tensor shape is verified."""
    meta = ckpt.config["model"]
    att_meta = meta["attention"]
    cnn = init_cnn(0, tuple(meta["channel_plan"]), tuple(meta["input_hw"]),
                   meta["feature_dim"])
    att = init_attention(0, AttentionConfig(
        w1=att_meta["w1"], w2=att_meta["w2"], hidden=tuple(att_meta["hidden"]),
        upsample_stride=att_meta["upsample_stride"],
        upsample_kernel=att_meta["upsample_kernel"],
        min_length=att_meta["min_length"], feature_dim=att_meta["feature_dim"],
        score_activation=att_meta["score_activation"]))
    clf = init_classifier(0, meta["num_identities"], meta["feature_dim"])
    named = {**cnn.named_tensors(), **att.named_tensors(), **clf.named_tensors()}
    if set(named) != set(ckpt.tensors):
        raise ValueError("checkpoint tensor names do not match the model")
    for name, tensor in named.items():
        stored = ckpt.tensors[name]
        if stored.shape != tensor.data.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{stored.shape} vs {tensor.data.shape}")
        tensor.data = stored.copy()
    return cnn, att, clf


# ---------------------------------------------------------------------------
# Training


def _train_on_index(cfg: TrainConfig, train_index: DatasetIndex,
                    cache: TrackTensorCache):
    """SGD over alternating pairs; returns the model, pair RNG and loss log."""
    num_train = len(train_index)
    if num_train < 2:
        raise ValueError("need at least 2 training identities")
    cnn = init_cnn(cfg.seed)
    att = init_attention(cfg.seed + 1)
    clf = init_classifier(cfg.seed + 2, num_train)
    params = cnn.parameters() + att.parameters() + clf.parameters()
    sgd = SgdConfig(cfg.base_lr, cfg.lr_schedule)
    rng = np.random.default_rng(cfg.seed + 3)
    loss_rows = []
    pairs_per_epoch = 2 * num_train
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(4)
        for position in range(pairs_per_epoch):
            pair = sample_pair(train_index, cfg.clip_length, rng, position, cache)
            with Tape() as tape:
                breakdown = combined_loss(pair, cnn, att, clf, cfg.margin)
            values = breakdown.values()
            if not all(np.isfinite(values)):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} pair {position}: "
                    f"hinge={values[0]} id1={values[1]} id2={values[2]}")
            backward(breakdown.total, tape)
            sgd_step(params, sgd, epoch)
            sums += values
        means = sums / pairs_per_epoch
        loss_rows.append((epoch, *means))
        if epoch % 100 == 0 and epoch < cfg.epochs:
            save_checkpoint(make_checkpoint(cnn, att, clf, cfg, rng, epoch),
                            cfg.checkpoint_path)
    return cnn, att, clf, rng, loss_rows


def write_loss_csv(rows, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,hinge,id1,id2,total"]
    for epoch, hinge, id1, id2, total in rows:
        lines.append(f"{epoch},{float(hinge)!r},{float(id1)!r},{float(id2)!r},{float(total)!r}")
    path.write_text("\n".join(lines) + "\n")


def train(cfg: TrainConfig) -> Checkpoint:
    """Train on the seeded half split of the dataset; checkpoints every 100
    epochs and at the end, and logs per-epoch mean losses to out_dir/loss.csv."""
    index = load_dataset(cfg.dataset_root)
    train_index, _ = split_half(index, cfg.seed)
    cache = TrackTensorCache()
    cnn, att, clf, rng, loss_rows = _train_on_index(cfg, train_index, cache)
    write_loss_csv(loss_rows, cfg.out_dir / "loss.csv")
    ckpt = make_checkpoint(cnn, att, clf, cfg, rng, cfg.epochs)
    save_checkpoint(ckpt, cfg.checkpoint_path)
    return ckpt


# ---------------------------------------------------------------------------
# Evaluation


def extract_gallery(cnn: CnnParams, att: AttentionParams, index: DatasetIndex,
                    cache: Optional[TrackTensorCache] = None,
                    n: Optional[int] = None) -> dict[str, dict[str, np.ndarray]]:
    """Deterministic multi-shot descriptors: the first min(n, length) frames of
    every track (full track by default)."""
    cache = cache or TrackTensorCache()
    out: dict[str, dict[str, np.ndarray]] = {"a": {}, "b": {}}
    for pid in index.person_ids:
        for cam in ("a", "b"):
            frames = cache.get(index.track(pid, cam))
            if n is not None:
                frames = frames[:n]
            out[cam][pid] = video_descriptor(cnn, att, frames).data.copy()
    return out


def cmc_from_distances(distances: np.ndarray) -> CmcCurve:
    """CMC from a square probe x gallery matrix whose diagonal is the true match.

    Ranks use ascending distance; ties break by gallery index.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distance matrix must be square, got {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("distance matrix contains non-finite entries")
    p = d.shape[0]
    ranks = np.empty(p, dtype=int)
    for i in range(p):
        true = d[i, i]
        ranks[i] = 1 + np.sum(d[i] < true) + np.sum((d[i] == true) & (np.arange(p) < i))
    curve = np.array([np.mean(ranks <= k) for k in range(1, p + 1)])
    return CmcCurve(curve)


def _evaluate_split(cnn: CnnParams, att: AttentionParams, test_index: DatasetIndex,
                    cache: TrackTensorCache) -> tuple[CmcCurve, np.ndarray]:
    gallery = extract_gallery(cnn, att, test_index, cache)
    pids = test_index.person_ids
    probes = np.stack([gallery["a"][pid] for pid in pids])
    refs = np.stack([gallery["b"][pid] for pid in pids])
    diffs = probes[:, None, :] - refs[None, :, :]
    distances = np.sqrt((diffs * diffs).sum(axis=2))
    return cmc_from_distances(distances), distances


def _mean_curve(curves: list[CmcCurve]) -> CmcCurve:
    return CmcCurve(np.mean([c.accuracy_at_rank for c in curves], axis=0))


def evaluate(cfg: TrainConfig, checkpoint: Optional[Checkpoint] = None,
             repetitions: int = 10) -> EvalReport:
    """CMC over repeated half splits.

    With a checkpoint, only the test split varies per repetition (the model is
    fixed); without one, a fresh model is trained on each repetition's
    training half.
    """
    index = load_dataset(cfg.dataset_root)
    cache = TrackTensorCache()
    if checkpoint is not None:
        cnn, att, clf = model_from_checkpoint(checkpoint)
    curves, dmats = [], []
    for rep in range(repetitions):
        train_index, test_index = split_half(index, cfg.seed + rep)
        if checkpoint is None:
            rep_cfg = replace(cfg, seed=cfg.seed + rep)
            cnn, att, _, _, _ = _train_on_index(rep_cfg, train_index, cache)
        curve, dmat = _evaluate_split(cnn, att, test_index, cache)
        curves.append(curve)
        dmats.append(dmat)
    return EvalReport(curves=curves, mean_curve=_mean_curve(curves),
                      repetitions=repetitions, distance_matrices=dmats)


def cross_dataset_eval(train_root: Path, test_root: Path, cfg: TrainConfig,
                       checkpoint: Optional[Checkpoint] = None,
                       repetitions: int = 1) -> EvalReport:
    """Train on a half split of one dataset, report CMC on half splits of
    another. Multi-shot only; pass a checkpoint to reuse an existing model."""
    if cfg.eval_shot == "single":
        raise UnsupportedModeError(
            "single-shot evaluation is unsupported: attention scores need the "
            "frame sequence, so only multi-shot cross-dataset testing is defined")
    if checkpoint is None:
        checkpoint = train(replace(cfg, dataset_root=Path(train_root)))
    cnn, att, _ = model_from_checkpoint(checkpoint)
    index = load_dataset(test_root)
    cache = TrackTensorCache()
    curves, dmats = [], []
    for rep in range(repetitions):
        _, test_index = split_half(index, cfg.seed + rep)
        curve, dmat = _evaluate_split(cnn, att, test_index, cache)
        curves.append(curve)
        dmats.append(dmat)
    return EvalReport(curves=curves, mean_curve=_mean_curve(curves),
                      repetitions=repetitions, distance_matrices=dmats)


def write_cmc_csv(report: EvalReport, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    reps = len(report.curves)
    lines = ["rank," + ",".join(f"rep{r + 1}" for r in range(reps)) + ",mean"]
    n_ranks = len(report.mean_curve.accuracy_at_rank)
    for k in range(n_ranks):
        cells = [str(k + 1)]
        cells += [repr(float(c.accuracy_at_rank[k])) for c in report.curves]
        cells.append(repr(float(report.mean_curve.accuracy_at_rank[k])))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Attention export


def export_attention(cnn: CnnParams, att: AttentionParams, track: PersonTrack,
                     n: Optional[int] = None,
                     cache: Optional[TrackTensorCache] = None) -> list[tuple[int, float, float]]:
    """(frame_index, raw score, sigmoid score) rows for one track."""
    cache = cache or TrackTensorCache()
    frames = cache.get(track)
    if n is not None:
        frames = frames[:n]
    features = forward_video(cnn, frames)
    vec = attention_scores(att, features)
    return [(i, float(vec.alphas.data[i]), float(vec.lambdas.data[i]))
            for i in range(len(frames))]


def write_attention_csv(rows, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["frame_index,alpha,lambda"]
    for idx, alpha, lam in rows:
        lines.append(f"{idx},{alpha!r},{lam!r}")
    path.write_text("\n".join(lines) + "\n")
