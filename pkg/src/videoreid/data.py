"""Dataset layout, split protocol, pair sampling, and the synthetic generator.

On-disk layout (mirrors the usual two-camera re-id structure):

    <root>/cam_a/<person_id>/<index>.png
    <root>/cam_b/<person_id>/<index>.png

The synthetic generator renders a deterministic multi-part colored figure per
identity translating sinusoidally over a textured background; camera B shows
the same figure mirrored, color-shifted, over a different background, with
independent noise. Random frames can be masked by a gray occlusion bar; the
ground-truth occlusion map is written to ``synth_meta.json`` next to the
frames.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .preprocessing import build_video_tensor
from .tensor import Tensor

CAMERAS = ("a", "b")
META_FILENAME = "synth_meta.json"


@dataclass(frozen=True)
class PersonTrack:
    person_id: str
    camera_id: str
    frame_paths: tuple[Path, ...]

    def __len__(self) -> int:
        return len(self.frame_paths)


@dataclass
class DatasetIndex:
    """Per-person pair of tracks, one for each camera."""
    persons: dict[str, dict[str, PersonTrack]]
    skipped: int = 0

    @property
    def person_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.persons))

    def track(self, person_id: str, camera_id: str) -> PersonTrack:
        return self.persons[person_id][camera_id]

    def __len__(self) -> int:
        return len(self.persons)


@dataclass
class PairSample:
    seq1: list[Tensor]
    seq2: list[Tensor]
    label1: int
    label2: int
    positive: bool


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 10
    frames_per_track: int = 24
    image_hw: tuple[int, int] = (64, 48)
    noise_sigma: float = 9.0       # uint8 gray levels
    occlusion_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("need at least 2 identities")
        if self.frames_per_track < 2:
            raise ValueError("need at least 2 frames per track")


# ---------------------------------------------------------------------------
# Loading


def load_frame(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def load_dataset(root: Path) -> DatasetIndex:
    """Index every person present in both cameras with at least 2 frames each."""
    root = Path(root)
    cam_dirs = {cam: root / f"cam_{cam}" for cam in CAMERAS}
    for cam_dir in cam_dirs.values():
        if not cam_dir.is_dir():
            raise ValueError(f"unreadable dataset root: missing {cam_dir}")
    all_ids = set()
    for cam_dir in cam_dirs.values():
        all_ids.update(p.name for p in cam_dir.iterdir() if p.is_dir())
    persons: dict[str, dict[str, PersonTrack]] = {}
    skipped = 0
    for pid in sorted(all_ids):
        tracks = {}
        for cam, cam_dir in cam_dirs.items():
            person_dir = cam_dir / pid
            if not person_dir.is_dir():
                continue
            frames = tuple(sorted(person_dir.glob("*.png")))
            if len(frames) >= 2:
                tracks[cam] = PersonTrack(pid, cam, frames)
        if len(tracks) == len(CAMERAS):
            persons[pid] = tracks
        else:
            skipped += 1
    if not persons:
        raise ValueError(f"zero usable persons under {root}")
    return DatasetIndex(persons=persons, skipped=skipped)


def split_half(index: DatasetIndex, seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Seeded identity-disjoint half split; ceil(P/2) persons go to training."""
    ids = list(index.person_ids)
    if len(ids) < 2:
        raise ValueError("need at least 2 persons to split")
    perm = np.random.default_rng(seed).permutation(len(ids))
    cut = (len(ids) + 1) // 2
    train_ids = [ids[i] for i in perm[:cut]]
    test_ids = [ids[i] for i in perm[cut:]]
    train = DatasetIndex({pid: index.persons[pid] for pid in train_ids})
    test = DatasetIndex({pid: index.persons[pid] for pid in test_ids})
    return train, test


class TrackTensorCache:
    """Preprocesses each track once; clips slice the cached tensors, so the
    per-video normalization statistics always come from the whole track."""

    def __init__(self):
        self._tensors: dict[tuple, list[Tensor]] = {}

    def get(self, track: PersonTrack) -> list[Tensor]:
        key = (track.camera_id, track.person_id, track.frame_paths)
        if key not in self._tensors:
            frames = [load_frame(p) for p in track.frame_paths]
            self._tensors[key] = build_video_tensor(frames)
        return self._tensors[key]


# ---------------------------------------------------------------------------
# Sampling


def sample_subsequence(track: PersonTrack, n: int, rng: np.random.Generator,
                       cache: TrackTensorCache) -> list[Tensor]:
    """Uniformly placed consecutive window of min(n, len(track)) frames."""
    if len(track) < 2:
        raise ValueError(f"track {track.person_id}/{track.camera_id} too short")
    tensors = cache.get(track)
    take = min(n, len(tensors))
    start = int(rng.integers(0, len(tensors) - take + 1))
    return tensors[start:start + take]


def sample_pair(train: DatasetIndex, n: int, rng: np.random.Generator,
                epoch_position: int, cache: TrackTensorCache) -> PairSample:
    """Strictly alternating positive/negative pairs by epoch position parity.

    Positive pairs come from one person's two cameras; negatives pair camera A
    of one person with camera B of a different person, both drawn uniformly.
    """
    ids = train.person_ids
    if len(ids) < 2:
        raise ValueError("need at least 2 training persons")
    if epoch_position % 2 == 0:
        i = int(rng.integers(len(ids)))
        pid = ids[i]
        seq1 = sample_subsequence(train.track(pid, "a"), n, rng, cache)
        seq2 = sample_subsequence(train.track(pid, "b"), n, rng, cache)
        return PairSample(seq1, seq2, i, i, True)
    i = int(rng.integers(len(ids)))
    j = int(rng.integers(len(ids) - 1))
    if j >= i:
        j += 1
    seq1 = sample_subsequence(train.track(ids[i], "a"), n, rng, cache)
    seq2 = sample_subsequence(train.track(ids[j], "b"), n, rng, cache)
    return PairSample(seq1, seq2, i, j, False)


# ---------------------------------------------------------------------------
# Synthetic generator


def _derived_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


@dataclass(frozen=True)
class _Figure:
    hue_top: float
    hue_bottom: float
    aspect: float
    stripe_period: int
    stripe_phase: int
    traj_phase: float


def _figure_for(cfg: SynthConfig, index: int, person_id: str) -> _Figure:
    rng = _derived_rng(cfg.seed, "figure", person_id)
    u = rng.random(6)
    hue_top = (index / cfg.num_identities + 0.04 * u[0]) % 1.0
    return _Figure(
        hue_top=hue_top,
        hue_bottom=(hue_top + 0.33 + 0.3 * u[1]) % 1.0,
        aspect=0.8 + 0.4 * u[2],
        stripe_period=3 + int(3 * u[3]),
        stripe_phase=int(6 * u[4]),
        traj_phase=2.0 * math.pi * u[5],
    )


def _background(cfg: SynthConfig, camera: str) -> np.ndarray:
    h, w = cfg.image_hw
    rng = _derived_rng(cfg.seed, "background", camera)
    ys, xs = np.mgrid[0:h, 0:w]
    img = np.empty((h, w, 3))
    for c in range(3):
        f1 = 1.0 + 3.0 * rng.random(2)
        f2 = 4.0 + 4.0 * rng.random(2)
        p1, p2 = 2 * math.pi * rng.random(2)
        img[..., c] = (0.45
                       + 0.10 * np.sin(2 * math.pi * (f1[0] * xs / w + f1[1] * ys / h) + p1)
                       + 0.06 * np.sin(2 * math.pi * (f2[0] * xs / w + f2[1] * ys / h) + p2))
    return img


def _draw_figure(canvas: np.ndarray, fig: _Figure, cx: float) -> None:
    h, w = canvas.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    head_color = _hsv(0.08, 0.5, 0.85)
    top_a = _hsv(fig.hue_top, 0.95, 0.95)
    top_b = _hsv(fig.hue_top, 0.85, 0.55)
    bottom_color = _hsv(fig.hue_bottom, 0.9, 0.75)

    head_cy, head_r = 0.14 * h, 0.075 * h
    head = (ys - head_cy) ** 2 + (xs - cx) ** 2 <= head_r ** 2
    canvas[head] = head_color

    torso_half = 0.17 * w * fig.aspect
    torso = (np.abs(xs - cx) <= torso_half) & (ys >= 0.22 * h) & (ys < 0.55 * h)
    stripe = ((ys + fig.stripe_phase) // fig.stripe_period) % 2 == 0
    canvas[torso & stripe] = top_a
    canvas[torso & ~stripe] = top_b

    leg_half = 0.11 * w * fig.aspect
    legs = (np.abs(xs - cx) <= leg_half) & (ys >= 0.55 * h) & (ys < 0.85 * h)
    canvas[legs] = bottom_color


# Camera B color transform: channel mixing plus a small offset. Per-channel
# affine shifts would be erased by the per-video normalization, so mix.
_CAM_B_MIX = np.array([
    [0.78, 0.22, 0.00],
    [0.00, 0.78, 0.22],
    [0.22, 0.00, 0.78],
])
_CAM_B_OFFSET = np.array([0.06, -0.04, 0.03])


def _render_track(cfg: SynthConfig, index: int, person_id: str,
                  camera: str) -> tuple[list[np.ndarray], list[int]]:
    fig = _figure_for(cfg, index, person_id)
    bg = _background(cfg, camera)
    h, w = cfg.image_hw
    rng = _derived_rng(cfg.seed, "track", person_id, camera)
    margin = 0.2 * w
    frames = []
    occluded = []
    for t in range(cfg.frames_per_track):
        phase = fig.traj_phase + (math.pi / 3 if camera == "b" else 0.0)
        cx = margin + (w - 2 * margin) * (
            0.5 + 0.5 * math.sin(2 * math.pi * t / cfg.frames_per_track + phase))
        canvas = bg.copy()
        _draw_figure(canvas, fig, cx)
        if camera == "b":
            canvas = canvas[:, ::-1]
            canvas = np.clip(canvas @ _CAM_B_MIX.T + _CAM_B_OFFSET, 0.0, 1.0)
            cx = w - 1 - cx
        canvas = canvas + rng.normal(0.0, cfg.noise_sigma / 255.0, canvas.shape)
        if rng.random() < cfg.occlusion_prob:
            bar_half = 0.26 * w
            bar_cx = cx + rng.uniform(-0.06, 0.06) * w
            lo = max(0, int(bar_cx - bar_half))
            hi = min(w, int(bar_cx + bar_half) + 1)
            canvas[:, lo:hi] = 0.5
            occluded.append(t)
        frames.append(np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8))
    return frames, occluded


def synth_generate(cfg: SynthConfig, out: Path) -> None:
    """Write a loadable two-camera dataset plus its occlusion ground truth.

    The same config always produces byte-identical files.
    """
    out = Path(out)
    occlusion_map: dict[str, list[int]] = {}
    for index in range(cfg.num_identities):
        pid = f"person_{index:03d}"
        for camera in CAMERAS:
            track_dir = out / f"cam_{camera}" / pid
            track_dir.mkdir(parents=True, exist_ok=True)
            frames, occluded = _render_track(cfg, index, pid, camera)
            for t, frame in enumerate(frames):
                Image.fromarray(frame).save(track_dir / f"{t:03d}.png")
            occlusion_map[f"cam_{camera}/{pid}"] = occluded
    meta = {
        "num_identities": cfg.num_identities,
        "frames_per_track": cfg.frames_per_track,
        "image_hw": list(cfg.image_hw),
        "noise_sigma": cfg.noise_sigma,
        "occlusion_prob": cfg.occlusion_prob,
        "seed": cfg.seed,
        "occluded": occlusion_map,
    }
    (out / META_FILENAME).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_occlusion_map(root: Path) -> dict[str, list[int]]:
    meta = json.loads((Path(root) / META_FILENAME).read_text())
    return meta["occluded"]
