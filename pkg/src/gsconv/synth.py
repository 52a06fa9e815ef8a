"""Synthetic volumetric segmentation tasks.

``longrange``: every sample holds one target box in the first D/H quadrant.
Its class (1 or 2) is the sign of a marker box sitting in the diagonally
opposite quadrant. A counter box of the opposite sign sits in a third
quadrant, so the volume-wide intensity distribution is the same for both
classes and only cross-quadrant context tells them apart.

``local``: two boxes per sample, one of each class, whose class is given by
their own intensity band (bright or dark against the background); solvable
from local evidence.

Volumes are (D, H, W, 1) float64, labels (D, H, W) int64. Every sample is a
pure function of (seed, index).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import load_volume, save_volume


class TaskKind(str, Enum):
    LONG_RANGE = "longrange"
    LOCAL = "local"


NOISE = 0.35
TARGET_MEAN = 1.0
MARKER_MEAN = 2.0
# opposite-sign bands: the class survives per-volume standardisation
LOCAL_MEANS = {1: 1.5, 2: -1.5}


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.LONG_RANGE
    dims: tuple[int, int, int] = (32, 32, 16)
    num_classes: int = 3
    seed: int = 0
    count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.dims) != 3 or any(v % 16 for v in self.dims) or min(self.dims) < 16:
            raise ConfigError(f"task dims must be positive multiples of 16, got {self.dims}")
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.num_classes != 3:
            raise ConfigError("synthetic tasks have exactly 3 classes (background + 2)")


@dataclass
class Sample:
    volume: np.ndarray
    label: np.ndarray
    meta: dict


def _rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def _box(rng, lo, hi, size_lo, size_hi):
    """Random box with side lengths in [size_lo, size_hi] inside [lo, hi) per axis."""
    start, stop = [], []
    for a in range(3):
        s = int(rng.integers(size_lo[a], size_hi[a] + 1))
        s = min(s, hi[a] - lo[a])
        p = int(rng.integers(lo[a], hi[a] - s + 1))
        start.append(p)
        stop.append(p + s)
    return tuple(start), tuple(stop)


def _sl(box):
    (a, b, c), (d, e, f) = box
    return (slice(a, d), slice(b, e), slice(c, f))


def _center(box):
    return np.array([(lo + hi - 1) / 2 for lo, hi in zip(*box)])


def _quadrant(dims, qx, qy):
    D, H, W = dims
    return (qx * D // 2, qy * H // 2, 0), ((qx + 1) * D // 2, (qy + 1) * H // 2, W)


def long_range_sample(spec: TaskSpec, index: int, sign: int | None = None) -> Sample:
    """One LongRange sample; ``sign`` overrides the class-deciding marker sign."""
    D, H, W = spec.dims
    rng = _rng(spec.seed, index)
    if sign is None:
        # exact class balance: alternate, with the phase set by the seed
        sign = 1 if (index + spec.seed) % 2 == 0 else -1
    if sign not in (1, -1):
        raise ConfigError(f"marker sign must be +1 or -1, got {sign}")
    qD, qH = D // 2, H // 2
    # target in quadrant (0, 0), marker in (1, 1), counter marker in (1, 0)
    tq, mq, cq = _quadrant(spec.dims, 0, 0), _quadrant(spec.dims, 1, 1), _quadrant(spec.dims, 1, 0)
    m = (2, 2, 2)
    tsize_lo = (qD // 4 + 2, qH // 4 + 2, W // 4 + 1)
    tsize_hi = (qD // 2 + 2, qH // 2 + 2, W // 2)
    target = _box(
        rng,
        tuple(tq[0][a] + m[a] for a in range(3)),
        tuple(tq[1][a] - m[a] for a in range(3)),
        tsize_lo,
        tsize_hi,
    )
    msize = (qD * 3 // 4, qH * 3 // 4, W * 3 // 4)
    marker = _box(rng, mq[0], mq[1], msize, msize)
    counter = _box(rng, cq[0], cq[1], msize, msize)

    vol = rng.normal(0.0, NOISE, (D, H, W))
    vol[_sl(target)] = rng.normal(TARGET_MEAN, NOISE, vol[_sl(target)].shape)
    noise_m = rng.normal(MARKER_MEAN, NOISE, vol[_sl(marker)].shape)
    noise_c = rng.normal(MARKER_MEAN, NOISE, vol[_sl(counter)].shape)
    vol[_sl(marker)] = sign * noise_m
    vol[_sl(counter)] = -sign * noise_c

    cls = 1 if sign > 0 else 2
    label = np.zeros((D, H, W), dtype=np.int64)
    label[_sl(target)] = cls
    dist = float(np.linalg.norm(_center(target) - _center(marker)))
    if dist <= max(D, H, W) / 2:
        raise ConfigError(f"dims {spec.dims} too small to separate marker and target (distance {dist:.1f})")
    meta = {"class": cls, "sign": sign, "target": target, "marker": marker, "counter": counter, "distance": dist}
    return Sample(vol[..., None], label, meta)


def local_pattern_sample(spec: TaskSpec, index: int) -> Sample:
    """Two boxes in distinct quadrants, one of each foreground class."""
    D, H, W = spec.dims
    rng = _rng(spec.seed, index)
    vol = rng.normal(0.0, NOISE, (D, H, W))
    label = np.zeros((D, H, W), dtype=np.int64)
    quads = rng.permutation(4)[:2]
    classes = [1, 2] if (index + spec.seed) % 2 == 0 else [2, 1]
    qD, qH = D // 2, H // 2
    boxes = []
    for cls, q in zip(classes, quads):
        lo, hi = _quadrant(spec.dims, int(q) // 2, int(q) % 2)
        box = _box(
            rng,
            tuple(v + 2 for v in lo),
            tuple(v - 2 for v in hi),
            (qD // 4 + 2, qH // 4 + 2, W // 4 + 1),
            (qD // 2 + 2, qH // 2 + 2, W // 2),
        )
        vol[_sl(box)] = rng.normal(LOCAL_MEANS[cls], NOISE, vol[_sl(box)].shape)
        label[_sl(box)] = cls
        boxes.append(box)
    return Sample(vol[..., None], label, {"classes": classes, "boxes": boxes})


def generate(spec: TaskSpec, start: int = 0) -> list[Sample]:
    make = long_range_sample if spec.kind is TaskKind.LONG_RANGE else local_pattern_sample
    return [make(spec, i) for i in range(start, start + spec.count)]


def gen_long_range(spec: TaskSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(s.volume, s.label) for s in generate(TaskSpec(TaskKind.LONG_RANGE, spec.dims, spec.num_classes, spec.seed, spec.count))]


def gen_local_pattern(spec: TaskSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(s.volume, s.label) for s in generate(TaskSpec(TaskKind.LOCAL, spec.dims, spec.num_classes, spec.seed, spec.count))]


# voxel-local baseline --------------------------------------------------------


def local_intensity_oracle(train, evaluate_on, num_classes: int = 3, bins: int = 64):
    """Best classifier that sees one voxel's intensity and nothing else.

    Fits per-bin class counts on ``train`` (pairs of volume, label), predicts
    the majority class of each bin, and returns the hard predictions for
    ``evaluate_on``.
    """
    vals = np.concatenate([v.ravel() for v, _ in train])
    labs = np.concatenate([l.ravel() for _, l in train])
    edges = np.quantile(vals, np.linspace(0, 1, bins + 1)[1:-1])
    counts = np.zeros((bins, num_classes))
    np.add.at(counts, (np.searchsorted(edges, vals), labs), 1)
    table = counts.argmax(axis=1)
    return [table[np.searchsorted(edges, v[..., 0])] for v, _ in evaluate_on]


# on-disk layout ----------------------------------------------------------------


def write_dataset(samples: list[Sample], out_dir, spec: TaskSpec) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for i, s in enumerate(samples):
        vname, lname = f"vol_{i:04d}.gsv", f"lab_{i:04d}.gsv"
        save_volume(out / vname, s.volume[None])
        save_volume(out / lname, s.label[None, ..., None].astype(np.float64), dtype="f32")
        items.append({"volume": vname, "label": lname, "class": s.meta.get("class", s.meta.get("classes"))})
    task = asdict(spec)
    task["kind"] = spec.kind.value
    manifest = {"task": task, "samples": items}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_dataset(path) -> tuple[list[tuple[np.ndarray, np.ndarray]], dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    pairs = []
    for item in manifest["samples"]:
        vol = load_volume(path.parent / item["volume"])[0]
        lab = np.rint(load_volume(path.parent / item["label"])[0, ..., 0]).astype(np.int64)
        pairs.append((vol, lab))
    return pairs, manifest
