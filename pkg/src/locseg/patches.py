"""Multi-scale patch extraction, balanced sampling and the sample cache."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .rng import stream

PATCH = 32
DEFAULT_SCALES = (32, 64, 128)
CACHE_MAGIC = b"LSSC"
CACHE_VERSION = 1
CASE_ID_BYTES = 32


def _pool_factor(scale: int) -> int:
    if scale % PATCH:
        raise ValidationError(f"scale {scale} is not a multiple of {PATCH}")
    return scale // PATCH


def _box_mean(image: np.ndarray, f: int) -> np.ndarray:
    """``out[y, x] = mean(image[y:y+f, x:x+f])`` over the valid range."""
    if f == 1:
        return image.astype(np.float32)
    acc = np.zeros((image.shape[0] - f + 1, image.shape[1] - f + 1), dtype=np.float64)
    for i in range(f):
        for j in range(f):
            acc += image[i:i + acc.shape[0], j:j + acc.shape[1]]
    return (acc / (f * f)).astype(np.float32)


class SlicePyramid:
    """Zero-padded box-mean images of one axial slice, one per scale.

    A patch of size ``s`` centred on ``(y, x)`` covers rows ``y - s/2`` to
    ``y + s/2 - 1``; for ``s > 32`` it is mean-pooled by ``s/32`` to 32x32.
    """

    def __init__(self, slice_channels: np.ndarray, scales: Sequence[int] = DEFAULT_SCALES):
        # slice_channels: (C, Y, X)
        self.scales = tuple(scales)
        self.margin = max(self.scales) // 2
        m = self.margin
        padded = np.pad(slice_channels.astype(np.float64), ((0, 0), (m, m), (m, m)))
        self.boxes = {s: np.stack([_box_mean(c, _pool_factor(s)) for c in padded]) for s in self.scales}

    def extract(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """Patches for voxels ``(ys, xs)`` -> ``(n, n_scales, C, 32, 32)``."""
        ys = np.asarray(ys, dtype=np.int64)
        xs = np.asarray(xs, dtype=np.int64)
        out = []
        for s in self.scales:
            f = _pool_factor(s)
            box = self.boxes[s]
            offs = f * np.arange(PATCH)
            top = ys + self.margin - s // 2
            left = xs + self.margin - s // 2
            rows = top[:, None] + offs[None, :]
            cols = left[:, None] + offs[None, :]
            # box: (C, Yp, Xp) -> (n, C, 32, 32)
            out.append(box[:, rows[:, :, None], cols[:, None, :]].transpose(1, 0, 2, 3))
        return np.stack(out, axis=1)


def raw_patch(image: np.ndarray, y: int, x: int, size: int) -> np.ndarray:
    """Unpooled zero-padded ``size x size`` window of a 2-D image."""
    out = np.zeros((size, size), dtype=image.dtype)
    top, left = y - size // 2, x - size // 2
    y0, y1 = max(top, 0), min(top + size, image.shape[0])
    x0, x1 = max(left, 0), min(left + size, image.shape[1])
    if y0 < y1 and x0 < x1:
        out[y0 - top:y1 - top, x0 - left:x1 - left] = image[y0:y1, x0:x1]
    return out


@dataclass
class SampleSet:
    """Column-oriented collection of multi-scale samples.

    ``patches`` is ``(n, n_scales, 2, 32, 32)`` (channels FLAIR, T1),
    ``location`` ``(n, 8)``, ``labels`` ``(n,)``, ``voxels`` ``(n, 3)`` as
    (x, y, z), ``case_ids`` one string per sample.
    """

    patches: np.ndarray
    location: np.ndarray
    labels: np.ndarray
    case_ids: List[str]
    voxels: np.ndarray
    scales: Tuple[int, ...] = DEFAULT_SCALES
    split: str = ""
    seed: int = 0

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.patches[idx], self.location[idx], self.labels[idx],
                         [self.case_ids[i] for i in idx], self.voxels[idx], self.scales, self.split, self.seed)

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())


def _slice_channels(case, z: int) -> np.ndarray:
    return np.stack([case.flair.values[z], case.t1.values[z]])


def extract_multiscale_patch(case, voxel, scales: Sequence[int] = DEFAULT_SCALES) -> SampleSet:
    """One sample centred on ``voxel = (x, y, z)``; the case must be normalised."""
    x, y, z = (int(v) for v in voxel)
    if case.brain_mask.values[z, y, x] != 1:
        raise ValidationError(f"{case.case_id}: voxel (x={x}, y={y}, z={z}) is outside the brain mask")
    return extract_samples(case, np.array([[x, y, z]]), scales)


def extract_samples(case, voxels: np.ndarray, scales: Sequence[int] = DEFAULT_SCALES,
                    require_location: bool = False) -> SampleSet:
    """Extract samples for many ``(x, y, z)`` voxels of one case, in the given order."""
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    n = voxels.shape[0]
    patches = np.zeros((n, len(scales), 2, PATCH, PATCH), dtype=np.float32)
    for z in np.unique(voxels[:, 2]):
        sel = np.nonzero(voxels[:, 2] == z)[0]
        pyramid = SlicePyramid(_slice_channels(case, int(z)), scales)
        patches[sel] = pyramid.extract(voxels[sel, 1], voxels[sel, 0])
    if case.location_features is not None:
        loc = np.stack([f.values[voxels[:, 2], voxels[:, 1], voxels[:, 0]] for f in case.location_features], axis=1)
    elif require_location:
        raise ValidationError(f"{case.case_id}: location features missing")
    else:
        loc = np.zeros((n, 8), dtype=np.float32)
    labels = case.annotation.values[voxels[:, 2], voxels[:, 1], voxels[:, 0]].astype(np.uint8)
    return SampleSet(patches, loc.astype(np.float32), labels, [case.case_id] * n, voxels, tuple(scales))


def concat_sets(sets: Sequence[SampleSet]) -> SampleSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        raise ValidationError("no samples to concatenate")
    return SampleSet(np.concatenate([s.patches for s in sets]), np.concatenate([s.location for s in sets]),
                     np.concatenate([s.labels for s in sets]), [c for s in sets for c in s.case_ids],
                     np.concatenate([s.voxels for s in sets]), sets[0].scales, sets[0].split, sets[0].seed)


def _voxel_table(cases, label: int) -> List[Tuple[int, int]]:
    """(case position, flat voxel index) pairs ordered by (case_id, voxel index)."""
    table = []
    for ci in sorted(range(len(cases)), key=lambda i: cases[i].case_id):
        case = cases[ci]
        brain = case.brain_mask.values.reshape(-1) == 1
        ann = case.annotation.values.reshape(-1)
        idx = np.nonzero(brain & (ann == label))[0]
        table.extend((ci, int(v)) for v in idx)
    return table


def build_balanced_dataset(cases, split: str = "train", seed: int = 0, positive_fraction: float = 0.5,
                           scales: Sequence[int] = DEFAULT_SCALES) -> SampleSet:
    """Half of all lesion voxels plus an equal number of normal brain voxels.

    Cases must already be intensity-normalised. Samples come out ordered by
    (case_id, voxel index); shuffling happens per epoch.
    """
    positives = _voxel_table(cases, 1)
    if not positives:
        raise ValidationError(f"split {split!r} contains no annotated voxels")
    negatives = _voxel_table(cases, 0)
    n_pos = max(1, int(round(positive_fraction * len(positives))))
    if n_pos > len(negatives):
        raise ValidationError(f"split {split!r}: {n_pos} positives but only {len(negatives)} normal voxels")
    rng = stream(seed, "balanced-sampling", sum(map(ord, split)))
    pos_pick = np.sort(rng.choice(len(positives), size=n_pos, replace=False))
    neg_pick = np.sort(rng.choice(len(negatives), size=n_pos, replace=False))
    chosen = sorted([positives[i] for i in pos_pick] + [negatives[i] for i in neg_pick],
                    key=lambda cv: (cases[cv[0]].case_id, cv[1]))
    per_case: Dict[int, List[int]] = {}
    for ci, flat in chosen:
        per_case.setdefault(ci, []).append(flat)
    parts = []
    for ci in sorted(per_case, key=lambda i: cases[i].case_id):
        case = cases[ci]
        zyx = np.array(np.unravel_index(per_case[ci], case.brain_mask.shape)).T
        parts.append(extract_samples(case, zyx[:, ::-1], scales))
    out = concat_sets(parts)
    out.split, out.seed = split, seed
    return out


def shuffle_minibatches(n_samples: int, batch_size: int, epoch_seed: int) -> List[np.ndarray]:
    """Seeded permutation split into batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValidationError(f"batch size must be at least 1, got {batch_size}")
    order = stream(epoch_seed, "minibatch").permutation(n_samples)
    return [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]


# ---------------------------------------------------------------------------
# binary cache


def _record_dtype(n_scales: int) -> np.dtype:
    return np.dtype([
        ("patches", "<f4", (n_scales, 2, PATCH, PATCH)),
        ("location", "<f4", (8,)),
        ("label", "u1"),
        ("case_id", f"S{CASE_ID_BYTES}"),
        ("voxel", "<u4", (3,)),
    ])


def save_samples(samples: SampleSet, path) -> None:
    """Write ``LSSC`` header + fixed-width records."""
    n_scales = len(samples.scales)
    rec = np.zeros(len(samples), dtype=_record_dtype(n_scales))
    rec["patches"] = samples.patches
    rec["location"] = samples.location
    rec["label"] = samples.labels
    rec["case_id"] = [c.encode("utf-8")[:CASE_ID_BYTES] for c in samples.case_ids]
    rec["voxel"] = samples.voxels
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQI", CACHE_VERSION, len(samples), n_scales))
        fh.write(struct.pack(f"<{n_scales}I", *samples.scales))
        fh.write(rec.tobytes())


def load_samples(path) -> SampleSet:
    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise ValidationError(f"{path}: not a sample cache (bad magic)")
        version, count, n_scales = struct.unpack("<IQI", fh.read(16))
        if version != CACHE_VERSION:
            raise ValidationError(f"{path}: unsupported cache version {version}")
        scales = struct.unpack(f"<{n_scales}I", fh.read(4 * n_scales))
        rec = np.frombuffer(fh.read(), dtype=_record_dtype(n_scales))
    if rec.shape[0] != count:
        raise ValidationError(f"{path}: header says {count} samples, file holds {rec.shape[0]}")
    return SampleSet(np.array(rec["patches"]), np.array(rec["location"]), np.array(rec["label"]),
                     [c.decode("utf-8") for c in rec["case_id"]], np.array(rec["voxel"]).astype(np.int64),
                     tuple(scales))
