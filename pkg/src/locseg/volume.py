"""Case and cohort I/O, intensity normalisation and split assignment.

A case directory holds ``meta.json`` plus raw little-endian volumes stored
x-fastest. In memory a volume's values are a ``(Z, Y, X)`` C-ordered array, so
``values[z]`` is one axial slice and the byte layout matches the files.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError

LOCATION_FEATURES = (
    "coord_x",
    "coord_y",
    "coord_z",
    "dist_left_ventricle",
    "dist_right_ventricle",
    "dist_cortex",
    "dist_midsagittal",
    "wmh_prior",
)
MASK_FILES = ("brain_mask", "annotation", "ventricle_left", "ventricle_right")
IMAGE_FILES = ("flair", "t1")
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class Volume:
    values: np.ndarray  # (Z, Y, X)
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)  # mm along x, y, z

    def __post_init__(self):
        if self.values.ndim != 3 or min(self.values.shape) <= 0:
            raise ValidationError(f"volume needs three positive extents, got shape {self.values.shape}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        z, y, x = self.values.shape
        return (x, y, z)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    flair: Volume
    t1: Volume
    brain_mask: Volume
    annotation: Volume
    ventricle_left: Volume
    ventricle_right: Volume
    location_features: Optional[Tuple[Volume, ...]] = None
    directory: Optional[Path] = field(default=None, compare=False)

    @property
    def dims(self):
        return self.flair.dims

    @property
    def voxel_size(self):
        return self.flair.voxel_size

    def with_location(self, features: Sequence[Volume]) -> "CaseRecord":
        return replace(self, location_features=tuple(features))


def _read_raw(path: Path, dtype, dims) -> np.ndarray:
    if not path.exists():
        raise ValidationError(f"missing file: {path}")
    data = np.fromfile(path, dtype=dtype)
    x, y, z = dims
    if data.size != x * y * z:
        raise ValidationError(f"{path.name}: expected {x * y * z} values for dims {list(dims)}, found {data.size}")
    return data.reshape(z, y, x)


def _first_index(mask: np.ndarray) -> Tuple[int, int, int]:
    z, y, x = np.argwhere(mask)[0]
    return int(x), int(y), int(z)


def validate_case(case: CaseRecord) -> None:
    dims = case.flair.dims
    for name in IMAGE_FILES + MASK_FILES:
        vol = getattr(case, name)
        if vol.dims != dims:
            raise ValidationError(f"{case.case_id}: {name} dims {list(vol.dims)} differ from flair dims {list(dims)}")
    for name in MASK_FILES:
        values = getattr(case, name).values
        bad = (values != 0) & (values != 1)
        if bad.any():
            x, y, z = _first_index(bad)
            raise ValidationError(
                f"{case.case_id}: {name} is not binary; value {values[z, y, x]} at voxel (x={x}, y={y}, z={z})")
    outside = (case.annotation.values == 1) & (case.brain_mask.values == 0)
    if outside.any():
        x, y, z = _first_index(outside)
        raise ValidationError(f"{case.case_id}: annotation outside brain mask at voxel (x={x}, y={y}, z={z})")
    if case.location_features is not None:
        if len(case.location_features) != len(LOCATION_FEATURES):
            raise ValidationError(f"{case.case_id}: expected 8 location features, got {len(case.location_features)}")
        inside = case.brain_mask.values == 1
        for i, vol in enumerate(case.location_features):
            if vol.dims != dims:
                raise ValidationError(f"{case.case_id}: location feat_{i} dims differ from case dims")
            v = vol.values[inside]
            if v.size and (not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1):
                raise ValidationError(f"{case.case_id}: location feat_{i} ({LOCATION_FEATURES[i]}) leaves [0, 1] inside the brain mask")


def load_location_features(directory: Path, dims, voxel_size) -> Optional[Tuple[Volume, ...]]:
    loc_dir = Path(directory) / "location"
    if not loc_dir.is_dir():
        return None
    return tuple(Volume(_read_raw(loc_dir / f"feat_{i}.f32", "<f4", dims), voxel_size)
                 for i in range(len(LOCATION_FEATURES)))


def load_case(directory) -> CaseRecord:
    """Load and validate one case directory."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise ValidationError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3 or min(dims) <= 0:
        raise ValidationError(f"{meta_path}: dims must be three positive integers, got {meta['dims']}")
    voxel_size = tuple(float(v) for v in meta["voxel_size_mm"])
    vols = {}
    for name in IMAGE_FILES:
        vols[name] = Volume(_read_raw(directory / f"{name}.f32", "<f4", dims).astype(np.float32), voxel_size)
    for name in MASK_FILES:
        vols[name] = Volume(_read_raw(directory / f"{name}.u8", np.uint8, dims), voxel_size)
    case = CaseRecord(case_id=str(meta["case_id"]), location_features=load_location_features(directory, dims, voxel_size),
                      directory=directory, **vols)
    validate_case(case)
    return case


def _write_raw(path: Path, values: np.ndarray, dtype) -> None:
    np.ascontiguousarray(values, dtype=dtype).tofile(path)


def save_location_features(directory, features: Sequence[Volume]) -> None:
    loc_dir = Path(directory) / "location"
    loc_dir.mkdir(parents=True, exist_ok=True)
    for i, vol in enumerate(features):
        _write_raw(loc_dir / f"feat_{i}.f32", vol.values, "<f4")


def save_case(case: CaseRecord, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"case_id": case.case_id, "dims": list(case.dims), "voxel_size_mm": list(case.voxel_size)}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for name in IMAGE_FILES:
        _write_raw(directory / f"{name}.f32", getattr(case, name).values, "<f4")
    for name in MASK_FILES:
        _write_raw(directory / f"{name}.u8", getattr(case, name).values, np.uint8)
    if case.location_features is not None:
        save_location_features(directory, case.location_features)
    return directory


def normalize_intensities(volume: Volume, mask: Volume) -> Volume:
    """Min-max map to [0, 1] using statistics from the masked voxels only.

    Voxels outside the mask go through the same map and are clamped. A
    constant masked region maps to all zeros.
    """
    inside = mask.values == 1
    if not inside.any():
        raise ValidationError("normalisation mask is empty")
    v = volume.values.astype(np.float64)
    lo = v[inside].min()
    hi = v[inside].max()
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    return Volume(out.astype(np.float32), volume.voxel_size)


def normalized_case(case: CaseRecord) -> CaseRecord:
    return replace(case, flair=normalize_intensities(case.flair, case.brain_mask),
                   t1=normalize_intensities(case.t1, case.brain_mask))


# ---------------------------------------------------------------------------
# cohort manifests


@dataclass
class CohortManifest:
    entries: List[Dict[str, str]]  # {"path": ..., "split": ...}
    root: Path = Path(".")

    def __post_init__(self):
        for e in self.entries:
            if e.get("split") not in SPLITS + (None, ""):
                raise ValidationError(f"unknown split {e.get('split')!r} for {e.get('path')}")

    def paths(self, split: Optional[str] = None) -> List[Path]:
        return [self.resolve(e["path"]) for e in self.entries if split is None or e.get("split") == split]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def load(self, split: Optional[str] = None) -> List[CaseRecord]:
        cases = [load_case(p) for p in self.paths(split)]
        ids = [c.case_id for c in cases]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate case_id in cohort manifest")
        return cases

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.entries, indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "CohortManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise ValidationError(f"missing file: {path}")
        entries = json.loads(path.read_text())
        if not isinstance(entries, list):
            raise ValidationError(f"{path}: cohort manifest must be a JSON array")
        return cls(entries=[dict(e) for e in entries], root=path.parent)


def split_counts(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of ``n`` items over ``fractions``."""
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_cohort(manifest: CohortManifest, fractions: Sequence[float] = (0.8, 0.1, 0.1),
                 seed: int = 0) -> CohortManifest:
    """Assign train/validation/test splits by a seeded permutation."""
    from .rng import stream

    if not manifest.entries:
        raise ValidationError("cannot split an empty cohort")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValidationError(f"split fractions must be three non-negative numbers summing to 1, got {list(fractions)}")
    counts = split_counts(len(manifest.entries), fractions)
    order = stream(seed, "split").permutation(len(manifest.entries))
    labels = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
    entries = [dict(e) for e in manifest.entries]
    for rank, idx in enumerate(order):
        entries[idx]["split"] = labels[rank]
    return CohortManifest(entries=entries, root=manifest.root)


def case_directories(root) -> List[Path]:
    return sorted(Path(p) for p in (Path(root).iterdir()) if (Path(p) / "meta.json").exists())


def relpath(path, start) -> str:
    return os.path.relpath(path, start)
