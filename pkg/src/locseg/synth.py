"""Deterministic synthetic cohort where lesion identity depends on location.

Each case is an ellipsoidal brain with two ellipsoidal ventricles. Hyperintense
blobs inside a band around the ventricles are lesions (annotated); blobs drawn
from the same intensity distribution in an outer band are decoys (not
annotated). Ventricles are rendered with tissue intensity, so the two blob
families can only be told apart by where they are: through the location
features, or through the brain outline visible in the larger patch scales.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .rng import stream
from .volume import CaseRecord, CohortManifest, Volume, save_case, split_cohort

MIN_INPLANE = 32


@dataclass(frozen=True)
class SynthConfig:
    cases: int = 20
    dims: Tuple[int, int, int] = (64, 64, 16)
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 5.0)
    lesions_per_case: float = 10.0
    decoy_rate: float = 8.0  # decoy blobs per lesion blob
    blob_radius: Tuple[float, float] = (1.5, 3.0)  # in-plane voxels
    flair_contrast: Tuple[float, float] = (0.25, 0.45)
    t1_contrast: Tuple[float, float] = (0.05, 0.15)
    noise_sigma: float = 0.03
    bias_amplitude: float = 0.04
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        x, y, z = self.dims
        if x < MIN_INPLANE or y < MIN_INPLANE or z < 1:
            raise ValidationError(f"dims {list(self.dims)} too small: need at least {MIN_INPLANE}x{MIN_INPLANE}x1")
        if self.cases < 1:
            raise ValidationError("need at least one case")


@dataclass
class Geometry:
    brain: np.ndarray
    ventricle_left: np.ndarray
    ventricle_right: np.ndarray
    lesion_band: np.ndarray
    decoy_band: np.ndarray


def _ellipse(shape2d, cy, cx, ry, rx) -> np.ndarray:
    yy, xx = np.mgrid[: shape2d[0], : shape2d[1]]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _inplane_edt(mask: np.ndarray, sampling) -> np.ndarray:
    out = np.full(mask.shape, np.inf)
    for z in range(mask.shape[0]):
        if mask[z].any():
            out[z] = ndimage.distance_transform_edt(~mask[z], sampling=sampling)
    return out


def _boundary_distance(brain: np.ndarray, sampling) -> np.ndarray:
    out = np.zeros(brain.shape)
    for z in range(brain.shape[0]):
        if brain[z].any():
            out[z] = ndimage.distance_transform_edt(np.pad(brain[z], 1), sampling=sampling)[1:-1, 1:-1]
    return out


def case_geometry(cfg: SynthConfig, rng: np.random.Generator) -> Geometry:
    nx, ny, nz = cfg.dims
    sx, sy, _ = cfg.voxel_size
    cx = (nx - 1) / 2 + rng.uniform(-1.5, 1.5)
    cy = (ny - 1) / 2 + rng.uniform(-1.5, 1.5)
    cz = (nz - 1) / 2
    ax, ay = 0.44 * nx * rng.uniform(0.97, 1.03), 0.42 * ny * rng.uniform(0.97, 1.03)
    shape = (nz, ny, nx)
    brain = np.zeros(shape, bool)
    vl = np.zeros(shape, bool)
    vr = np.zeros(shape, bool)
    z_semi = 0.75 * nz
    v_off = 0.075 * nx
    v_rx, v_ry = 0.03 * nx, 0.09 * ny
    for z in range(nz):
        f = np.sqrt(max(0.0, 1 - ((z - cz) / z_semi) ** 2)) if nz > 1 else 1.0
        brain[z] = _ellipse((ny, nx), cy, cx, ay * f, ax * f)
        if abs(z - cz) <= max(0.3 * nz, 0.5):
            vl[z] = _ellipse((ny, nx), cy, cx - v_off, v_ry * f, v_rx * f) & brain[z]
            vr[z] = _ellipse((ny, nx), cy, cx + v_off, v_ry * f, v_rx * f) & brain[z]
    vent = vl | vr
    d_vent = _inplane_edt(vent, (sy, sx))
    d_edge = _boundary_distance(brain, (sy, sx))
    semi_minor = min(ax, ay)
    lesion_band = brain & ~vent & (d_vent >= 1.0) & (d_vent <= max(2.0, 0.05 * nx))
    decoy_band = (brain & ~vent & (d_edge >= 0.5 * semi_minor) & (d_edge <= 0.62 * semi_minor)
                  & (d_vent >= 0.1 * nx))
    return Geometry(brain, vl, vr, lesion_band, decoy_band)


def _smooth_field(shape, rng: np.random.Generator) -> np.ndarray:
    nz, ny, nx = shape
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    fy, fx, ph = rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * (fx * xx / nx + fy * yy / ny) + ph) * np.cos(np.pi * zz / max(nz, 1) * 0.5)


def _place_blobs(band: np.ndarray, count: int, cfg: SynthConfig, rng: np.random.Generator,
                 occupied: np.ndarray, attempts: int = 20):
    """Non-overlapping blob masks clipped to ``band``, one contrast draw per blob.

    Overlaps are refused so that no voxel ever sums two contrasts; ``occupied``
    is updated in place.
    """
    blobs = []
    candidates = np.argwhere(band)
    if count == 0 or candidates.size == 0:
        return blobs
    nz, ny, nx = band.shape
    for _ in range(count):
        for _ in range(attempts):
            z, y, x = candidates[rng.integers(len(candidates))]
            r = rng.uniform(*cfg.blob_radius)
            two_slices = nz > 1 and rng.random() < 0.3
            dz = int(rng.choice([-1, 1])) if two_slices else 0
            mask = np.zeros(band.shape, bool)
            for zz in {int(z), int(np.clip(z + dz, 0, nz - 1))}:
                mask[zz] = _ellipse((ny, nx), y, x, r, r)
            mask &= band
            if mask.any() and not (mask & occupied).any():
                occupied |= mask
                blobs.append((mask, rng.uniform(*cfg.flair_contrast), rng.uniform(*cfg.t1_contrast)))
                break
    return blobs


def generate_case(cfg: SynthConfig, index: int) -> Tuple[CaseRecord, Dict]:
    rng = stream(cfg.seed, "synth-case", index)
    geo = case_geometry(cfg, rng)
    shape = geo.brain.shape
    bias = 1 + cfg.bias_amplitude * _smooth_field(shape, rng)
    flair = np.where(geo.brain, 0.35, 0.0) * bias
    t1 = np.where(geo.brain, 0.65, 0.0) * bias
    n_les = max(1, int(rng.poisson(cfg.lesions_per_case)))
    n_dec = int(round(cfg.decoy_rate * n_les))
    occupied = np.zeros(shape, bool)
    lesions = _place_blobs(geo.lesion_band, n_les, cfg, rng, occupied)
    decoys = _place_blobs(geo.decoy_band, n_dec, cfg, rng, occupied)
    annotation = np.zeros(shape, bool)
    decoy_mask = np.zeros(shape, bool)
    for (mask, cf, ct), target in [(b, annotation) for b in lesions] + [(b, decoy_mask) for b in decoys]:
        flair[mask] += cf
        t1[mask] -= ct
        target |= mask
    decoy_mask &= ~annotation
    noise = rng.normal(0, cfg.noise_sigma, size=(2,) + shape)
    flair = np.where(geo.brain, flair + noise[0], 0.0)
    t1 = np.where(geo.brain, t1 + noise[1], 0.0)
    vs = cfg.voxel_size
    case = CaseRecord(
        case_id=f"case{index:03d}",
        flair=Volume(flair.astype(np.float32), vs),
        t1=Volume(t1.astype(np.float32), vs),
        brain_mask=Volume(geo.brain.astype(np.uint8), vs),
        annotation=Volume(annotation.astype(np.uint8), vs),
        ventricle_left=Volume(geo.ventricle_left.astype(np.uint8), vs),
        ventricle_right=Volume(geo.ventricle_right.astype(np.uint8), vs),
    )
    info = {"lesion_blobs": len(lesions), "decoy_blobs": len(decoys),
            "lesion_voxels": int(annotation.sum()), "decoy_voxels": int(decoy_mask.sum())}
    return case, {"info": info, "decoy_mask": decoy_mask, "lesion_band": geo.lesion_band}


def generate_cohort(cfg: SynthConfig, output_dir, check_gates: bool = True) -> CohortManifest:
    """Write ``cfg.cases`` case directories plus ``manifest.json`` and ``cohort.json``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    cases = []
    extras = []
    for i in range(cfg.cases):
        case, extra = generate_case(cfg, i)
        save_case(case, out / case.case_id)
        np.ascontiguousarray(extra["decoy_mask"], dtype=np.uint8).tofile(out / case.case_id / "decoy.u8")
        entries.append({"path": case.case_id, "split": "train"})
        cases.append(case)
        extras.append(extra)
    manifest = split_cohort(CohortManifest(entries, root=out), cfg.split, cfg.seed)
    manifest.save(out / "manifest.json")
    meta = {"config": _config_dict(cfg), "cases": {c.case_id: e["info"] for c, e in zip(cases, extras)}}
    if check_gates:
        gates = cohort_gates(cases, [e["decoy_mask"] for e in extras])
        meta["gates"] = gates
    (out / "cohort.json").write_text(json.dumps(meta, indent=2) + "\n")
    if check_gates and meta["gates"].get("passed") is False:
        raise ValidationError(f"generated cohort failed its separability gates: {meta['gates']}")
    return manifest


def _config_dict(cfg: SynthConfig) -> Dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_decoy_mask(case: CaseRecord) -> Optional[np.ndarray]:
    if case.directory is None:
        return None
    path = Path(case.directory) / "decoy.u8"
    if not path.exists():
        return None
    return np.fromfile(path, dtype=np.uint8).reshape(case.brain_mask.shape).astype(bool)


def fisher_direction(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """Linear discriminant direction for a two-class problem."""
    m1, m0 = x[y == 1].mean(axis=0), x[y == 0].mean(axis=0)
    cov = np.cov(x[y == 1], rowvar=False) + np.cov(x[y == 0], rowvar=False)
    cov += ridge * np.eye(x.shape[1])
    return np.linalg.solve(cov, m1 - m0)


GATE_MIN_CASES = 10
LOCATION_AZ_GATE = 0.9
INTENSITY_AZ_GATE = 0.7


def cohort_gates(cases: Sequence[CaseRecord], decoy_masks: Sequence[np.ndarray]) -> Dict:
    """Lesion-vs-decoy separability: location features must separate, intensity must not."""
    from .evaluation import roc_and_az
    from .location import assemble_location_features, prior_probability_map
    from .volume import normalized_case

    if len(cases) < GATE_MIN_CASES:
        return {"passed": None, "reason": f"fewer than {GATE_MIN_CASES} cases"}
    prior = prior_probability_map(cases)
    feats, flair, labels = [], [], []
    for case, decoy in zip(cases, decoy_masks):
        loc = np.stack([v.values for v in assemble_location_features(case, prior)], axis=-1)
        norm = normalized_case(case)
        les = case.annotation.values == 1
        for mask, label in ((les, 1), (decoy, 0)):
            feats.append(loc[mask])
            flair.append(norm.flair.values[mask])
            labels.append(np.full(int(mask.sum()), label))
    x = np.concatenate(feats).astype(np.float64)
    y = np.concatenate(labels)
    f = np.concatenate(flair).astype(np.float64)
    if y.min() == y.max():
        return {"passed": False, "reason": "cohort has no lesion or no decoy voxels"}
    loc_az = roc_and_az(x @ fisher_direction(x, y), y).az
    int_az = roc_and_az(f, y).az
    int_az = max(int_az, 1 - int_az)
    return {"passed": bool(loc_az > LOCATION_AZ_GATE and int_az < INTENSITY_AZ_GATE),
            "location_linear_az": float(loc_az), "flair_intensity_az": float(int_az),
            "lesion_voxels": int((y == 1).sum()), "decoy_voxels": int((y == 0).sum())}
