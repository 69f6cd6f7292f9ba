"""The eight per-voxel spatial-location features.

Order on disk and in every feature vector: coord_x, coord_y, coord_z,
dist_left_ventricle, dist_right_ventricle, dist_cortex, dist_midsagittal,
wmh_prior. Distances are in-plane (per axial slice) Euclidean distances in mm.
"""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import LOCATION_FEATURES, CaseRecord, Volume, load_location_features, validate_case


def _require_mask(mask: np.ndarray) -> np.ndarray:
    inside = mask == 1
    if not inside.any():
        raise ValidationError("brain mask is empty")
    return inside


def _normalize_by_masked_max(values: np.ndarray, inside: np.ndarray) -> np.ndarray:
    peak = values[inside].max() if inside.any() else 0.0
    if peak <= 0:
        return np.zeros_like(values, dtype=np.float32)
    return np.clip(values / peak, 0.0, 1.0).astype(np.float32)


def normalized_coordinates(case: CaseRecord) -> Tuple[Volume, Volume, Volume]:
    """x, y, z positions mapped so the brain bounding box spans [0, 1]."""
    inside = _require_mask(case.brain_mask.values)
    nz, ny, nx = inside.shape
    idx = np.argwhere(inside)  # z, y, x
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    out = []
    for axis, n in ((2, nx), (1, ny), (0, nz)):
        extent = hi[axis] - lo[axis]
        coord = np.arange(n, dtype=np.float64)
        coord = (coord - lo[axis]) / extent if extent > 0 else np.zeros(n)
        coord = np.clip(coord, 0.0, 1.0).astype(np.float32)
        shape = [1, 1, 1]
        shape[axis] = n
        out.append(Volume(np.broadcast_to(coord.reshape(shape), inside.shape).copy(), case.voxel_size))
    return tuple(out)


def raw_inplane_distance(target: np.ndarray, voxel_size) -> np.ndarray:
    """Per-slice exact Euclidean distance (mm) to the nearest target voxel.

    Slices without any target voxel are filled with NaN.
    """
    sx, sy = voxel_size[0], voxel_size[1]
    out = np.full(target.shape, np.nan, dtype=np.float64)
    for z in range(target.shape[0]):
        t = target[z] == 1
        if t.any():
            out[z] = ndimage.distance_transform_edt(~t, sampling=(sy, sx))
    return out


def _fill_empty_slices(dist: np.ndarray) -> np.ndarray:
    empty = np.isnan(dist)
    if empty.any():
        if (~empty).any():
            sentinel = np.nanmax(dist)
        else:
            sentinel = 1.0  # no target anywhere: every voxel equally far
        dist = np.where(empty, sentinel, dist)
    return dist


def inplane_distance_map(target_mask: Volume, brain_mask: Volume, voxel_size=None,
                         normalize: bool = True) -> Volume:
    """In-plane distance to a target mask, normalised per case to [0, 1].

    Empty-target slices take the per-case maximum distance.
    """
    if target_mask.shape != brain_mask.shape:
        raise ValidationError(f"mask shapes differ: {target_mask.shape} vs {brain_mask.shape}")
    voxel_size = voxel_size or target_mask.voxel_size
    dist = _fill_empty_slices(raw_inplane_distance(target_mask.values, voxel_size))
    if normalize:
        dist = _normalize_by_masked_max(dist, brain_mask.values == 1)
    return Volume(dist.astype(np.float32), voxel_size)


def midsagittal_plane_x(brain_mask: np.ndarray) -> float:
    inside = _require_mask(brain_mask)
    return float(np.argwhere(inside)[:, 2].mean())


def midsagittal_distance_map(brain_mask: Volume, voxel_size=None, normalize: bool = True) -> Volume:
    """Distance to the plane x = centroid-x of the brain mask."""
    voxel_size = voxel_size or brain_mask.voxel_size
    inside = _require_mask(brain_mask.values)
    x_mid = midsagittal_plane_x(brain_mask.values)
    nz, ny, nx = inside.shape
    row = np.abs(np.arange(nx, dtype=np.float64) - x_mid) * voxel_size[0]
    dist = np.broadcast_to(row, inside.shape).copy()
    if normalize:
        dist = _normalize_by_masked_max(dist, inside)
    return Volume(dist.astype(np.float32), voxel_size)


def cortex_boundary(brain_mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one out-of-mask 4-neighbour in their slice."""
    inside = brain_mask == 1
    padded = np.pad(inside, ((0, 0), (1, 1), (1, 1)), constant_values=False)
    core = padded[:, 1:-1, 1:-1]
    all_in = (padded[:, :-2, 1:-1] & padded[:, 2:, 1:-1] & padded[:, 1:-1, :-2] & padded[:, 1:-1, 2:])
    return (core & ~all_in).astype(np.uint8)


def cortex_distance_map(brain_mask: Volume, voxel_size=None, normalize: bool = True) -> Volume:
    voxel_size = voxel_size or brain_mask.voxel_size
    inside = _require_mask(brain_mask.values)
    dist = _fill_empty_slices(raw_inplane_distance(cortex_boundary(brain_mask.values), voxel_size))
    if normalize:
        dist = _normalize_by_masked_max(dist, inside)
    return Volume(dist.astype(np.float32), voxel_size)


def prior_probability_map(training_cases: Sequence[CaseRecord], sigma: float = 2.0) -> Volume:
    """Voxelwise lesion frequency over training annotations, smoothed in-plane."""
    if not training_cases:
        raise ValidationError("prior map needs at least one training case")
    shape = training_cases[0].annotation.shape
    total = np.zeros(shape, dtype=np.float64)
    for case in training_cases:
        if case.annotation.shape != shape:
            raise ValidationError(
                f"{case.case_id}: grid {case.annotation.dims} differs from {training_cases[0].annotation.dims}")
        total += case.annotation.values
    prior = total / len(training_cases)
    if sigma > 0:
        prior = ndimage.gaussian_filter(prior, sigma=(0, sigma, sigma), mode="constant")
    return Volume(np.clip(prior, 0.0, 1.0).astype(np.float32), training_cases[0].annotation.voxel_size)


def assemble_location_features(case: CaseRecord, prior: Volume) -> Tuple[Volume, ...]:
    """Compute all eight location features for one case."""
    if prior.shape != case.brain_mask.shape:
        raise ValidationError(f"{case.case_id}: prior grid {prior.dims} differs from case grid {case.dims}")
    vs = case.voxel_size
    features: List[Volume] = list(normalized_coordinates(case))
    features.append(inplane_distance_map(case.ventricle_left, case.brain_mask, vs))
    features.append(inplane_distance_map(case.ventricle_right, case.brain_mask, vs))
    features.append(cortex_distance_map(case.brain_mask, vs))
    features.append(midsagittal_distance_map(case.brain_mask, vs))
    features.append(Volume(prior.values.astype(np.float32), vs))
    assert len(features) == len(LOCATION_FEATURES)
    return tuple(features)


def ensure_location_features(case: CaseRecord, prior: Volume = None) -> CaseRecord:
    """Return ``case`` with location features, preferring precomputed ones on disk."""
    if case.location_features is None and case.directory is not None:
        loaded = load_location_features(case.directory, case.dims, case.voxel_size)
        if loaded is not None:
            case = case.with_location(loaded)
    if case.location_features is not None:
        validate_case(case)
        return case
    if prior is None:
        raise ValidationError(f"{case.case_id}: no precomputed location features and no prior map given")
    return case.with_location(assemble_location_features(case, prior))


def location_matrix(case: CaseRecord) -> np.ndarray:
    """Stack the features into a ``(Z, Y, X, 8)`` float32 array."""
    if case.location_features is None:
        raise ValidationError(f"{case.case_id}: location features missing")
    return np.stack([v.values for v in case.location_features], axis=-1).astype(np.float32)
