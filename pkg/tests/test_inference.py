from dataclasses import replace

import numpy as np
import pytest

from conftest import DESK, TINY
from locseg.architectures import Network, NetworkSpec
from locseg.errors import ValidationError
from locseg.inference import (ProbabilityMap, apply_threshold, convert_to_fully_convolutional, load_probability_map,
                              save_probability_map, segment, segment_dense, segment_sliding_window)
from locseg.location import location_matrix
from locseg.patches import SlicePyramid, extract_samples
from locseg.volume import Volume, normalized_case


def test_sliding_window_masks_outside_brain(small_cases):
    case = small_cases[0]
    pmap = segment_sliding_window(Network(NetworkSpec.default_for("ss", **TINY)), case)
    outside = case.brain_mask.values == 0
    assert not pmap.values[outside].any()
    assert pmap.values[~outside].min() > 0


def test_sliding_window_equals_single_sample_forward(small_cases):
    case = small_cases[1]
    net = Network(NetworkSpec.default_for("msws", "ffcl", **TINY), seed=3)
    pmap = segment_sliding_window(net, case)
    gen = np.random.default_rng(0)
    zyx = np.argwhere(case.brain_mask.values == 1)
    norm = normalized_case(case)
    for z, y, x in zyx[gen.choice(len(zyx), 5, replace=False)]:
        s = extract_samples(norm, np.array([[x, y, z]]))
        p = net.predict(net.network_input(s.patches, s.scales), s.location)[0, 1]
        assert pmap.values[z, y, x] == p


def test_sliding_window_batch_size_invariant(small_cases):
    case = small_cases[2]
    net = Network(NetworkSpec.default_for("ss", "sfcl", **TINY), seed=4)
    cut = replace(case, brain_mask=Volume(case.brain_mask.values * (np.arange(48) < 20)[None, :, None],
                                          case.voxel_size))
    a = segment_sliding_window(net, cut, batch_size=1)
    b = segment_sliding_window(net, cut, batch_size=256)
    assert a.values.tobytes() == b.values.tobytes()


def test_missing_location_rejected(small_cases):
    net = Network(NetworkSpec.default_for("ss", "ffcl", **TINY))
    bare = replace(small_cases[0], location_features=None)
    with pytest.raises(ValidationError, match="location"):
        segment_sliding_window(net, bare)
    with pytest.raises(ValidationError, match="location"):
        segment_dense(net, bare)


def test_dense_rejects_early_fusion():
    with pytest.raises(ValidationError, match="early fusion"):
        convert_to_fully_convolutional(Network(NetworkSpec.default_for("msef", **TINY)))
    dense = convert_to_fully_convolutional(Network(NetworkSpec.default_for("msws", **TINY)))
    with pytest.raises(ValidationError, match="one stream"):
        dense.valid_probabilities(np.zeros((2, 32, 32), np.float32))


def test_dense_single_window_equals_patch_network(rng):
    for injection in ("none", "lcl", "ffcl", "sfcl"):
        net = Network(NetworkSpec.default_for("ss", injection, **DESK), seed=1)
        x = rng.random((1, 2, 32, 32)).astype(np.float32)
        loc = rng.random((1, 8)).astype(np.float32)
        dense = convert_to_fully_convolutional(net)
        out = dense.valid_probabilities(x[0], loc.reshape(1, 1, 8))
        assert out.shape == (1, 1)
        ref = net.predict(x, loc if injection != "none" else None)[0, 1]
        assert abs(out[0, 0] - ref) <= 1e-6


def test_dense_64_region_has_1089_positions(rng):
    dense = convert_to_fully_convolutional(Network(NetworkSpec.default_for("ss", **TINY)))
    out = dense.valid_probabilities(rng.random((2, 64, 64)).astype(np.float32))
    assert out.shape == (33, 33) and out.size == 1089


def test_dense_matches_sliding_on_fixture_case(small_cases):
    case = small_cases[3]
    for injection in ("none", "ffcl"):
        net = Network(NetworkSpec.default_for("ss", injection, **TINY), seed=2)
        a = segment_dense(net, case).values
        b = segment_sliding_window(net, case).values
        assert np.max(np.abs(a - b)) <= 1e-5


@pytest.mark.parametrize("fusion,injection", [("msws", "none"), ("msiw", "sfcl"), ("msws", "ffcl")])
def test_dense_matches_sliding_for_late_fusion(small_cases, fusion, injection):
    case = small_cases[4]
    net = Network(NetworkSpec.default_for(fusion, injection, **TINY), seed=7)
    a = segment_dense(net, case).values
    b = segment_sliding_window(net, case).values
    assert np.max(np.abs(a - b)) <= 1e-5


def test_dense_late_fusion_odd_sizes(rng):
    # slice sides that are not multiples of the coarsest stride
    net = Network(NetworkSpec.default_for("msws", "ffcl", scales=(32, 96), **TINY), seed=1)
    dense = convert_to_fully_convolutional(net)
    ch = rng.random((2, 13, 10)).astype(np.float32)
    loc = rng.random((13, 10, 8)).astype(np.float32)
    out = dense.slice_probabilities(ch, loc)
    pyr = SlicePyramid(ch, net.spec.scales)
    for y, x in ((0, 0), (12, 9), (5, 7)):
        ref = net.predict(net.network_input(pyr.extract([y], [x]), net.spec.scales), loc[y, x][None])[0, 1]
        assert abs(out[y, x] - ref) <= 1e-5


def test_segment_dispatch(small_cases):
    case = small_cases[0]
    net = Network(NetworkSpec.default_for("ss", **TINY))
    assert np.array_equal(segment(net, case).values, segment_dense(net, case).values)
    with pytest.raises(ValidationError):
        segment(net, case, method="magic")
    with pytest.raises(ValidationError):
        segment(Network(NetworkSpec.default_for("msef", **TINY)), case, method="dense")
    msws = Network(NetworkSpec.default_for("msws", **TINY))
    assert np.array_equal(segment(msws, case).values, segment_sliding_window(msws, case).values)
    assert np.array_equal(segment(msws, case, method="dense").values, segment_dense(msws, case).values)


def _map(values):
    return ProbabilityMap(Volume(np.asarray(values, np.float32).reshape(1, 1, -1)), "c")


def test_threshold_rules():
    m = _map([0.0, 0.3, 0.5, 1.0])
    assert not apply_threshold(m, 1.0).values.any()
    assert apply_threshold(m, 0.0).values.ravel().tolist() == [0, 1, 1, 1]
    assert apply_threshold(m, 0.5).values.ravel().tolist() == [0, 0, 0, 1]
    with pytest.raises(ValidationError):
        apply_threshold(m, 1.5)


def test_threshold_zero_stays_inside_brain(small_cases):
    case = small_cases[0]
    pmap = segment(Network(NetworkSpec.default_for("ss", **TINY)), case)
    mask = apply_threshold(pmap, 0.0).values
    assert np.all(mask <= case.brain_mask.values)


def test_probability_map_io(tmp_path):
    m = _map([0.25, 0.5, 0.75])
    save_probability_map(m, tmp_path / "p.f32")
    back = load_probability_map(tmp_path / "p.f32", m.volume, "c")
    assert np.array_equal(back.values, m.values)
    with pytest.raises(ValidationError):
        load_probability_map(tmp_path / "p.f32", Volume(np.zeros((1, 1, 4))))


def test_location_matrix_layout(small_cases):
    case = small_cases[0]
    loc = location_matrix(case)
    assert loc.shape == case.brain_mask.shape + (8,)
    assert loc[1, 2, 3, 5] == case.location_features[5].values[1, 2, 3]
