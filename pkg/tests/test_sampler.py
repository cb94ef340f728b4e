import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sampler_oracle import brute_edges, brute_min_distance
from noduledet.ctdata import NoduleAnnotation, PhantomSpec, generate_phantom, normalize_hu
from noduledet.sampler import (
    ClassWeights,
    PatchSpec,
    SamplingRegions,
    class_weights,
    draw_centers,
    edge_distance_field,
    extract_edge_set,
    partition_regions,
    read_centers,
    sample_budget,
    sample_scan,
    write_centers,
)


masks_2d = arrays(bool, st.tuples(st.integers(1, 24), st.integers(1, 24))).filter(lambda m: m.any())


# -- edges -------------------------------------------------------------------


def test_single_voxel_is_its_own_edge():
    m = np.zeros((5, 5), bool)
    m[2, 3] = True
    assert extract_edge_set(m).tolist() == [[2, 3]]


def test_square_edges():
    m = np.zeros((9, 9), bool)
    m[3:6, 3:6] = True
    edges = {tuple(e) for e in extract_edge_set(m)}
    assert len(edges) == 8 and (4, 4) not in edges
    m[:] = False
    m[2:7, 2:7] = True
    assert len(extract_edge_set(m)) == 16


def test_edges_touch_grid_border():
    m = np.ones((3, 4), bool)
    assert len(extract_edge_set(m)) == 10  # everything but the two interior voxels


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        extract_edge_set(np.zeros((4, 4), bool))


@settings(max_examples=150, deadline=None)
@given(masks_2d)
def test_edges_match_neighbourhood_enumeration(mask):
    edges = [tuple(e) for e in extract_edge_set(mask)]
    assert edges == brute_edges(mask)


@settings(max_examples=100, deadline=None)
@given(masks_2d)
def test_edge_distance_matches_brute_force(mask):
    edges = extract_edge_set(mask)
    got = edge_distance_field(mask.shape, edges)
    assert np.allclose(got, brute_min_distance(mask.shape, edges), atol=1e-9, rtol=0)


# -- regions -----------------------------------------------------------------


def test_partition_interval_arithmetic():
    m = np.zeros((128, 128), bool)
    m[20:31, 20:31] = True
    reg = partition_regions(m, PatchSpec(64))
    box = reg.high_bg | reg.nodule
    rows, cols = np.nonzero(box)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (0, 62, 0, 62)
    assert not (reg.high_bg & m).any()


def test_partition_clips_at_corner():
    m = np.zeros((64, 64), bool)
    m[60:64, 61:64] = True
    reg = partition_regions(m, PatchSpec(32))
    assert reg.high_bg[63, 47] and reg.high_bg[44, 63]
    assert not reg.high_bg[43, 63] and not (reg.high_bg & reg.nodule).any()


@settings(max_examples=100, deadline=None)
@given(masks_2d, st.sampled_from([16, 32, 64]))
def test_partition_is_disjoint_and_exhaustive(mask, size):
    reg = partition_regions(mask, PatchSpec(size))
    total = reg.nodule.astype(int) + reg.high_bg + reg.low_bg
    assert np.all(total == 1)


def test_centre_defaults_to_slice_centroid():
    m = np.zeros((16, 16), bool)
    m[4:7, 8:11] = True
    assert partition_regions(m, PatchSpec(16)).center == (5, 9)


def test_patch_spec_validation():
    with pytest.raises(ValueError):
        PatchSpec(15)
    with pytest.raises(ValueError):
        PatchSpec(14)


# -- weights -----------------------------------------------------------------


def regions_from(nodule, high_bg=None, low_bg=None, center=(0, 0)):
    shape = nodule.shape
    empty = np.zeros(shape, bool)
    return SamplingRegions(nodule, high_bg if high_bg is not None else empty,
                           low_bg if low_bg is not None else empty, center)


def test_singleton_nodule_weight():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    w = class_weights(regions_from(m), "nodule", extract_edge_set(m), 1.0, np.zeros((5, 5)))
    assert w.weights.tolist() == [1.0]


def test_nodule_weights_hand_value():
    # voxel (0,0) is itself an edge voxel, (0,1) sits one pixel from the only edge voxel
    nodule = np.zeros((1, 2), bool)
    nodule[0, :] = True
    edges = np.array([[0, 0]])
    w = class_weights(regions_from(nodule), "nodule", edges, 1.0, np.zeros((1, 2)))
    expected = np.array([1.0, math.exp(-1)]) / (1 + math.exp(-1))
    assert np.allclose(w.weights, expected, atol=1e-12)
    assert np.allclose(w.weights, [0.731, 0.269], atol=5e-4)


def test_low_bg_ratio_of_distances():
    low = np.zeros((1, 21), bool)
    low[0, 10] = low[0, 20] = True
    reg = regions_from(np.zeros((1, 21), bool), low_bg=low, center=(0, 0))
    w = class_weights(reg, "low_bg", np.array([[0, 0]]), 1.0, np.full((1, 21), 0.5))
    assert np.allclose(w.weights, [1 / 3, 2 / 3], atol=1e-12)


def test_high_bg_ratio_of_intensities():
    high = np.zeros((3, 3), bool)
    high[0, 1] = high[2, 1] = True
    intens = np.zeros((3, 3))
    intens[0, 1], intens[2, 1] = 0.2, 0.4
    reg = regions_from(np.zeros((3, 3), bool), high_bg=high)
    w = class_weights(reg, "high_bg", np.array([[1, 1]]), 2.0, intens)
    assert np.allclose(w.weights, [1 / 3, 2 / 3], atol=2e-3)


def test_uniform_strategy():
    m = np.zeros((6, 6), bool)
    m[1:5, 1:5] = True
    reg = partition_regions(m, PatchSpec(16))
    w = class_weights(reg, "nodule", extract_edge_set(m), 2.0, np.zeros((6, 6)), strategy="uniform")
    assert np.allclose(w.weights, 1 / 16)


def test_empty_region_and_bad_radius():
    m = np.ones((4, 4), bool)
    reg = partition_regions(m, PatchSpec(16))
    with pytest.raises(ValueError):
        class_weights(reg, "low_bg", extract_edge_set(m), 1.0, np.zeros((4, 4)))
    with pytest.raises(ValueError):
        class_weights(reg, "nodule", extract_edge_set(m), 0.0, np.zeros((4, 4)))


@settings(max_examples=150, deadline=None)
@given(masks_2d, st.floats(0.5, 10.0), st.integers(0, 2**31 - 1))
def test_weights_normalized_and_monotone(mask, radius, seed):
    rng = np.random.default_rng(seed)
    intens = rng.uniform(0, 1, mask.shape)
    edges = extract_edge_set(mask)
    dist = edge_distance_field(mask.shape, edges)
    reg = partition_regions(mask, PatchSpec(16))
    for cls in ("nodule", "high_bg", "low_bg"):
        try:
            w = class_weights(reg, cls, edges, radius, intens)
        except ValueError:
            assert not reg.region(cls).any()
            continue
        assert np.all(w.weights >= 0)
        assert abs(w.weights.sum() - 1.0) <= 1e-9
        if cls == "nodule":
            d = dist[w.coords[:, 0], w.coords[:, 1]]
            closer = d[:, None] < d[None, :]
            assert np.all((w.weights[:, None] > w.weights[None, :])[closer])


def test_high_bg_increasing_in_intensity_and_low_bg_in_distance():
    high = np.zeros((5, 5), bool)
    high[0, :] = True  # all at edge distance 2 from the edge at row 2
    intens = np.tile(np.linspace(0.0, 1.0, 5), (5, 1))
    reg = regions_from(np.zeros((5, 5), bool), high_bg=high, low_bg=high, center=(4, -1))
    edges = np.array([[2, c] for c in range(5)])
    w = class_weights(reg, "high_bg", edges, 1.0, intens)
    assert np.all(np.diff(w.weights) > 0)
    w = class_weights(reg, "low_bg", edges, 1.0, np.full((5, 5), 0.3))
    assert np.all(np.diff(w.weights) > 0)


# -- budget and draws --------------------------------------------------------


def test_budget():
    b = sample_budget(100)
    assert (b.n_nodule, b.n_high_bg, b.n_low_bg) == (100, 100, 50)
    assert sample_budget(1).n_low_bg == 1
    assert sample_budget(7).total == 7 + 7 + 4
    with pytest.raises(ValueError):
        sample_budget(0)


def test_exhaustive_draw_is_permutation():
    coords = np.arange(20).reshape(10, 2)
    w = ClassWeights("nodule", coords, np.full(10, 0.1))
    got = draw_centers(w, 10, 3)
    assert sorted(map(tuple, got)) == sorted(map(tuple, coords))


def test_draw_is_deterministic():
    coords = np.arange(40).reshape(20, 2)
    w = ClassWeights("nodule", coords, np.linspace(1, 2, 20) / np.linspace(1, 2, 20).sum())
    assert np.array_equal(draw_centers(w, 7, 42), draw_centers(w, 7, 42))


def test_with_replacement_frequencies():
    w = ClassWeights("nodule", np.array([[0, 0], [1, 1]]), np.array([0.7, 0.3]))
    n = 100_000
    got = draw_centers(w, n, 1)
    freq = np.mean(got[:, 0] == 0)
    sigma = math.sqrt(0.7 * 0.3 / n)
    assert abs(freq - 0.7) <= 3 * sigma


def test_draw_errors():
    w = ClassWeights("nodule", np.zeros((0, 2), int), np.zeros(0))
    with pytest.raises(ValueError):
        draw_centers(w, 1)
    w = ClassWeights("nodule", np.array([[0, 0]]), np.array([1.0]))
    with pytest.raises(ValueError):
        draw_centers(w, 0)


# -- whole scan --------------------------------------------------------------


def test_sample_scan_classes_and_csv(tmp_path):
    ph = generate_phantom(PhantomSpec(shape=(16, 96, 96), nodule_count=(2, 2), seed=4))
    norm = normalize_hu(ph.volume)
    centers = sample_scan(ph.volume, norm, ph.annotations, budget_scale=0.2, seed=1)
    assert {c.cls for c in centers} == {"nodule", "high_bg", "low_bg"}
    mask = ph.mask.astype(bool)
    for c in centers:
        assert mask[c.z, c.y, c.x] == (c.cls == "nodule")
    again = sample_scan(ph.volume, norm, ph.annotations, budget_scale=0.2, seed=1)
    assert again == centers
    write_centers(centers, tmp_path / "c.csv")
    assert read_centers(tmp_path / "c.csv") == centers
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "scan_id,z,y,x,class"


def test_full_budget_counts_on_one_slice():
    from noduledet.ctdata import Volume

    vol = Volume("s", np.full((3, 80, 80), -850, np.int16))
    ann = NoduleAnnotation("s", (1.0, 40.0, 40.0), 9.0)
    centers = sample_scan(vol, normalize_hu(vol), [ann], seed=0)
    mid = [c for c in centers if c.z == 1]
    from noduledet.ctdata import rasterize_nodule

    n_edge = len(extract_edge_set(rasterize_nodule(vol, ann)[1].astype(bool)))
    counts = {k: sum(c.cls == k for c in mid) for k in ("nodule", "high_bg", "low_bg")}
    assert counts == {"nodule": n_edge, "high_bg": n_edge, "low_bg": math.ceil(n_edge / 2)}
