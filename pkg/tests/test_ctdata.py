import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noduledet.ctdata import (
    DataError,
    NoduleAnnotation,
    PhantomError,
    PhantomSpec,
    Volume,
    generate_phantom,
    load_annotations,
    load_volume,
    normalize_hu,
    rasterize_annotations,
    rasterize_nodule,
    save_volume,
    voxel_to_world,
    world_to_voxel,
    write_annotations,
)


def make_volume(shape=(8, 8, 8), origin=(0.0, 0.0, 0.0), spacing=(1.0, 1.0, 1.0)):
    return Volume("s", np.zeros(shape, np.int16), origin, spacing)


# -- volume files ------------------------------------------------------------


def test_header_spacing_is_echoed(tmp_path):
    vol = Volume("s", np.zeros((2, 3, 4), np.int16), (0, 0, 0), (1.25, 0.7, 0.7))
    path = save_volume(vol, tmp_path / "s.mhd")
    assert load_volume(path).spacing == (1.25, 0.7, 0.7)


def test_missing_raw_file(tmp_path):
    header = tmp_path / "a.mhd"
    header.write_text("NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = a.raw\n")
    with pytest.raises(DataError, match="raw data missing"):
        load_volume(header)


def test_raw_length_mismatch(tmp_path):
    header = tmp_path / "a.mhd"
    header.write_text("NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = a.raw\n")
    (tmp_path / "a.raw").write_bytes(b"\0" * 15)
    with pytest.raises(DataError, match="bytes"):
        load_volume(header)


def test_unsupported_element_type(tmp_path):
    header = tmp_path / "a.mhd"
    header.write_text("NDims = 3\nDimSize = 1 1 1\nElementType = MET_UCHAR\nElementDataFile = a.raw\n")
    (tmp_path / "a.raw").write_bytes(b"\0")
    with pytest.raises(DataError, match="unsupported"):
        load_volume(header)


@pytest.mark.parametrize("dtype", [np.int16, np.float32])
def test_roundtrip_is_bit_identical(tmp_path, dtype):
    rng = np.random.default_rng(0)
    # 4 x 4 x 2 in x, y, z order
    voxels = rng.integers(-1024, 3000, size=(2, 4, 4)).astype(dtype)
    vol = Volume("s", voxels, (-1.5, 2.0, 3.25), (2.5, 0.7, 0.7))
    back = load_volume(save_volume(vol, tmp_path / "s.mhd"))
    assert back.voxels.dtype == dtype
    assert back.voxels.tobytes() == voxels.tobytes()
    assert back.origin == vol.origin and back.spacing == vol.spacing


def test_raw_is_x_fastest(tmp_path):
    voxels = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    save_volume(Volume("s", voxels), tmp_path / "s.mhd")
    raw = np.fromfile(tmp_path / "s.raw", dtype="<i2")
    # first row of the file walks x at fixed (z, y) = (0, 0)
    assert raw[:4].tolist() == voxels[0, 0, :].tolist()
    assert "DimSize = 4 3 2" in (tmp_path / "s.mhd").read_text()


def test_volume_invariants():
    with pytest.raises(DataError):
        Volume("s", np.zeros((2, 2), np.int16))
    with pytest.raises(DataError):
        Volume("s", np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(DataError):
        Volume("s", np.full((2, 2, 2), np.nan))


# -- annotations -------------------------------------------------------------


def test_annotation_row_is_reordered(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("seriesuid,coordX,coordY,coordZ,diameter_mm\ns1,-100.0,50.0,20.0,6.2\n")
    (ann,) = load_annotations(path)
    assert ann.scan_id == "s1"
    assert ann.center_world == (20.0, 50.0, -100.0)  # stored z, y, x
    assert ann.diameter_mm == 6.2


def test_header_only_file(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("seriesuid,coordX,coordY,coordZ,diameter_mm\n")
    assert load_annotations(path) == []


def test_negative_diameter_names_line(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("seriesuid,coordX,coordY,coordZ,diameter_mm\ns1,0,0,0,4\ns1,1,2,3,-3\n")
    with pytest.raises(DataError, match="line 3"):
        load_annotations(path)


def test_malformed_row_names_line(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("seriesuid,coordX,coordY,coordZ,diameter_mm\ns1,0,zero,0,4\n")
    with pytest.raises(DataError, match="line 2"):
        load_annotations(path)


def test_annotation_csv_roundtrip(tmp_path):
    anns = [NoduleAnnotation("a", (1.5, -2.25, 3.125), 6.0), NoduleAnnotation("b", (0.1, 0.2, 0.3), 12.5)]
    write_annotations(anns, tmp_path / "a.csv")
    assert load_annotations(tmp_path / "a.csv") == anns


def test_annotation_diameter_bounds():
    with pytest.raises(DataError):
        NoduleAnnotation("a", (0, 0, 0), 0.0)
    with pytest.raises(DataError):
        NoduleAnnotation("a", (0, 0, 0), 64.5)


# -- coordinates -------------------------------------------------------------


def test_world_to_voxel_examples():
    vol = make_volume(origin=(-50.0, -100.0, -100.0))
    # world given as (x, y, z) = (-90, -100, -50) maps to voxel (x, y, z) = (10, 0, 0)
    assert world_to_voxel(vol, (-50.0, -100.0, -90.0)).tolist() == [0.0, 0.0, 10.0]
    vol = make_volume(spacing=(2.0, 2.0, 2.5)[::-1])
    assert world_to_voxel(vol, (2.0, 4.0, 2.5)[::-1]).tolist() == [1.0, 2.0, 1.0][::-1]


@settings(max_examples=100, deadline=None)
@given(
    origin=st.tuples(*[st.floats(-500, 500)] * 3),
    spacing=st.tuples(*[st.floats(0.1, 5.0)] * 3),
    world=st.tuples(*[st.floats(-1000, 1000)] * 3),
)
def test_coordinate_roundtrip(origin, spacing, world):
    vol = make_volume(origin=origin, spacing=spacing)
    back = voxel_to_world(vol, world_to_voxel(vol, world))
    assert np.allclose(back, world, atol=1e-9, rtol=0)


# -- normalization -----------------------------------------------------------


def test_normalize_examples():
    out = normalize_hu(np.array([-1000, 400, -300, 2000, -3000]))
    assert out.tolist() == [0.0, 1.0, 0.5, 1.0, 0.0]


def test_normalize_rejects_empty_window():
    with pytest.raises(ValueError):
        normalize_hu(np.zeros(3), lo=10, hi=10)


@given(st.lists(st.floats(-5000, 5000), min_size=1, max_size=50))
def test_normalize_bounded_and_monotone(values):
    hu = np.sort(np.asarray(values))
    out = normalize_hu(hu)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.all(np.diff(out) >= 0)


# -- rasterization -----------------------------------------------------------


def test_subvoxel_nodule_sets_nearest_voxel():
    vol = make_volume(spacing=(2.0, 2.0, 2.0))
    mask = rasterize_nodule(vol, NoduleAnnotation("s", (4.6, 5.3, 7.1), 0.5))
    assert mask.sum() == 1
    assert mask[2, 3, 4] == 1


def test_sphere_count_matches_brute_force():
    vol = make_volume(shape=(16, 16, 16))
    ann = NoduleAnnotation("s", (7.3, 8.1, 6.6), 6.0)
    mask = rasterize_nodule(vol, ann)
    c = np.array(ann.center_world)
    brute = sum(
        1 for p in itertools.product(range(16), repeat=3) if np.linalg.norm(np.array(p) - c) <= 3.0
    )
    assert mask.sum() == brute


def test_disjoint_spheres_add():
    vol = make_volume(shape=(20, 20, 20))
    a = NoduleAnnotation("s", (5, 5, 5), 4.0)
    b = NoduleAnnotation("s", (14, 14, 14), 5.0)
    union = rasterize_annotations(vol, [a, b])
    assert union.sum() == rasterize_nodule(vol, a).sum() + rasterize_nodule(vol, b).sum()


def test_sphere_outside_grid():
    with pytest.raises(DataError):
        rasterize_nodule(make_volume(), NoduleAnnotation("s", (50, 50, 50), 4.0))


@settings(max_examples=300, deadline=None)
@given(
    center=st.tuples(*[st.floats(10, 14)] * 3),
    diameter=st.floats(4.0, 14.0),
)
def test_sphere_volume_within_surface_bound(center, diameter):
    # spheres under ~4 voxels across can miss the bound (d=2 between voxel centers keeps 2 of 4.19)
    vol = make_volume(shape=(24, 24, 24))
    mask = rasterize_nodule(vol, NoduleAnnotation("s", center, diameter)).astype(bool)
    from scipy import ndimage

    surface = int(np.count_nonzero(mask & ~ndimage.binary_erosion(mask)))
    ideal = 4.0 / 3.0 * math.pi * (diameter / 2.0) ** 3
    assert abs(mask.sum() - ideal) <= surface


# -- phantoms ----------------------------------------------------------------


def test_phantom_is_deterministic():
    spec = PhantomSpec(shape=(16, 64, 64), seed=5)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert a.volume.voxels.tobytes() == b.volume.voxels.tobytes()
    assert a.annotations == b.annotations
    assert a.mask.tobytes() == b.mask.tobytes()


def test_phantom_exact_count():
    ph = generate_phantom(PhantomSpec(shape=(24, 96, 96), nodule_count=(3, 3), seed=1))
    assert len(ph.annotations) == 3
    assert ph.mask.sum() == rasterize_annotations(ph.volume, ph.annotations).sum()


def test_phantom_centres_inside_lung():
    spec = PhantomSpec(shape=(24, 96, 96))
    for seed in range(50):
        ph = generate_phantom(spec.with_seed(seed))
        for ann in ph.annotations:
            v = np.rint(world_to_voxel(ph.volume, ann.center_world)).astype(int)
            assert np.all(v >= 0) and np.all(v < np.array(ph.volume.shape))
            assert ph.lung[tuple(v)]


def test_phantom_intensity_levels():
    ph = generate_phantom(PhantomSpec(shape=(24, 96, 96), seed=3, frac_juxtapleural=0, frac_cavitary=0,
                                      frac_low_contrast=0, nodule_count=(2, 2)))
    hu = ph.volume.voxels
    assert abs(np.median(hu[ph.lung & ~ph.mask.astype(bool)]) + 850) < 40
    assert abs(np.median(hu[~ph.lung])) < 40
    assert np.median(hu[ph.mask.astype(bool)]) > -250


def test_phantom_cannot_fit():
    spec = PhantomSpec(shape=(12, 24, 24), nodule_count=(6, 6), diameter_mm=(9, 10), seed=0)
    with pytest.raises(PhantomError):
        generate_phantom(spec, max_retries=20)


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(frac_juxtapleural=0.6, frac_cavitary=0.5)
    with pytest.raises(ValueError):
        PhantomSpec(nodule_count=(3, 1))
