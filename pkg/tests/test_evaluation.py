import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from froc_oracle import brute_cpm, brute_froc, brute_sensitivity_at
from noduledet.cascade import Candidate
from noduledet.ctdata import NoduleAnnotation
from noduledet.evaluation import (
    FP_RATES,
    FrocCurve,
    ScoredScan,
    compute_cpm,
    compute_froc,
    curve_from_points,
    fp_per_scan,
    interpolate_sensitivity,
    match_candidates,
    read_froc_csv,
    sensitivity_at,
)


def gt(center, d, sid="s"):
    return NoduleAnnotation(sid, center, d)


def scored(sid, gts, cands):
    centers = np.array([c for c, _ in cands], dtype=float).reshape(-1, 3)
    return ScoredScan(sid, [gt(c, d, sid) for c, d in gts], centers, np.array([p for _, p in cands], dtype=float))


# -- matching ----------------------------------------------------------------------


def test_exact_centre_hit():
    hit, fp = match_candidates([(1.0, 2.0, 3.0)], [0.9], [gt((1.0, 2.0, 3.0), 6.0)], 0.5)
    assert hit.tolist() == [True] and fp == 0


def test_just_outside_radius_is_fp():
    hit, fp = match_candidates([(0.0, 0.0, 3.0 + 1e-6)], [0.9], [gt((0.0, 0.0, 0.0), 6.0)], 0.5)
    assert hit.tolist() == [False] and fp == 1


def test_duplicate_hits_count_once():
    hit, fp = match_candidates([(0, 0, 1), (0, 1, 0)], [0.9, 0.8], [gt((0.0, 0.0, 0.0), 6.0)], 0.5)
    assert hit.sum() == 1 and fp == 0


def test_threshold_filters_candidates():
    hit, fp = match_candidates([(0, 0, 0), (50, 0, 0)], [0.4, 0.6], [gt((0.0, 0.0, 0.0), 6.0)], 0.5)
    assert hit.tolist() == [False] and fp == 1


def test_from_candidates_checks_probability():
    c = Candidate("s", (0.0, 0.0, 0.0), 5.0, 0.5, 1.5)
    with pytest.raises(ValueError):
        ScoredScan.from_candidates("s", [], [c])
    s = ScoredScan.from_candidates("s", [], [c], score="seg_score")
    assert s.probs.tolist() == [0.5]


# -- FROC --------------------------------------------------------------------------


def test_perfect_detector_reaches_full_sensitivity_at_zero_fp():
    gts = [((0.0, 0.0, 0.0), 6.0), ((20.0, 0.0, 0.0), 8.0)]
    curve = compute_froc([scored("s", gts, [(c, 1.0) for c, _ in gts])])
    assert (0.0, 1.0) in curve.points()


def test_two_scan_hand_example_matches_oracle():
    scans = [
        ([((0, 0, 0), 0.9), ((30, 0, 0), 0.7)], [((0.0, 0.0, 0.0), 6.0)]),
        ([((5, 5, 5), 0.8)], [((5.0, 5.0, 5.0), 4.0), ((40.0, 0.0, 0.0), 4.0)]),
    ]
    curve = compute_froc([scored(f"s{i}", g, c) for i, (c, g) in enumerate(scans)])
    assert _rows_equal(curve, brute_froc(scans))
    assert curve.points() == [(0.0, 1 / 3), (0.0, 2 / 3), (0.5, 2 / 3)]


def _rows_equal(curve, expected):
    rows = list(zip(curve.thresholds, curve.fp_per_scan, curve.sensitivity))
    return len(rows) == len(expected) and all(np.allclose(a, b, atol=1e-12) for a, b in zip(rows, expected))


def random_instance(rng):
    scans = []
    for _ in range(int(rng.integers(1, 4))):
        gts = [(tuple(rng.uniform(-20, 20, 3)), float(rng.uniform(3, 12))) for _ in range(int(rng.integers(0, 4)))]
        cands = []
        for g, d in gts:
            for _ in range(int(rng.integers(0, 3))):
                cands.append((tuple(np.add(g, rng.normal(0, d / 4, 3))), float(np.round(rng.uniform(), 2))))
        for _ in range(int(rng.integers(0, 6))):
            cands.append((tuple(rng.uniform(-20, 20, 3)), float(np.round(rng.uniform(), 2))))
        scans.append((cands, gts))
    if sum(len(g) for _, g in scans) == 0:
        scans[0][1].append(((0.0, 0.0, 0.0), 5.0))
    if sum(len(c) for c, _ in scans) == 0:
        scans[0][0].append(((1.0, 0.0, 0.0), 0.5))
    return scans


def test_froc_equals_exhaustive_enumeration_on_200_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        scans = random_instance(rng)
        curve = compute_froc([scored(f"s{i}", g, c) for i, (c, g) in enumerate(scans)])
        assert _rows_equal(curve, brute_froc(scans))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_froc_is_monotone(seed):
    scans = random_instance(np.random.default_rng(seed))
    curve = compute_froc([scored(f"s{i}", g, c) for i, (c, g) in enumerate(scans)])
    assert np.all(np.diff(curve.thresholds) < 0)
    assert np.all(np.diff(curve.fp_per_scan) >= 0)
    assert np.all(np.diff(curve.sensitivity) >= 0)
    assert np.all((curve.sensitivity >= 0) & (curve.sensitivity <= 1))


def test_froc_errors():
    with pytest.raises(ValueError):
        compute_froc([])
    with pytest.raises(ValueError):
        compute_froc([scored("s", [], [((0, 0, 0), 0.5)])])


def test_froc_csv_roundtrip(tmp_path):
    curve = FrocCurve(np.array([0.9, 0.5]), np.array([0.0, 1.5]), np.array([0.5, 1.0]))
    curve.write_csv(tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines() == [
        "threshold,fp_per_scan,sensitivity", "0.900000,0.000000,0.500000", "0.500000,1.500000,1.000000"]
    back = read_froc_csv(tmp_path / "f.csv")
    assert back.points() == curve.points()


# -- CPM ---------------------------------------------------------------------------


TSCNN = (0.848, 0.900, 0.925, 0.936, 0.949, 0.957, 0.960)
DENSE = (0.768, 0.830, 0.877, 0.931, 0.950, 0.951, 0.960)


def test_cpm_of_tabulated_rows():
    assert compute_cpm(curve_from_points(zip(FP_RATES, TSCNN))).cpm == pytest.approx(0.925, abs=5e-4)
    assert compute_cpm(curve_from_points(zip(FP_RATES, DENSE))).cpm == pytest.approx(0.895, abs=5e-4)


def test_constant_curve():
    curve = curve_from_points([(0.3, 0.7), (2.0, 0.7), (11.0, 0.7)])
    assert compute_cpm(curve).cpm == pytest.approx(0.7, abs=1e-12)


def test_interpolation_and_clamping():
    curve = curve_from_points([(0.5, 0.4), (1.5, 0.8)])
    assert interpolate_sensitivity(curve, 1.0) == pytest.approx(0.6)
    assert interpolate_sensitivity(curve, 0.125) == pytest.approx(0.4)
    assert interpolate_sensitivity(curve, 8.0) == pytest.approx(0.8)


def test_cpm_is_mean_of_sensitivities():
    report = compute_cpm(curve_from_points([(0.1, 0.2), (1.0, 0.6), (9.0, 0.9)]))
    assert report.cpm == pytest.approx(sum(report.sensitivities) / 7, abs=1e-12)
    assert len(report.sensitivities) == 7


def test_empty_curve_rejected():
    with pytest.raises(ValueError):
        compute_cpm(FrocCurve(np.zeros(0), np.zeros(0), np.zeros(0)))


def test_cpm_matches_brute_force_on_100_random_curves():
    rng = np.random.default_rng(1)
    for _ in range(100):
        scans = random_instance(rng)
        curve = compute_froc([scored(f"s{i}", g, c) for i, (c, g) in enumerate(scans)])
        pts = curve.points()
        assert compute_cpm(curve).cpm == pytest.approx(brute_cpm(pts), abs=1e-12)
        for r in FP_RATES:
            assert interpolate_sensitivity(curve, r) == pytest.approx(brute_sensitivity_at(pts, r), abs=1e-12)


def test_sensitivity_at_budget():
    curve = curve_from_points([(0.5, 0.4), (3.9, 0.8), (4.1, 0.95)])
    assert sensitivity_at(curve, 4.0) == 0.8
    assert sensitivity_at(curve, 0.1) == 0.0


def test_unthresholded_fp_per_scan():
    anns = {"a": [gt((0.0, 0.0, 0.0), 6.0, "a")], "b": []}
    cands = {"a": [Candidate("a", (0.0, 0.0, 1.0), 5.0, 0.1), Candidate("a", (30.0, 0.0, 0.0), 5.0, 0.1)],
             "b": [Candidate("b", (0.0, 0.0, 0.0), 5.0, 0.9)]}
    assert fp_per_scan(cands, anns) == (1.0, 1.0)
