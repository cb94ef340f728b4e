"""Candidate matching, FROC sweeps and the seven-point CPM score."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .cascade import Candidate
from .ctdata import NoduleAnnotation

FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class ScoredScan:
    scan_id: str
    annotations: list[NoduleAnnotation]
    centers: np.ndarray  # (k, 3) world mm
    probs: np.ndarray  # (k,)

    @classmethod
    def from_candidates(cls, scan_id, annotations, candidates: list[Candidate], score: str = "clf_prob"):
        centers = np.array([c.center_world for c in candidates], dtype=float).reshape(-1, 3)
        probs = np.array([c.score(score) for c in candidates], dtype=float)
        if np.any((probs < 0) | (probs > 1)):
            raise ValueError("candidate probabilities must lie in [0, 1]")
        return cls(scan_id, list(annotations), centers, probs)


def _hit_matrix(centers: np.ndarray, annotations) -> np.ndarray:
    """(candidates, gts) bool: candidate center within the gt radius."""
    if len(annotations) == 0 or len(centers) == 0:
        return np.zeros((len(centers), len(annotations)), dtype=bool)
    gt_c = np.array([a.center_world for a in annotations], dtype=float)
    gt_r = np.array([a.diameter_mm / 2.0 for a in annotations], dtype=float)
    dist = np.linalg.norm(centers[:, None, :] - gt_c[None, :, :], axis=-1)
    return dist <= gt_r[None, :]


def match_candidates(centers, probs, annotations, threshold: float) -> tuple[np.ndarray, int]:
    """Per-gt hit flags and the false-positive count at one threshold.

    A candidate at or above ``threshold`` hits every gt whose radius contains
    it; candidates hitting nothing are false positives. Several candidates on
    one gt count as a single hit and never as false positives.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    probs = np.asarray(probs, dtype=float)
    keep = probs >= threshold
    hits = _hit_matrix(centers[keep], annotations)
    return hits.any(axis=0), int(np.count_nonzero(~hits.any(axis=1)))


@dataclass
class FrocCurve:
    thresholds: np.ndarray
    fp_per_scan: np.ndarray
    sensitivity: np.ndarray
    n_scans: int = 0
    n_nodules: int = 0

    def __len__(self):
        return len(self.thresholds)

    def points(self):
        return list(zip(self.fp_per_scan.tolist(), self.sensitivity.tolist()))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fp_per_scan", "sensitivity"])
            for t, f, s in zip(self.thresholds, self.fp_per_scan, self.sensitivity):
                writer.writerow([f"{t:.6f}", f"{f:.6f}", f"{s:.6f}"])


def read_froc_csv(path) -> FrocCurve:
    rows = list(csv.DictReader(open(path, newline="", encoding="utf-8")))
    return FrocCurve(
        np.array([float(r["threshold"]) for r in rows]),
        np.array([float(r["fp_per_scan"]) for r in rows]),
        np.array([float(r["sensitivity"]) for r in rows]),
    )


def compute_froc(scans: list[ScoredScan]) -> FrocCurve:
    """Sweep every distinct candidate probability from high to low.

    Each gt is detected from the highest probability among the candidates
    that hit it; each non-hitting candidate is a false positive from its own
    probability downwards.
    """
    if not scans:
        raise ValueError("FROC needs at least one scan")
    n_gt = sum(len(s.annotations) for s in scans)
    if n_gt == 0:
        raise ValueError("FROC needs at least one ground-truth nodule")
    gt_best, fp_probs, all_probs = [], [], []
    for s in scans:
        hits = _hit_matrix(s.centers, s.annotations)
        for j in range(hits.shape[1]):
            gt_best.append(s.probs[hits[:, j]].max() if hits[:, j].any() else -np.inf)
        fp_probs.append(s.probs[~hits.any(axis=1)])
        all_probs.append(s.probs)
    gt_best = np.sort(np.asarray(gt_best))
    fp_probs = np.sort(np.concatenate(fp_probs))
    thresholds = np.unique(np.concatenate(all_probs))[::-1]
    # counts of values >= t via sorted search
    tp = len(gt_best) - np.searchsorted(gt_best, thresholds, side="left")
    fp = len(fp_probs) - np.searchsorted(fp_probs, thresholds, side="left")
    return FrocCurve(
        thresholds=thresholds,
        fp_per_scan=fp / len(scans),
        sensitivity=tp / n_gt,
        n_scans=len(scans),
        n_nodules=n_gt,
    )


@dataclass
class CpmReport:
    rates: tuple[float, ...] = FP_RATES
    sensitivities: tuple[float, ...] = field(default_factory=tuple)
    label: str = ""

    @property
    def cpm(self) -> float:
        return float(np.mean(self.sensitivities))

    def format(self, label: str | None = None) -> str:
        label = label if label is not None else (self.label or "model")
        head = ["Method"] + [f"{r:g}" for r in self.rates] + ["CPM"]
        row = [label] + [f"{s:.3f}" for s in self.sensitivities] + [f"{self.cpm:.3f}"]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        fmt = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
        return fmt(head) + "\n" + fmt(row)


def interpolate_sensitivity(curve: FrocCurve, rate: float) -> float:
    """Sensitivity at ``rate`` FP/scan, linear between curve points, clamped at the ends."""
    fps = np.asarray(curve.fp_per_scan, dtype=float)
    sens = np.asarray(curve.sensitivity, dtype=float)
    # best sensitivity reached at each distinct fp level
    levels = np.unique(fps)
    best = np.array([sens[fps == f].max() for f in levels])
    return float(np.interp(rate, levels, best))


def compute_cpm(curve: FrocCurve, rates=FP_RATES, label: str = "") -> CpmReport:
    if len(curve) == 0:
        raise ValueError("CPM needs a non-empty FROC curve")
    return CpmReport(tuple(rates), tuple(interpolate_sensitivity(curve, r) for r in rates), label)


def curve_from_points(points) -> FrocCurve:
    """Build a curve from ``(fp_per_scan, sensitivity)`` pairs (for tabulated operating points)."""
    pts = sorted(points)
    fps = np.array([p[0] for p in pts], dtype=float)
    sens = np.array([p[1] for p in pts], dtype=float)
    return FrocCurve(thresholds=np.linspace(1.0, 0.0, len(pts)), fp_per_scan=fps, sensitivity=sens)


def sensitivity_at(curve: FrocCurve, max_fp: float) -> float:
    """Best sensitivity over operating points with at most ``max_fp`` FP/scan (no interpolation)."""
    ok = curve.fp_per_scan <= max_fp
    return float(curve.sensitivity[ok].max()) if ok.any() else 0.0


def fp_per_scan(candidates_by_scan: dict, annotations_by_scan: dict) -> tuple[float, float]:
    """(false positives per scan, sensitivity) of unthresholded candidate lists."""
    fps, hits, n_gt = 0, 0, 0
    for scan_id, anns in annotations_by_scan.items():
        cands = candidates_by_scan.get(scan_id, [])
        centers = np.array([c.center_world for c in cands], dtype=float).reshape(-1, 3)
        hit, fp = match_candidates(centers, np.ones(len(cands)), anns, 0.0)
        fps += fp
        hits += int(hit.sum())
        n_gt += len(anns)
    n = max(len(annotations_by_scan), 1)
    return fps / n, (hits / n_gt if n_gt else 0.0)
