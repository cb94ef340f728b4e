"""Offline hard mining: harvest false-positive blobs, resample poorly segmented nodules."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .cascade import Predictor, first_pass, label_components
from .ctdata import NoduleAnnotation, Volume, rasterize_nodule
from .sampler import edge_distance_field, extract_edge_set, nodule_radius_voxels
from .segnet import SegTrainSpec, TrainingPatch, train_segmentation

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class HardMiningPolicy:
    threshold: float = 0.5
    overlap: str = "iou"  # or "dice"
    patch_size: int = 64
    rounds: int = 1

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("binarization threshold must lie in (0, 1)")
        if self.overlap not in ("iou", "dice"):
            raise ValueError(f"unknown overlap metric {self.overlap!r}")


@dataclass(frozen=True)
class MinedCenter:
    scan_id: str
    z: int
    y: int
    x: int
    label: int  # 1 resampled nodule voxel, 0 mined false positive
    source: str


@dataclass
class MinedSampleSet:
    negatives: list[MinedCenter] = field(default_factory=list)
    positives: list[MinedCenter] = field(default_factory=list)
    overlaps: dict = field(default_factory=dict)  # (scan_id, nodule index) -> (C, O, T)

    def __len__(self):
        return len(self.negatives) + len(self.positives)

    def extend(self, other: "MinedSampleSet") -> None:
        self.negatives.extend(other.negatives)
        self.positives.extend(other.positives)
        self.overlaps.update(other.overlaps)


def overlap_rate(pred_mask, gt_mask, metric: str = "iou") -> float:
    """Intersection over union (or Dice) of two masks; 1 when both are empty."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    inter = np.count_nonzero(pred & gt)
    if metric == "iou":
        union = np.count_nonzero(pred | gt)
        return 1.0 if union == 0 else inter / union
    if metric == "dice":
        total = np.count_nonzero(pred) + np.count_nonzero(gt)
        return 1.0 if total == 0 else 2.0 * inter / total
    raise ValueError(f"unknown overlap metric {metric!r}")


def positive_resample_count(c: int, o: float) -> int:
    """Number of extra nodule samples ``round(C * (1 - O))``, rounding halves up."""
    if c < 0:
        raise ValueError("edge count must be non-negative")
    if not 0.0 <= o <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    return int(math.floor(c * (1.0 - o) + 0.5))


def _label_window_clean(gt: np.ndarray, z: int, y: int, x: int, size: int) -> bool:
    y0, x0 = y - size // 2, x - size // 2
    window = gt[z, max(y0, 0):max(y0 + size, 0), max(x0, 0):max(x0 + size, 0)]
    return not window.any()


def mine_false_positives(pred: np.ndarray, gt: np.ndarray, scan_id: str, patch_size: int = 64) -> list[MinedCenter]:
    """Centroids of predicted slice components that miss the gold standard.

    On nodule-free slices every component counts; on nodule slices only
    components with no gold voxel. Centers whose training-patch label would
    contain gold voxels are dropped so every mined sample is a clean negative.
    """
    out = []
    for z in range(pred.shape[0]):
        if not pred[z].any():
            continue
        labels, n = ndimage.label(pred[z], structure=_EIGHT)
        for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
            comp = labels[sl] == idx
            if gt[z][sl][comp].any():
                continue
            rows, cols = np.nonzero(comp)
            y = int(round(rows.mean())) + sl[0].start
            x = int(round(cols.mean())) + sl[1].start
            if _label_window_clean(gt, z, y, x, patch_size):
                out.append(MinedCenter(scan_id, z, y, x, 0, "mined_fp"))
    return out


def nodule_weight_field(mask: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Edge-decay weights over all voxels of one 3D nodule mask (per-slice distances).

    Returns ``(coords (k, 3), weights (k,))`` with weights summing to 1.
    """
    coords, mass = [], []
    for z in np.nonzero(mask.any(axis=(1, 2)))[0]:
        sl = mask[z]
        edges = extract_edge_set(sl)
        dist = edge_distance_field(sl.shape, edges)
        pts = np.argwhere(sl)
        coords.append(np.column_stack([np.full(len(pts), z), pts]))
        mass.append(np.exp(-dist[pts[:, 0], pts[:, 1]] / radius))
    coords = np.concatenate(coords)
    mass = np.concatenate(mass)
    return coords, mass / mass.sum()


def nodule_edge_count(mask: np.ndarray) -> int:
    return sum(len(extract_edge_set(mask[z])) for z in np.nonzero(mask.any(axis=(1, 2)))[0])


def mine_scan(
    pred: np.ndarray,
    volume: Volume,
    annotations: list[NoduleAnnotation],
    policy: HardMiningPolicy = HardMiningPolicy(),
    rng=None,
) -> MinedSampleSet:
    """Mine one scan given its binary first-pass prediction."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pred = np.asarray(pred, dtype=bool)
    masks = [rasterize_nodule(volume, a).astype(bool) for a in annotations]
    gt = np.any(masks, axis=0) if masks else np.zeros(volume.shape, bool)
    result = MinedSampleSet(negatives=mine_false_positives(pred, gt, volume.scan_id, policy.patch_size))

    labels, _ = label_components(pred)
    for i, (ann, mask) in enumerate(zip(annotations, masks)):
        touching = np.unique(labels[mask & pred])
        pred_nodule = np.isin(labels, touching[touching > 0])
        o = overlap_rate(pred_nodule, mask, policy.overlap)
        c = nodule_edge_count(mask)
        t = positive_resample_count(c, o)
        result.overlaps[(volume.scan_id, i)] = (c, o, t)
        if t == 0:
            continue
        coords, weights = nodule_weight_field(mask, nodule_radius_voxels(ann, volume))
        replace = t > len(coords)
        for z, y, x in coords[rng.choice(len(coords), size=t, replace=replace, p=weights)]:
            result.positives.append(MinedCenter(volume.scan_id, int(z), int(y), int(x), 1, "resampled"))
    return result


def mine_hard_samples(
    model: Predictor,
    scans,
    policy: HardMiningPolicy = HardMiningPolicy(),
    seed: int = 0,
    batch_size: int = 16,
) -> MinedSampleSet:
    """Run the first prediction pass over training scans and mine each one.

    ``scans`` yields ``(volume, normalized, annotations)`` triples.
    """
    rng = np.random.default_rng(seed)
    mined = MinedSampleSet()
    for volume, normalized, annotations in scans:
        pred = first_pass(model, normalized, batch_size=batch_size, threshold=policy.threshold)
        mined.extend(mine_scan(pred, volume, annotations, policy, rng))
    return mined


def finetune_segmentation(model, patches: list[TrainingPatch], spec: SegTrainSpec = SegTrainSpec()):
    """Continue training an already trained model at the fine-tuning learning rate."""
    if not patches:
        raise ValueError("fine-tuning needs a non-empty sample set")
    return train_segmentation(model, patches, spec, lr=spec.finetune_lr)


MINED_HEADER = ["scan_id", "z", "y", "x", "label", "source"]


def write_mined(mined: MinedSampleSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MINED_HEADER)
        for c in mined.negatives + mined.positives:
            writer.writerow([c.scan_id, c.z, c.y, c.x, c.label, c.source])


def read_mined(path) -> MinedSampleSet:
    mined = MinedSampleSet()
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            c = MinedCenter(r["scan_id"], int(r["z"]), int(r["y"]), int(r["x"]), int(r["label"]), r["source"])
            (mined.positives if c.label else mined.negatives).append(c)
    return mined
