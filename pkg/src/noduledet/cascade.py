"""Two-pass slice-wise prediction and candidate extraction."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy import ndimage

from .ctdata import Volume, voxel_to_world
from .segnet import crop_window, slice_triplet

WINDOW = 128
STRIDE = 64
PATCH = 64
THRESHOLD = 0.5
CONN26 = np.ones((3, 3, 3), dtype=bool)

# A predictor maps a float tensor (B, 3, H, W) to probabilities (B, 1, H, W).
Predictor = Callable[[torch.Tensor], torch.Tensor]


def axis_origins(n: int, window: int = WINDOW, stride: int = STRIDE) -> list[int]:
    if n < 1:
        raise ValueError("axis length must be positive")
    if n <= window:
        return [0]
    origins = []
    for o in range(0, n, stride):
        o = min(o, n - window)
        if not origins or origins[-1] != o:
            origins.append(o)
        if o + window >= n:
            break
    return origins


@dataclass(frozen=True)
class WindowPlan:
    y_origins: tuple[int, ...]
    x_origins: tuple[int, ...]
    n_slices: int
    window: int = WINDOW

    def windows(self):
        for y0 in self.y_origins:
            for x0 in self.x_origins:
                yield y0, x0


def plan_windows(shape, window: int = WINDOW, stride: int = STRIDE) -> WindowPlan:
    """Sliding-window layout over a (z, y, x) grid; every slice is a center slice once."""
    nz, ny, nx = shape
    return WindowPlan(tuple(axis_origins(ny, window, stride)), tuple(axis_origins(nx, window, stride)), nz, window)


def _predict_batches(model: Predictor, inputs: list[np.ndarray], batch_size: int) -> list[np.ndarray]:
    if isinstance(model, torch.nn.Module):
        model.eval()
        dtype = next(model.parameters()).dtype
    else:
        dtype = torch.float32
    out = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            batch = torch.from_numpy(np.stack(inputs[i:i + batch_size])).to(dtype)
            out.extend(model(batch)[:, 0].float().numpy())
    return out


def first_pass(model: Predictor, normalized: np.ndarray, *, batch_size: int = 16, return_prob: bool = False,
               window: int = WINDOW, stride: int = STRIDE, threshold: float = THRESHOLD):
    """Union of thresholded window predictions over the whole volume.

    With ``return_prob`` also returns the per-voxel maximum probability over
    the windows that cover it.
    """
    plan = plan_windows(normalized.shape, window, stride)
    nz, ny, nx = normalized.shape
    mask = np.zeros(normalized.shape, dtype=bool)
    prob = np.zeros(normalized.shape, dtype=np.float32)
    for z in range(nz):
        triplet = slice_triplet(normalized, z)
        jobs = list(plan.windows())
        preds = _predict_batches(model, [crop_window(triplet, y0, x0, window) for y0, x0 in jobs], batch_size)
        for (y0, x0), p in zip(jobs, preds):
            h, w = min(window, ny - y0), min(window, nx - x0)
            p = p[:h, :w]
            mask[z, y0:y0 + h, x0:x0 + w] |= p >= threshold
            np.maximum(prob[z, y0:y0 + h, x0:x0 + w], p, out=prob[z, y0:y0 + h, x0:x0 + w])
    return (mask, prob) if return_prob else mask


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """26-connected component labelling of a 3D mask."""
    return ndimage.label(mask, structure=CONN26)


def second_pass(model: Predictor, normalized: np.ndarray, first_mask: np.ndarray, *, batch_size: int = 32,
                return_prob: bool = False, patch: int = PATCH, threshold: float = THRESHOLD):
    """Re-predict a training-sized patch centred on every first-pass component, slice by slice."""
    nz, ny, nx = normalized.shape
    refined = np.zeros(normalized.shape, dtype=bool)
    prob = np.zeros(normalized.shape, dtype=np.float32)
    labels, n = label_components(first_mask)
    jobs = []
    for sl, idx in zip(ndimage.find_objects(labels), range(1, n + 1)):
        comp = labels[sl] == idx
        for dz in range(comp.shape[0]):
            rows, cols = np.nonzero(comp[dz])
            if len(rows) == 0:
                continue
            z = sl[0].start + dz
            cy = int(round(rows.mean())) + sl[1].start
            cx = int(round(cols.mean())) + sl[2].start
            jobs.append((z, cy - patch // 2, cx - patch // 2))
    inputs = [crop_window(slice_triplet(normalized, z), y0, x0, patch) for z, y0, x0 in jobs]
    for (z, y0, x0), p in zip(jobs, _predict_batches(model, inputs, batch_size)):
        sy0, sy1 = max(y0, 0), min(y0 + patch, ny)
        sx0, sx1 = max(x0, 0), min(x0 + patch, nx)
        p = p[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0]
        refined[z, sy0:sy1, sx0:sx1] |= p >= threshold
        np.maximum(prob[z, sy0:sy1, sx0:sx1], p, out=prob[z, sy0:sy1, sx0:sx1])
    return (refined, prob) if return_prob else refined


# --------------------------------------------------------------------------
# Candidates


@dataclass
class Candidate:
    scan_id: str
    center_world: tuple[float, float, float]  # (z, y, x) mm
    diameter_mm: float
    seg_score: float
    clf_prob: float | None = None

    def score(self, field: str = "clf_prob") -> float:
        value = getattr(self, field)
        return self.seg_score if value is None else value


def extract_candidates(mask: np.ndarray, volume: Volume, prob: np.ndarray | None = None) -> list[Candidate]:
    """One candidate per 26-connected component: centroid, equivalent diameter, mean probability."""
    labels, n = label_components(mask)
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    centroids = ndimage.center_of_mass(mask.astype(np.float64), labels, index)
    sizes = ndimage.sum_labels(np.ones(mask.shape), labels, index)
    scores = ndimage.mean(prob, labels, index) if prob is not None else np.ones(n)
    mean_spacing = float(np.mean(volume.spacing))
    out = []
    for c, v, s in zip(centroids, sizes, scores):
        diameter = 2.0 * (3.0 * float(v) / (4.0 * math.pi)) ** (1.0 / 3.0) * mean_spacing
        world = tuple(float(w) for w in voxel_to_world(volume, c))
        out.append(Candidate(volume.scan_id, world, diameter, float(np.clip(s, 0.0, 1.0))))
    return out


@dataclass
class Detection:
    candidates: list[Candidate]
    first_candidates: list[Candidate]
    first_mask: np.ndarray
    refined_mask: np.ndarray


def detect(model: Predictor, volume: Volume, normalized: np.ndarray, *, batch_size: int = 16) -> Detection:
    first_mask, first_prob = first_pass(model, normalized, batch_size=batch_size, return_prob=True)
    refined, prob = second_pass(model, normalized, first_mask, batch_size=batch_size, return_prob=True)
    return Detection(
        candidates=extract_candidates(refined, volume, prob),
        first_candidates=extract_candidates(first_mask, volume, first_prob),
        first_mask=first_mask,
        refined_mask=refined,
    )


CANDIDATE_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "seg_score"]


def write_candidates(candidates: list[Candidate], path) -> None:
    with_clf = any(c.clf_prob is not None for c in candidates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CANDIDATE_HEADER + (["clf_prob"] if with_clf else []))
        for c in candidates:
            z, y, x = c.center_world
            row = [c.scan_id, f"{x:.4f}", f"{y:.4f}", f"{z:.4f}", f"{c.diameter_mm:.4f}", f"{c.seg_score:.6f}"]
            if with_clf:
                row.append("" if c.clf_prob is None else f"{c.clf_prob:.6f}")
            writer.writerow(row)


def read_candidates(path) -> list[Candidate]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            clf = row.get("clf_prob")
            out.append(Candidate(
                row["seriesuid"],
                (float(row["coordZ"]), float(row["coordY"]), float(row["coordX"])),
                float(row["diameter_mm"]),
                float(row["seg_score"]),
                float(clf) if clf not in (None, "") else None,
            ))
    return out
