"""Edge-weighted sampling of segmentation patch centers.

Each nodule is sampled slice by slice. Three pools are drawn from: voxels of
the nodule itself, background near the nodule (its bounding box grown by
half a patch) and the remaining background. Nodule voxels near the nodule
boundary are favoured, near background is weighted by intensity and
boundary proximity, and far background by intensity and distance from the
nodule center.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .ctdata import NoduleAnnotation, Volume, rasterize_nodule

EPSILON = 1e-3
CLASSES = ("nodule", "high_bg", "low_bg")
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PatchSpec:
    size: int = 64
    depth: int = 3

    def __post_init__(self):
        if self.size % 2 or self.size < 16:
            raise ValueError(f"patch side must be even and >= 16, got {self.size}")


@dataclass
class SamplingRegions:
    nodule: np.ndarray  # bool (H, W)
    high_bg: np.ndarray
    low_bg: np.ndarray
    center: tuple[int, int]

    def region(self, cls: str) -> np.ndarray:
        return getattr(self, cls)


@dataclass
class ClassWeights:
    cls: str
    coords: np.ndarray  # (k, 2) int rows/cols
    weights: np.ndarray  # (k,) float64, sums to 1

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class SampleBudget:
    n_nodule: int
    n_high_bg: int
    n_low_bg: int

    @property
    def total(self) -> int:
        return self.n_nodule + self.n_high_bg + self.n_low_bg

    def count(self, cls: str) -> int:
        return {"nodule": self.n_nodule, "high_bg": self.n_high_bg, "low_bg": self.n_low_bg}[cls]


@dataclass(frozen=True)
class SampleCenter:
    scan_id: str
    z: int
    y: int
    x: int
    cls: str


def extract_edge_set(mask_slice) -> np.ndarray:
    """Coordinates of set voxels having at least one unset 8-neighbour.

    Voxels outside the grid count as unset. Returns an ``(k, 2)`` array of
    (row, col) pairs in row-major order.
    """
    mask = np.asarray(mask_slice, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("edge extraction works on 2D slices")
    if not mask.any():
        raise ValueError("cannot extract edges of an empty mask")
    interior = ndimage.binary_erosion(mask, structure=_EIGHT, border_value=0)
    return np.argwhere(mask & ~interior)


def edge_distance_field(shape, edge_coords) -> np.ndarray:
    """Euclidean in-plane distance from every pixel to its nearest edge pixel."""
    not_edge = np.ones(shape, dtype=bool)
    not_edge[edge_coords[:, 0], edge_coords[:, 1]] = False
    return ndimage.distance_transform_edt(not_edge)


def partition_regions(mask_slice, patch_spec: PatchSpec = PatchSpec(), center=None) -> SamplingRegions:
    """Split a slice into nodule, near-background and far-background regions.

    ``center`` is the nodule center projected to this slice; it defaults to
    the rounded centroid of the slice mask.
    """
    mask = np.asarray(mask_slice, dtype=bool)
    if not mask.any():
        raise ValueError("slice has no nodule voxels")
    rows, cols = np.nonzero(mask)
    grow = math.ceil(patch_spec.size / 2)
    h, w = mask.shape
    r0, r1 = max(rows.min() - grow, 0), min(rows.max() + grow, h - 1)
    c0, c1 = max(cols.min() - grow, 0), min(cols.max() + grow, w - 1)
    box = np.zeros_like(mask)
    box[r0:r1 + 1, c0:c1 + 1] = True
    high_bg = box & ~mask
    low_bg = ~box
    if center is None:
        center = (int(round(rows.mean())), int(round(cols.mean())))
    return SamplingRegions(nodule=mask, high_bg=high_bg, low_bg=low_bg, center=tuple(int(c) for c in center))


def class_weights(
    regions: SamplingRegions,
    cls: str,
    edge_coords: np.ndarray,
    radius: float,
    intensities: np.ndarray,
    *,
    exclude: np.ndarray | None = None,
    strategy: str = "proposed",
    edge_distance: np.ndarray | None = None,
) -> ClassWeights:
    """Normalized sampling weights over one class region of a slice.

    The nodule and near-background weights decay as ``exp(-d/r)`` with the
    distance ``d`` to the nearest edge pixel, so pixels close to the boundary
    are drawn more often. ``strategy="uniform"`` gives every pixel of the
    region the same weight. ``exclude`` removes pixels (e.g. other nodules)
    from the background pools.
    """
    if cls not in CLASSES:
        raise ValueError(f"unknown class {cls!r}")
    if radius <= 0:
        raise ValueError("nodule radius must be positive")
    region = regions.region(cls)
    if exclude is not None and cls != "nodule":
        region = region & ~np.asarray(exclude, dtype=bool)
    coords = np.argwhere(region)
    if len(coords) == 0:
        raise ValueError(f"{cls} region is empty")

    if strategy == "uniform":
        return ClassWeights(cls, coords, np.full(len(coords), 1.0 / len(coords)))
    if strategy != "proposed":
        raise ValueError(f"unknown sampling strategy {strategy!r}")

    rr, cc = coords[:, 0], coords[:, 1]
    if cls == "low_bg":
        dist = np.hypot(rr - regions.center[0], cc - regions.center[1])
        mass = (intensities[rr, cc].astype(np.float64) + EPSILON) * dist
    else:
        if edge_distance is None:
            edge_distance = edge_distance_field(region.shape, edge_coords)
        d = edge_distance[rr, cc]
        # shift by the minimum so the largest term is exp(0); cancels on normalization
        mass = np.exp(-(d - d.min()) / radius)
        if cls == "high_bg":
            mass = mass * (intensities[rr, cc].astype(np.float64) + EPSILON)
    total = mass.sum()
    if not total > 0:
        raise ValueError(f"{cls} weights have no mass")
    return ClassWeights(cls, coords, mass / total)


def sample_budget(n_edge_voxels: int) -> SampleBudget:
    n = int(n_edge_voxels)
    if n < 1:
        raise ValueError("sample budget needs at least one edge voxel")
    return SampleBudget(n, n, math.ceil(n / 2))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def draw_centers(weights: ClassWeights, count: int, rng_seed=0) -> np.ndarray:
    """Weighted draw of ``count`` pool coordinates.

    Draws without replacement while the pool (restricted to non-zero weights)
    is large enough, otherwise with replacement.
    """
    if len(weights) == 0:
        raise ValueError("cannot draw from an empty pool")
    if count < 1:
        raise ValueError("count must be positive")
    rng = _rng(rng_seed)
    replace = count > int(np.count_nonzero(weights.weights))
    idx = rng.choice(len(weights), size=count, replace=replace, p=weights.weights)
    return weights.coords[idx]


def nodule_radius_voxels(annotation: NoduleAnnotation, volume: Volume) -> float:
    in_plane = 0.5 * (volume.spacing[1] + volume.spacing[2])
    return annotation.diameter_mm / 2.0 / in_plane


def sample_scan(
    volume: Volume,
    normalized: np.ndarray,
    annotations: list[NoduleAnnotation],
    *,
    patch_spec: PatchSpec = PatchSpec(),
    strategy: str = "proposed",
    budget_scale: float = 1.0,
    seed=0,
) -> list[SampleCenter]:
    """Draw patch centers for every nodule slice of one scan.

    ``budget_scale`` shrinks the per-slice budget proportionally (rounding up,
    so every class keeps at least one draw).
    """
    rng = _rng(seed)
    centers: list[SampleCenter] = []
    masks = [rasterize_nodule(volume, ann).astype(bool) for ann in annotations]
    all_nodules = np.any(masks, axis=0) if masks else np.zeros(volume.shape, bool)
    for ann, mask in zip(annotations, masks):
        radius = nodule_radius_voxels(ann, volume)
        centroid = np.argwhere(mask).mean(axis=0)
        center_2d = (int(round(centroid[1])), int(round(centroid[2])))
        for z in np.nonzero(mask.any(axis=(1, 2)))[0]:
            sl = mask[z]
            edges = extract_edge_set(sl)
            regions = partition_regions(sl, patch_spec, center=center_2d)
            budget = sample_budget(len(edges))
            dist = edge_distance_field(sl.shape, edges)
            others = all_nodules[z] & ~sl
            for cls in CLASSES:
                count = max(1, math.ceil(budget.count(cls) * budget_scale))
                try:
                    w = class_weights(regions, cls, edges, radius, normalized[z], exclude=others,
                                      strategy=strategy, edge_distance=dist)
                except ValueError:
                    continue  # region fully clipped away on this slice
                for r, c in draw_centers(w, count, rng):
                    centers.append(SampleCenter(volume.scan_id, int(z), int(r), int(c), cls))
    return centers


SAMPLE_HEADER = ["scan_id", "z", "y", "x", "class"]


def write_centers(centers, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SAMPLE_HEADER)
        for c in centers:
            writer.writerow([c.scan_id, c.z, c.y, c.x, c.cls])


def read_centers(path) -> list[SampleCenter]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [SampleCenter(r["scan_id"], int(r["z"]), int(r["y"]), int(r["x"]), r["class"]) for r in reader]

