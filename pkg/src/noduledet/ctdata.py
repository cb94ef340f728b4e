"""CT volume and annotation I/O, coordinate transforms and synthetic phantoms.

Grids are stored in (z, y, x) order. World coordinates, origins and spacings
are also kept as (z, y, x) triples internally; the MetaImage header and the
annotation CSV use x, y, z order and are reordered on the way in and out.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

HU_WINDOW = (-1000.0, 400.0)
MAX_DIAMETER_MM = 64.0

_ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass
class Volume:
    scan_id: str
    voxels: np.ndarray
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.origin = tuple(float(v) for v in self.origin)
        self.spacing = tuple(float(v) for v in self.spacing)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise DataError(f"volume grid must be 3D and non-empty, got {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.voxels)):
            raise DataError("volume contains non-finite voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class NoduleAnnotation:
    scan_id: str
    center_world: tuple[float, float, float]  # (z, y, x) mm
    diameter_mm: float

    def __post_init__(self):
        object.__setattr__(self, "center_world", tuple(float(c) for c in self.center_world))
        object.__setattr__(self, "diameter_mm", float(self.diameter_mm))
        if not (0 < self.diameter_mm <= MAX_DIAMETER_MM):
            raise DataError(f"diameter must be in (0, {MAX_DIAMETER_MM}] mm, got {self.diameter_mm}")


# --------------------------------------------------------------------------
# MetaImage-style volumes


def _parse_header(path: Path) -> dict[str, str]:
    header = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    return header


def load_volume(path, scan_id: str | None = None) -> Volume:
    """Read a ``.mhd`` header and the raw voxel file it references."""
    path = Path(path)
    try:
        header = _parse_header(path)
    except OSError as exc:
        raise DataError(f"cannot read header {path}: {exc}") from exc

    if header.get("NDims", "3") != "3":
        raise DataError(f"only 3D volumes are supported, got NDims={header['NDims']}")
    try:
        dims_xyz = [int(v) for v in header["DimSize"].split()]
        etype = header["ElementType"]
        data_name = header["ElementDataFile"]
    except KeyError as exc:
        raise DataError(f"header {path} lacks required key {exc}") from exc
    offset_xyz = [float(v) for v in header.get("Offset", "0 0 0").split()]
    spacing_xyz = [float(v) for v in header.get("ElementSpacing", "1 1 1").split()]
    if etype not in _ELEMENT_TYPES:
        raise DataError(f"unsupported element type {etype}")
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise DataError("big-endian raw data is not supported")

    raw_path = path.parent / data_name
    if not raw_path.is_file():
        raise DataError(f"raw data missing: {raw_path}")
    dtype = _ELEMENT_TYPES[etype]
    expected = int(np.prod(dims_xyz)) * dtype.itemsize
    actual = raw_path.stat().st_size
    if actual != expected:
        raise DataError(f"raw file {raw_path} has {actual} bytes, header implies {expected}")

    flat = np.fromfile(raw_path, dtype=dtype)
    voxels = flat.reshape(dims_xyz[::-1]).astype(dtype.newbyteorder("="))
    return Volume(
        scan_id=scan_id or path.stem,
        voxels=voxels,
        origin=tuple(offset_xyz[::-1]),
        spacing=tuple(spacing_xyz[::-1]),
    )


def save_volume(volume: Volume, path) -> Path:
    """Write ``volume`` as a header plus a little-endian raw file next to it."""
    path = Path(path)
    if volume.voxels.dtype == np.int16:
        etype = "MET_SHORT"
    else:
        etype = "MET_FLOAT"
    dtype = _ELEMENT_TYPES[etype]
    raw_path = path.with_suffix(".raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(volume.voxels, dtype=dtype).tofile(raw_path)
    fmt = lambda vals: " ".join(repr(float(v)) for v in vals)  # noqa: E731
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"Offset = {fmt(volume.origin[::-1])}",
        f"ElementSpacing = {fmt(volume.spacing[::-1])}",
        "DimSize = " + " ".join(str(d) for d in volume.shape[::-1]),
        f"ElementType = {etype}",
        f"ElementDataFile = {raw_path.name}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Annotations

ANNOTATION_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"]


def load_annotations(path) -> list[NoduleAnnotation]:
    annotations = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return annotations
        if [h.strip() for h in header[:5]] != ANNOTATION_HEADER:
            raise DataError(f"{path}: line 1: expected header {','.join(ANNOTATION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 5:
                raise DataError(f"{path}: line {lineno}: expected 5 fields, got {len(row)}")
            try:
                x, y, z, d = (float(v) for v in row[1:5])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
            if not (d > 0):
                raise DataError(f"{path}: line {lineno}: diameter must be positive, got {d}")
            try:
                annotations.append(NoduleAnnotation(row[0].strip(), (z, y, x), d))
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    return annotations


def write_annotations(annotations, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for ann in annotations:
            z, y, x = ann.center_world
            writer.writerow([ann.scan_id, repr(x), repr(y), repr(z), repr(ann.diameter_mm)])


# --------------------------------------------------------------------------
# Geometry


def world_to_voxel(volume: Volume, world) -> np.ndarray:
    """Continuous (z, y, x) voxel coordinates of a world point."""
    return (np.asarray(world, dtype=float) - np.asarray(volume.origin)) / np.asarray(volume.spacing)


def voxel_to_world(volume: Volume, voxel) -> np.ndarray:
    return np.asarray(voxel, dtype=float) * np.asarray(volume.spacing) + np.asarray(volume.origin)


def inside_grid(volume: Volume, voxel) -> bool:
    v = np.asarray(voxel, dtype=float)
    return bool(np.all(v >= -0.5) and np.all(v < np.asarray(volume.shape) - 0.5))


def normalize_hu(volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> np.ndarray:
    """Map HU linearly onto [0, 1] over the window ``[lo, hi]``, clipping outside it.

    Accepts a :class:`Volume` or a raw array and returns a float32 array.
    """
    if lo >= hi:
        raise ValueError(f"window lower bound {lo} must be below upper bound {hi}")
    hu = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
    out = (hu.astype(np.float32) - np.float32(lo)) / np.float32(hi - lo)
    return np.clip(out, 0.0, 1.0)


def rasterize_nodule(volume: Volume, annotation: NoduleAnnotation, out: np.ndarray | None = None) -> np.ndarray:
    """Solid-sphere mask of an annotation on the volume grid.

    A voxel is set when its center lies within ``diameter/2`` mm of the
    annotation center. Spheres thinner than the voxel pitch fall back to the
    single nearest voxel. ``out`` (uint8, volume-shaped) is OR-ed into when given.
    """
    mask = np.zeros(volume.shape, dtype=np.uint8) if out is None else out
    spacing = np.asarray(volume.spacing)
    center = world_to_voxel(volume, annotation.center_world)
    radius = annotation.diameter_mm / 2.0
    reach = radius / spacing
    lo = np.maximum(np.floor(center - reach).astype(int), 0)
    hi = np.minimum(np.ceil(center + reach).astype(int) + 1, np.asarray(volume.shape))
    if np.any(lo >= hi):
        raise DataError(f"nodule at {annotation.center_world} lies entirely outside the grid")

    zz, yy, xx = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    dist2 = (
        ((zz - center[0]) * spacing[0]) ** 2
        + ((yy - center[1]) * spacing[1]) ** 2
        + ((xx - center[2]) * spacing[2]) ** 2
    )
    inside = dist2 <= radius ** 2
    if inside.any():
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= inside.astype(np.uint8)
        return mask

    nearest = np.rint(center).astype(int)
    if not inside_grid(volume, nearest):
        raise DataError(f"nodule at {annotation.center_world} lies entirely outside the grid")
    mask[tuple(nearest)] = 1
    return mask


def rasterize_annotations(volume: Volume, annotations) -> np.ndarray:
    mask = np.zeros(volume.shape, dtype=np.uint8)
    for ann in annotations:
        rasterize_nodule(volume, ann, out=mask)
    return mask


# --------------------------------------------------------------------------
# Synthetic phantoms


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Desk-scale chest phantom parameters.

    HU levels and structure sizes are artifact constants chosen to look
    roughly like lung CT, not measured values.
    """

    shape: tuple[int, int, int] = (32, 128, 128)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    parenchyma_hu: float = -850.0
    noise_sigma: float = 25.0
    wall_hu: float = 0.0
    vessel_hu: float = -50.0
    nodule_count: tuple[int, int] = (1, 3)
    diameter_mm: tuple[float, float] = (5.0, 12.0)
    frac_juxtapleural: float = 0.2
    frac_cavitary: float = 0.1
    frac_low_contrast: float = 0.15
    vessel_count: tuple[int, int] = (4, 8)
    vessel_radius_mm: tuple[float, float] = (0.8, 1.8)
    blur_sigma: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"phantom shape too small: {self.shape}")
        for name in ("nodule_count", "diameter_mm", "vessel_count", "vessel_radius_mm"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range is empty or negative: {(lo, hi)}")
        fracs = (self.frac_juxtapleural, self.frac_cavitary, self.frac_low_contrast)
        if any(not 0.0 <= f <= 1.0 for f in fracs) or sum(fracs) > 1.0 + 1e-12:
            raise ValueError(f"nodule type fractions must lie in [0,1] and sum to <= 1, got {fracs}")
        if self.diameter_mm[0] <= 0:
            raise ValueError("nodule diameters must be positive")

    def with_seed(self, seed: int) -> "PhantomSpec":
        from dataclasses import replace

        return replace(self, seed=seed)


@dataclass
class Phantom:
    volume: Volume
    annotations: list[NoduleAnnotation]
    mask: np.ndarray
    lung: np.ndarray = field(repr=False)
    kinds: list[str] = field(default_factory=list)


def _lung_mask(shape) -> np.ndarray:
    nz, ny, nx = shape
    yy, xx = np.ogrid[:ny, :nx]
    cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
    ay, ax = 0.40 * ny, 0.42 * nx
    section = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    return np.broadcast_to(section, shape).copy()


def _draw_vessel(hu, lung, rng, spec, spacing):
    nz, ny, nx = hu.shape
    lung_idx = np.argwhere(lung)
    a = lung_idx[rng.integers(len(lung_idx))].astype(float)
    b = lung_idx[rng.integers(len(lung_idx))].astype(float)
    radius = rng.uniform(*spec.vessel_radius_mm)
    seg = b - a
    seg_mm = seg * spacing
    length2 = float(seg_mm @ seg_mm)
    pad = np.ceil(radius / spacing).astype(int) + 1
    lo = np.maximum(np.minimum(a, b).astype(int) - pad, 0)
    hi = np.minimum(np.maximum(a, b).astype(int) + pad + 1, hu.shape)
    zz, yy, xx = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    rel = [(zz - a[0]) * spacing[0], (yy - a[1]) * spacing[1], (xx - a[2]) * spacing[2]]
    if length2 > 0:
        t = (rel[0] * seg_mm[0] + rel[1] * seg_mm[1] + rel[2] * seg_mm[2]) / length2
        t = np.clip(t, 0.0, 1.0)
    else:
        t = np.zeros(1)
    d2 = sum((r - t * s) ** 2 for r, s in zip(rel, seg_mm))
    inside = (d2 <= radius ** 2) & lung[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    region = hu[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    region[inside] = spec.vessel_hu


def generate_phantom(spec: PhantomSpec, scan_id: str | None = None, max_retries: int = 500) -> Phantom:
    """Build a deterministic chest phantom with labelled nodules.

    The lung is an elliptic cylinder of noisy parenchyma inside a soft-tissue
    wall. Vessels are random cylinders, nodules are spheres which may be
    juxtapleural (touching the wall), cavitary (air core) or low-contrast.
    """
    rng = np.random.default_rng(spec.seed)
    scan_id = scan_id or f"phantom-{spec.seed:05d}"
    shape = tuple(int(s) for s in spec.shape)
    spacing = np.asarray(spec.spacing, dtype=float)
    origin = tuple(-0.5 * (n - 1) * s for n, s in zip(shape, spacing))

    lung = _lung_mask(shape)
    hu = np.full(shape, spec.wall_hu, dtype=np.float64)
    hu[lung] = spec.parenchyma_hu

    for _ in range(int(rng.integers(spec.vessel_count[0], spec.vessel_count[1] + 1))):
        _draw_vessel(hu, lung, rng, spec, spacing)

    # distance (mm) from each lung voxel to the in-plane wall
    wall_dist = ndimage.distance_transform_edt(lung[0], sampling=spacing[1:])
    n_nodules = int(rng.integers(spec.nodule_count[0], spec.nodule_count[1] + 1))
    volume_stub = Volume(scan_id, np.zeros((1, 1, 1), np.int16), origin, tuple(spacing))

    placed: list[tuple[np.ndarray, float]] = []
    annotations: list[NoduleAnnotation] = []
    kinds: list[str] = []
    for _ in range(n_nodules):
        u = rng.uniform()
        if u < spec.frac_juxtapleural:
            kind = "juxtapleural"
        elif u < spec.frac_juxtapleural + spec.frac_cavitary:
            kind = "cavitary"
        elif u < spec.frac_juxtapleural + spec.frac_cavitary + spec.frac_low_contrast:
            kind = "low_contrast"
        else:
            kind = "solid"
        for _attempt in range(max_retries):
            diameter = float(rng.uniform(*spec.diameter_mm))
            radius = diameter / 2.0
            rz = radius / spacing[0]
            if kind == "juxtapleural":
                ok = (wall_dist >= radius) & (wall_dist <= radius + 1.0)
            else:
                ok = wall_dist >= radius + 2.0
            cand = np.argwhere(ok)
            z_lo, z_hi = math.ceil(rz) + 1, shape[0] - math.ceil(rz) - 2
            if len(cand) == 0 or z_lo > z_hi:
                continue
            y, x = cand[rng.integers(len(cand))]
            z = int(rng.integers(z_lo, z_hi + 1))
            center = np.array([z, y, x], dtype=float) + rng.uniform(-0.3, 0.3, size=3)
            center_mm = center * spacing
            if any(np.linalg.norm(center_mm - c) < radius + r + 2.0 for c, r in placed):
                continue
            break
        else:
            raise PhantomError(f"could not place {n_nodules} nodules without overlap in {max_retries} tries")

        placed.append((center_mm, radius))
        ann = NoduleAnnotation(scan_id, tuple(voxel_to_world(volume_stub, center)), diameter)
        annotations.append(ann)
        kinds.append(kind)

        sphere = rasterize_nodule(Volume(scan_id, np.zeros(shape, np.int16), origin, tuple(spacing)), ann)
        sphere = sphere.astype(bool)
        if kind == "low_contrast":
            hu[sphere] = spec.parenchyma_hu + rng.uniform(250.0, 400.0)
        else:
            hu[sphere] = rng.uniform(-100.0, 100.0)
        if kind == "cavitary":
            core = NoduleAnnotation(scan_id, ann.center_world, 0.45 * diameter)
            core_mask = rasterize_nodule(Volume(scan_id, np.zeros(shape, np.int16), origin, tuple(spacing)), core)
            hu[core_mask.astype(bool)] = -950.0

    if spec.blur_sigma > 0:
        hu = ndimage.gaussian_filter(hu, spec.blur_sigma / (spacing / spacing.min()))
    hu += rng.normal(0.0, spec.noise_sigma, size=shape)
    voxels = np.clip(np.rint(hu), -1024, 3071).astype(np.int16)

    volume = Volume(scan_id, voxels, origin, tuple(spacing))
    mask = rasterize_annotations(volume, annotations)
    return Phantom(volume=volume, annotations=annotations, mask=mask, lung=lung, kinds=kinds)


def scan_paths(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.mhd"))


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
