"""Candidate patches, augmentation and SGD training for the 3D classifiers."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .fprnet import Classifier, ClassifierConfig
from .segnet import TrainHistory, crop_window, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

PATCH = 40
CLAMP = 1e-7


@dataclass(frozen=True)
class ClfTrainSpec:
    lr: float = 1e-3
    decay: float = 0.9
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("learning-rate decay must lie in (0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** epoch


@dataclass(frozen=True)
class MaskSwapSpec:
    fraction: float = 0.05
    seed: int = 0

    def swap_count(self, n_negatives: int) -> int:
        return math.ceil(self.fraction * n_negatives)


def extract_cube(normalized: np.ndarray, center, size: int = PATCH) -> np.ndarray:
    """``size``^3 crop centred on a voxel, zero-padded where it leaves the grid."""
    z, y, x = (int(round(c)) for c in center)
    z0 = z - size // 2
    nz = normalized.shape[0]
    slab = np.zeros((size, *normalized.shape[1:]), dtype=np.float32)
    s0, s1 = max(z0, 0), min(z0 + size, nz)
    if s0 < s1:
        slab[s0 - z0:s1 - z0] = normalized[s0:s1]
    return crop_window(slab, y - size // 2, x - size // 2, size)


# --------------------------------------------------------------------------
# Augmentation


def translate(patch: np.ndarray, axis: int, step: int) -> np.ndarray:
    """Shift by ``step`` voxels along ``axis``, repeating the edge plane."""
    n = patch.shape[axis]
    idx = np.clip(np.arange(n) - step, 0, n - 1)
    return np.take(patch, idx, axis=axis)


def geometric_augment(patch: np.ndarray) -> list[np.ndarray]:
    """Identity, three axial rotations and six one-voxel translations (10 patches)."""
    if len(set(patch.shape)) != 1 or patch.ndim != 3:
        raise ValueError("geometric augmentation expects a cubic patch")
    out = [patch]
    out += [np.rot90(patch, k, axes=(1, 2)).copy() for k in (1, 2, 3)]
    for axis in range(3):
        for step in (1, -1):
            out.append(translate(patch, axis, step))
    return out


def central_block(size: int, d: int) -> tuple[slice, slice, slice]:
    s = (size - d) // 2
    return (slice(s, s + d),) * 3


@dataclass
class SwapRecord:
    kind: str  # "positive" (nodule pasted into a negative) or "negative" (nodule erased)
    donor: int
    host: int
    d: int


def random_mask_swap(
    positives: np.ndarray,
    negatives: np.ndarray,
    diameters_vox,
    spec: MaskSwapSpec = MaskSwapSpec(),
    max_redraws: int = 100,
):
    """Mint new positives and negatives by moving or erasing central nodule cubes.

    New positive: a negative patch whose central ``D^3`` block is replaced by
    the same block of a positive (``D`` = that nodule's diameter in voxels).
    New negative: a positive patch whose central ``D^3`` block is zeroed.
    Returns ``(new_pos, new_neg, records)`` with ``T = ceil(5% of negatives)``
    of each.
    """
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError("random mask swap needs both positives and negatives")
    rng = np.random.default_rng(spec.seed)
    size = positives.shape[-1]
    diam = np.maximum(1, np.rint(np.asarray(diameters_vox, dtype=float))).astype(int)
    t = spec.swap_count(len(negatives))

    def draw_positive():
        for _ in range(max_redraws):
            i = int(rng.integers(len(positives)))
            if diam[i] <= size:
                return i
        raise ValueError("no positive has a nodule small enough for the patch")

    new_pos, new_neg, records = [], [], []
    hosts = rng.choice(len(negatives), size=t, replace=t > len(negatives))
    for host in hosts:
        donor = draw_positive()
        block = central_block(size, diam[donor])
        patch = negatives[host].copy()
        patch[block] = positives[donor][block]
        new_pos.append(patch)
        records.append(SwapRecord("positive", donor, int(host), int(diam[donor])))
    for _ in range(t):
        donor = draw_positive()
        patch = positives[donor].copy()
        patch[central_block(size, diam[donor])] = 0.0
        new_neg.append(patch)
        records.append(SwapRecord("negative", donor, donor, int(diam[donor])))
    return np.stack(new_pos), np.stack(new_neg), records


def write_swap_manifest(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "donor", "host", "d"])
        for r in records:
            writer.writerow([r.kind, r.donor, r.host, r.d])


# --------------------------------------------------------------------------
# Loss and training


def cross_entropy_loss(labels, probs, clamp: float = CLAMP):
    """Mean binary cross-entropy of nodule probabilities, clamped away from 0 and 1."""
    y = torch.as_tensor(labels)
    p = probs if isinstance(probs, torch.Tensor) else torch.as_tensor(probs, dtype=torch.float64)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {tuple(y.shape)} vs {tuple(p.shape)}")
    if not p.is_floating_point():
        p = p.double()
    y = y.to(p.dtype)
    p = p.clamp(clamp, 1.0 - clamp)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


@dataclass
class LabeledPatches:
    patches: np.ndarray  # (N, 40, 40, 40) float32
    labels: np.ndarray  # (N,) int

    def __len__(self):
        return len(self.labels)


def train_classifier(model: Classifier, data: LabeledPatches, spec: ClfTrainSpec = ClfTrainSpec()):
    """SGD with momentum on the binary cross-entropy, learning rate decayed each epoch."""
    labels = np.asarray(data.labels).astype(int)
    if len(np.unique(labels)) < 2:
        raise ValueError("classifier training needs both classes")
    torch.manual_seed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    dtype = next(model.parameters()).dtype
    x_all = torch.from_numpy(np.ascontiguousarray(data.patches, dtype=np.float32)).to(dtype)
    y_all = torch.from_numpy(labels)
    optimizer = torch.optim.SGD(model.parameters(), lr=spec.lr, momentum=spec.momentum)
    history = TrainHistory(meta={"optimizer": "sgd", "lr": spec.lr, "decay": spec.decay, "momentum": spec.momentum})
    for epoch in range(spec.epochs):
        lr = spec.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(len(labels))
        total, correct, seen = 0.0, 0, 0
        for i in range(0, len(order), spec.batch_size):
            idx = torch.from_numpy(order[i:i + spec.batch_size])
            if len(idx) < 2:
                continue
            optimizer.zero_grad()
            prob = model.predict_proba(x_all[idx])[:, 1]
            loss = cross_entropy_loss(y_all[idx], prob)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            correct += int(((prob.detach() >= 0.5).long() == y_all[idx]).sum())
            seen += len(idx)
        history.rows.append({"epoch": epoch, "lr": lr, "train_loss": total / max(seen, 1),
                             "train_acc": correct / max(seen, 1)})
        log.info("clf %s epoch %d lr %.2e loss %.4f acc %.3f", model.config.variant, epoch, lr,
                 history.rows[-1]["train_loss"], history.rows[-1]["train_acc"])
    model.eval()
    return model, history


def predict(model: Classifier, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(patches), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(patches[i:i + batch_size], dtype=np.float32)).to(dtype)
            out.append(model.predict_proba(x)[:, 1].double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def save_classifier(model: Classifier, path) -> None:
    save_checkpoint(model, path, "classifier", model.config)


def load_classifier(path) -> Classifier:
    payload = read_checkpoint(path, "classifier")
    cfg = dict(payload["config"])
    for key in ("seres_blocks", "dense_layers", "incep_blocks"):
        cfg[key] = tuple(tuple(v) if isinstance(v, list) else v for v in cfg[key])
    model = Classifier(ClassifierConfig(**cfg))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model

