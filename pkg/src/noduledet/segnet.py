"""Residual-dense UNet for slice-wise nodule segmentation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SegModelConfig:
    features: tuple[int, ...] = (8, 16, 32, 32, 16, 8)
    dense_units: int = 6
    in_channels: int = 3

    def __post_init__(self):
        if len(self.features) != 6:
            raise ValueError("the segmentation net has exactly six residual dense blocks")
        if tuple(self.features) != tuple(reversed(self.features)):
            raise ValueError(f"feature counts must be symmetric, got {self.features}")


@dataclass(frozen=True)
class SegTrainSpec:
    lr: float = 1e-4
    finetune_lr: float = 1e-5
    batch_size: int = 64
    max_epochs: int = 15
    patience: int = 5
    val_fraction: float = 0.1
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than the epoch cap")
        if self.eta <= 0:
            raise ValueError("dice smoothing constant must be positive")


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Network


class DenseUnit(nn.Sequential):
    def __init__(self, in_channels, growth):
        super().__init__(
            nn.BatchNorm2d(in_channels),
            nn.PReLU(in_channels),
            nn.Conv2d(in_channels, growth, 3, padding=1),
        )

    def forward(self, x):
        return torch.cat([x, super().forward(x)], dim=1)


class ResDenseBlock(nn.Module):
    """1x1 projection to ``n`` maps, ``units`` dense units, 1x1 back to ``n``, plus residual."""

    def __init__(self, in_channels, n, units=6):
        super().__init__()
        self.project = nn.Conv2d(in_channels, n, 1)
        self.dense = nn.Sequential(*[DenseUnit(n * (i + 1), n) for i in range(units)])
        self.fuse = nn.Conv2d(n * (units + 1), n, 1)
        self.out_channels = n

    def forward(self, x):
        x = self.project(x)
        return x + self.fuse(self.dense(x))


class SamePool(nn.Module):
    """3x3 stride-2 max pooling with TensorFlow-style 'same' padding."""

    def forward(self, x):
        h, w = x.shape[-2:]
        pad_h = max((math.ceil(h / 2) - 1) * 2 + 3 - h, 0)
        pad_w = max((math.ceil(w / 2) - 1) * 2 + 3 - w, 0)
        x = F.pad(x, (pad_w // 2, pad_w - pad_w // 2, pad_h // 2, pad_h - pad_h // 2), value=float("-inf"))
        return F.max_pool2d(x, 3, stride=2)


class ResDenseUNet(nn.Module):
    def __init__(self, config: SegModelConfig = SegModelConfig()):
        super().__init__()
        self.config = config
        f = config.features
        u = config.dense_units
        self.enc = nn.ModuleList()
        ch = config.in_channels
        for n in f[:3]:
            self.enc.append(ResDenseBlock(ch, n, u))
            ch = n
        self.pool = SamePool()
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i, n in enumerate(f[3:]):
            skip = f[2 - i]
            self.up.append(nn.ConvTranspose2d(ch, n, 3, stride=2, padding=1, output_padding=1))
            self.dec.append(ResDenseBlock(n + skip, n, u))
            ch = n
        self.head = nn.Conv2d(ch, 1, 1)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError(f"in-plane size must be even, got {tuple(x.shape[-2:])}")
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        for up, block, skip in zip(self.up, self.dec, reversed(skips)):
            x = up(x)[..., : skip.shape[-2], : skip.shape[-1]]
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


def build_seg_model(config: SegModelConfig = SegModelConfig()) -> ResDenseUNet:
    return ResDenseUNet(config)


# --------------------------------------------------------------------------
# Loss


def dice_loss(gt, seg, eta: float = 1.0):
    """Smoothed Dice loss ``1 - (2|G.S| + eta) / (|G| + |S| + eta)`` over the whole map.

    Uses the soft intersection ``sum(gt * seg)``. Accepts tensors or arrays.
    """
    gt = torch.as_tensor(gt)
    seg = torch.as_tensor(seg)
    if gt.shape != seg.shape:
        raise ValueError(f"shape mismatch: {tuple(gt.shape)} vs {tuple(seg.shape)}")
    gt = gt.to(seg.dtype) if seg.is_floating_point() else gt.double()
    seg = seg if seg.is_floating_point() else seg.double()
    inter = (gt * seg).sum()
    return 1.0 - (2.0 * inter + eta) / (gt.sum() + seg.sum() + eta)


def batch_dice_loss(gt, seg, eta: float = 1.0):
    """Mean of the per-sample Dice losses of a batch ``(B, ...)``."""
    gt = gt.to(seg.dtype).flatten(1)
    seg = seg.flatten(1)
    inter = (gt * seg).sum(1)
    return (1.0 - (2.0 * inter + eta) / (gt.sum(1) + seg.sum(1) + eta)).mean()


# --------------------------------------------------------------------------
# Patches


@dataclass
class TrainingPatch:
    image: np.ndarray  # (3, L, L) float32 in [0, 1]
    label: np.ndarray  # (L, L) uint8
    positive: bool


def crop_window(array2d_stack, y0: int, x0: int, size: int) -> np.ndarray:
    """Crop ``[y0, y0+size) x [x0, x0+size)`` from the last two axes, zero-padding outside."""
    *lead, h, w = array2d_stack.shape
    out = np.zeros((*lead, size, size), dtype=array2d_stack.dtype)
    sy0, sy1 = max(y0, 0), min(y0 + size, h)
    sx0, sx1 = max(x0, 0), min(x0 + size, w)
    if sy0 < sy1 and sx0 < sx1:
        out[..., sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = array2d_stack[..., sy0:sy1, sx0:sx1]
    return out


def slice_triplet(volume: np.ndarray, z: int) -> np.ndarray:
    """Slices ``z-1, z, z+1`` with edge slices repeated past the ends."""
    idx = np.clip([z - 1, z, z + 1], 0, volume.shape[0] - 1)
    return volume[idx]


def extract_training_patch(normalized: np.ndarray, mask: np.ndarray, center, size: int = 64) -> TrainingPatch:
    z, y, x = (int(c) for c in center)
    y0, x0 = y - size // 2, x - size // 2
    image = crop_window(slice_triplet(normalized, z), y0, x0, size).astype(np.float32)
    label = crop_window(mask[z], y0, x0, size).astype(np.uint8)
    return TrainingPatch(image=image, label=label, positive=bool(label.any()))


def stack_patches(patches: list[TrainingPatch]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([p.image for p in patches]))
    labels = torch.from_numpy(np.stack([p.label for p in patches])[:, None].astype(np.float32))
    return images, labels


# --------------------------------------------------------------------------
# Training


class EarlyStopping:
    """Stops after ``patience`` epochs without a validation improvement."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; return True when training should stop."""
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path, columns=("epoch", "train_loss", "val_loss")) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if self.meta:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in self.meta.items()) + "\n")
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in self.rows:
                writer.writerow([_fmt(row[c]) for c in columns])


def _fmt(v):
    return f"{v:.8g}" if isinstance(v, float) else v


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(round(n * fraction)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 else 0), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _evaluate(model, images, labels, batch_size, eta):
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            pred = model(images[i:i + batch_size])
            total += float(batch_dice_loss(labels[i:i + batch_size], pred, eta)) * len(pred)
    return total / max(len(images), 1)


def train_segmentation(
    model: nn.Module,
    patches: list[TrainingPatch],
    spec: SegTrainSpec = SegTrainSpec(),
    *,
    lr: float | None = None,
    restore_best: bool = True,
) -> tuple[nn.Module, TrainHistory]:
    """Adam on the mean Dice loss with early stopping on a held-out split.

    ``lr`` overrides ``spec.lr`` (fine-tuning passes ``spec.finetune_lr``).
    The weights of the best validation epoch are restored at the end.
    """
    if not patches:
        raise TrainingError("no training patches")
    lr = spec.lr if lr is None else lr
    torch.manual_seed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    images, labels = stack_patches(patches)
    dtype = next(model.parameters()).dtype
    images, labels = images.to(dtype), labels.to(dtype)
    train_idx, val_idx = split_validation(len(patches), spec.val_fraction, spec.seed)

    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    stopper = EarlyStopping(spec.patience)
    history = TrainHistory(meta={"optimizer": "adam", "lr": lr, "batch_size": spec.batch_size})
    best_state = None
    for epoch in range(spec.max_epochs):
        model.train()
        order = rng.permutation(train_idx)
        running, seen = 0.0, 0
        for i in range(0, len(order), spec.batch_size):
            batch = torch.from_numpy(order[i:i + spec.batch_size])
            if len(batch) < 2:
                continue  # batch norm needs more than one sample
            optimizer.zero_grad()
            loss = batch_dice_loss(labels[batch], model(images[batch]), spec.eta)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {i // spec.batch_size}")
            loss.backward()
            optimizer.step()
            running += loss.item() * len(batch)
            seen += len(batch)
        train_loss = running / max(seen, 1)
        if len(val_idx):
            val_loss = _evaluate(model, images[val_idx], labels[val_idx], spec.batch_size, spec.eta)
        else:
            val_loss = train_loss
        history.rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("seg epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        stop = stopper.step(epoch, val_loss)
        if stopper.best_epoch == epoch and restore_best:
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if stop:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: nn.Module, path, kind: str, config) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": kind,
            "config": _plain(asdict(config)),
            "state_dict": model.state_dict(),
        },
        path,
    )


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def read_checkpoint(path, kind: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    if payload.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")
    return payload


def load_seg_model(path) -> ResDenseUNet:
    payload = read_checkpoint(path, "segmentation")
    cfg = payload["config"]
    config = SegModelConfig(features=tuple(cfg["features"]), dense_units=cfg["dense_units"],
                            in_channels=cfg["in_channels"])
    model = ResDenseUNet(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
