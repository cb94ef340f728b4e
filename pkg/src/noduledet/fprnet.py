"""3D false-positive reduction classifiers built around dual pooling.

Dual pooling halves every spatial axis twice over: once with a central
max-pooling grid (fine windows at the center, coarse at the border) and once
by cropping the exact central half-size block. The two results are stacked
along the channel axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("seres", "dense", "incep")
POOLINGS = ("dual", "central", "max")
INPUT_SIZE = 40


# --------------------------------------------------------------------------
# Central pooling geometry


@dataclass(frozen=True)
class PoolSchedule:
    sizes: tuple[int, ...]

    @property
    def starts(self) -> tuple[int, ...]:
        out, pos = [], 0
        for s in self.sizes:
            out.append(pos)
            pos += s
        return tuple(out)

    @property
    def length(self) -> int:
        return sum(self.sizes)

    def window_of(self, index: int) -> int:
        for w, (start, size) in enumerate(zip(self.starts, self.sizes)):
            if start <= index < start + size:
                return w
        raise IndexError(index)


def central_pool_schedule(n: int) -> PoolSchedule:
    """Window sizes for halving an axis of even length ``n`` with central pooling.

    Starting from ``n/2`` windows of size 2, mirrored pairs are rebalanced:
    the innermost size-2 window shrinks to 1 while the outermost size-2
    window grows to 3, until the two meet.
    """
    if n % 2 or n < 4:
        raise ValueError(f"central pooling needs an even axis of length >= 4, got {n}")
    half = [2] * (n // 4)  # left half; a middle window (n/2 odd) stays at 2
    inner, outer = len(half) - 1, 0
    while outer < inner:
        half[inner] = 1
        half[outer] = 3
        inner -= 1
        outer += 1
    middle = [2] if (n // 2) % 2 else []
    return PoolSchedule(tuple(half + middle + half[::-1]))


def _window_index(schedule: PoolSchedule) -> torch.Tensor:
    """(n/2, 3) gather indices; short windows repeat their last index."""
    rows = []
    for start, size in zip(schedule.starts, schedule.sizes):
        rows.append([start + min(k, size - 1) for k in range(3)])
    return torch.tensor(rows, dtype=torch.long)


def central_pool(x: torch.Tensor, spatial_dims: int = 3) -> torch.Tensor:
    """Separable central max pooling over the trailing ``spatial_dims`` axes."""
    for axis in range(x.dim() - spatial_dims, x.dim()):
        n = x.shape[axis]
        schedule = central_pool_schedule(n)
        idx = _window_index(schedule).to(x.device)
        gathered = x.index_select(axis, idx.flatten())
        shape = list(x.shape)
        shape[axis:axis + 1] = [n // 2, 3]
        x = gathered.view(shape).amax(dim=axis + 1)
    return x


def central_crop(x: torch.Tensor, spatial_dims: int = 3) -> torch.Tensor:
    for axis in range(x.dim() - spatial_dims, x.dim()):
        n = x.shape[axis]
        x = x.narrow(axis, (n - n // 2) // 2, n // 2)
    return x


def dual_pool(x: torch.Tensor, spatial_dims: int = 3) -> torch.Tensor:
    """Central pooling and central cropping, concatenated on channels: (B, C, n..) -> (B, 2C, n/2..)."""
    dims = x.shape[-spatial_dims:]
    if any(d % 2 for d in dims) or len(set(dims)) != 1:
        raise ValueError(f"dual pooling needs equal even spatial dims, got {tuple(dims)}")
    return torch.cat([central_pool(x, spatial_dims), central_crop(x, spatial_dims)], dim=1)


class Downsample(nn.Module):
    """Halving step; ``dual`` doubles channels, ``central`` and ``max`` keep them."""

    def __init__(self, mode: str = "dual", spatial_dims: int = 3):
        super().__init__()
        if mode not in POOLINGS:
            raise ValueError(f"unknown pooling {mode!r}")
        self.mode = mode
        self.spatial_dims = spatial_dims

    def channel_factor(self) -> int:
        return 2 if self.mode == "dual" else 1

    def forward(self, x):
        if self.mode == "dual":
            return dual_pool(x, self.spatial_dims)
        if self.mode == "central":
            return central_pool(x, self.spatial_dims)
        pool = F.max_pool3d if self.spatial_dims == 3 else F.max_pool2d
        return pool(x, 2)


# --------------------------------------------------------------------------
# Building blocks


def _conv(dims):
    return nn.Conv3d if dims == 3 else nn.Conv2d


def _bn(dims):
    return nn.BatchNorm3d if dims == 3 else nn.BatchNorm2d


class ConvBNAct(nn.Sequential):
    def __init__(self, cin, cout, k, dims=3):
        super().__init__(_conv(dims)(cin, cout, k, padding=k // 2, bias=False), _bn(dims)(cout), nn.PReLU(cout))


class SEGate(nn.Module):
    """Squeeze-and-excitation: per-channel sigmoid gate from the channel means."""

    def __init__(self, channels: int, squeeze: int):
        super().__init__()
        if squeeze >= channels:
            raise ValueError("squeeze width must be smaller than the channel count")
        self.fc1 = nn.Linear(channels, squeeze)
        self.act = nn.PReLU(squeeze)
        self.fc2 = nn.Linear(squeeze, channels)

    @staticmethod
    def squeeze(x):
        return x.flatten(2).mean(-1)

    def gate(self, x):
        return torch.sigmoid(self.fc2(self.act(self.fc1(self.squeeze(x)))))

    def forward(self, x):
        g = self.gate(x)
        return x * g.view(*g.shape, *([1] * (x.dim() - 2)))


def se_gate(features: torch.Tensor, squeeze: int, module: SEGate | None = None) -> torch.Tensor:
    module = module or SEGate(features.shape[1], squeeze).to(features.dtype)
    return module(features)


class SeResBlock(nn.Module):
    """Bottleneck residual block with an SE gate.

    ``modified=True`` gates the merged output, ``SE(x + F(x))``; otherwise the
    classic ``x + SE(F(x))`` wiring is used.
    """

    def __init__(self, cin, mid, cout, squeeze, modified=True):
        super().__init__()
        self.body = nn.Sequential(ConvBNAct(cin, mid, 1), ConvBNAct(mid, mid, 3), ConvBNAct(mid, cout, 1))
        self.shortcut = nn.Identity() if cin == cout else nn.Conv3d(cin, cout, 1, bias=False)
        self.se = SEGate(cout, squeeze)
        self.modified = modified

    def forward(self, x):
        if self.modified:
            return self.se(self.shortcut(x) + self.body(x))
        return self.shortcut(x) + self.se(self.body(x))


class DenseLayer(nn.Module):
    def __init__(self, cin, growth, dropout, dims=3):
        super().__init__()
        drop = nn.Dropout3d if dims == 3 else nn.Dropout2d
        self.body = nn.Sequential(drop(dropout), ConvBNAct(cin, growth, 3, dims))

    def forward(self, x):
        return torch.cat([x, self.body(x)], dim=1)


def max_pool3_same(x: torch.Tensor, spatial_dims: int = 3) -> torch.Tensor:
    """3-wide stride-1 max pooling with 'same' size, applied separably per axis."""
    for axis in range(x.dim() - spatial_dims, x.dim()):
        n = x.shape[axis]
        pad = [0, 0] * (x.dim() - 1 - axis) + [1, 1]
        padded = F.pad(x, pad, value=float("-inf"))
        x = torch.maximum(torch.maximum(padded.narrow(axis, 0, n), padded.narrow(axis, 1, n)), padded.narrow(axis, 2, n))
    return x


class IncepBlock(nn.Module):
    """1x1 branch, 1x1->3x3 branch and a stride-1 max-pool passthrough, fused by 1x1 to ``q``."""

    def __init__(self, cin, p, q):
        super().__init__()
        self.a = ConvBNAct(cin, p, 1)
        self.b = nn.Sequential(ConvBNAct(cin, p, 1), ConvBNAct(p, p, 3))
        self.fuse = ConvBNAct(2 * p + cin, q, 1)

    def forward(self, x):
        return self.fuse(torch.cat([self.a(x), self.b(x), max_pool3_same(x)], dim=1))


# --------------------------------------------------------------------------
# Classifiers


@dataclass(frozen=True)
class ClassifierConfig:
    variant: str = "seres"
    pooling: str = "dual"
    width: float = 1.0
    stem: int = 32
    seres_blocks: tuple = ((32, 64, 8, 3), (48, 96, 12, 6), (64, 128, 16, 3))  # (mid, out, squeeze, count)
    seres_modified: bool = True
    dense_growth: int = 32
    dense_dropout: float = 0.2
    dense_layers: tuple = (2, 4, 2)
    incep_blocks: tuple = ((16, 64), (24, 96), (32, 128))
    incep_repeat: int = 3
    input_size: int = INPUT_SIZE

    def __post_init__(self):
        if self.variant not in VARIANTS + ("dense2d",):
            raise ValueError(f"unknown classifier variant {self.variant!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.width <= 0:
            raise ValueError("width multiplier must be positive")

    def ch(self, c: int) -> int:
        return max(2, int(round(c * self.width)))


class Classifier(nn.Module):
    """Stem, three (downsample, block group) stages, global average pool, 2-way head."""

    def __init__(self, config: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.config = config
        dims = 2 if config.variant == "dense2d" else 3
        self.dims = dims
        ch = config.ch
        stem = ch(config.stem)
        self.stem = nn.Sequential(ConvBNAct(1, stem, 3, dims), ConvBNAct(stem, stem, 3, dims))
        self.stages = nn.ModuleList()
        self.stage_channels: list[int] = []
        c = stem
        for i in range(3):
            down = Downsample(config.pooling, dims)
            if config.variant in ("dense", "dense2d"):
                # transition: 1x1 conv to c/f so the downsample restores c
                t = max(2, c // down.channel_factor())
                layers = [ConvBNAct(c, t, 1, dims), down]
                c = t * down.channel_factor()
                for _ in range(config.dense_layers[i]):
                    layers.append(DenseLayer(c, ch(config.dense_growth), config.dense_dropout, dims))
                    c += ch(config.dense_growth)
            else:
                # downsample, then a 1x1 conv restoring the pre-pool channel budget
                layers = [down, ConvBNAct(c * down.channel_factor(), c, 1)]
                if config.variant == "seres":
                    mid, out, sq, count = config.seres_blocks[i]
                    for _ in range(count):
                        squeeze = max(1, int(round(sq * config.width)))
                        layers.append(SeResBlock(c, ch(mid), ch(out), squeeze, config.seres_modified))
                        c = ch(out)
                else:
                    p, q = config.incep_blocks[i]
                    for _ in range(config.incep_repeat):
                        layers.append(IncepBlock(c, ch(p), ch(q)))
                        c = ch(q)
            self.stages.append(nn.Sequential(*layers))
            self.stage_channels.append(c)
        self.head = nn.Linear(c, 2)
        self.out_channels = c

    def _prepare(self, x):
        if x.dim() == 4:
            x = x.unsqueeze(1)
        n = self.config.input_size
        if tuple(x.shape[-3:]) != (n, n, n):
            raise ValueError(f"classifier input must be {n}^3, got {tuple(x.shape[-3:])}")
        if self.dims == 2:
            x = x[:, :, n // 2]  # central axial slice
        return x

    def features(self, x):
        x = self.stem(self._prepare(x))
        for stage in self.stages:
            x = stage(x)
        return x

    def forward(self, x):
        """Logits ``(B, 2)``; use :meth:`predict_proba` for probabilities."""
        return self.head(self.features(x).flatten(2).mean(-1))

    def predict_proba(self, x):
        return torch.softmax(self(x), dim=1)


def build_classifier(config: ClassifierConfig = ClassifierConfig()) -> Classifier:
    return Classifier(config)


def count_convs(model: nn.Module, include_projections: bool = False) -> int:
    n = 0
    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            if not include_projections and name.endswith("shortcut"):
                continue
            n += 1
    return n


@dataclass(frozen=True)
class EnsembleWeights:
    weights: tuple[float, ...] = field(default=(1 / 3, 1 / 3, 1 / 3))

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ValueError("ensemble weights must be non-negative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"ensemble weights must sum to 1, got {sum(self.weights)}")


def ensemble_predict(probs, weights=(1 / 3, 1 / 3, 1 / 3)):
    """Weighted average of per-model probabilities (scalars or arrays)."""
    w = EnsembleWeights(tuple(weights)).weights
    if len(probs) != len(w):
        raise ValueError(f"{len(probs)} probability sources for {len(w)} weights")
    return sum(wi * pi for wi, pi in zip(w, probs))
