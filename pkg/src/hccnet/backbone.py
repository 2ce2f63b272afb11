"""3D ConvNeXt feature extractor.

Patchify stem (kernel 3, stride 3) -> four stages of 3D ConvNeXt blocks
with LN + stride-2 conv transitions -> global average pool -> LayerNorm.
The embedding width is ``8 * C``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class Variant:
    channels: int
    blocks: tuple[int, int, int, int]
    layers: int

    @property
    def hidden(self) -> int:
        return 8 * self.channels

    @property
    def heads(self) -> int:
        return self.hidden // 128


VARIANTS = {
    "F": Variant(48, (2, 2, 6, 2), 4),
    "P": Variant(64, (2, 2, 6, 2), 4),
    "N": Variant(80, (2, 2, 8, 2), 6),
    "T": Variant(96, (3, 3, 9, 3), 6),
}

# Parameter counts (millions) reported for the four full variants.
REPORTED_PARAMS_M = {"F": 12.4, "P": 22.0, "N": 45.9, "T": 72.4}


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int
    blocks_per_stage: tuple[int, int, int, int]
    input_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ValueError("need four stages with at least one block each")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def embed_dim(self) -> int:
        return 8 * self.base_channels

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(4))


class LayerNorm3d(nn.LayerNorm):
    """LayerNorm over the channel axis of a ``(N, C, D, H, W)`` tensor."""

    def __init__(self, channels: int):
        super().__init__(channels, eps=LN_EPS)

    def forward(self, x):
        x = x.permute(0, 2, 3, 4, 1)
        x = F.layer_norm(x, self.normalized_shape, self.weight, self.bias, self.eps)
        return x.permute(0, 4, 1, 2, 3)


class ConvNeXtBlock3d(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.dwconv = nn.Conv3d(dim, dim, kernel_size=3, padding=1, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.pwconv2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        if x.shape[1] != self.dim:
            raise ValueError(f"block expects {self.dim} channels, got {x.shape[1]}")
        y = self.dwconv(x).permute(0, 2, 3, 4, 1)
        y = self.pwconv2(F.gelu(self.pwconv1(self.norm(y))))
        return x + y.permute(0, 4, 1, 2, 3)


class Stem(nn.Module):
    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, dim, kernel_size=3, stride=3)
        self.norm = LayerNorm3d(dim)

    def forward(self, x):
        if any(s % 3 for s in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} are not divisible by 3")
        return self.norm(self.conv(x))


class Downsample(nn.Sequential):
    def __init__(self, dim: int):
        super().__init__(LayerNorm3d(dim), nn.Conv3d(dim, 2 * dim, kernel_size=2, stride=2))


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        dims = config.stage_channels
        self.stem = Stem(config.input_channels, dims[0])
        self.downsample = nn.ModuleList(Downsample(dims[i]) for i in range(3))
        self.stages = nn.ModuleList(
            nn.Sequential(*[ConvNeXtBlock3d(d) for _ in range(n)])
            for d, n in zip(dims, config.blocks_per_stage)
        )
        self.norm = nn.LayerNorm(dims[-1], eps=LN_EPS)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def features(self, x):
        x = self.stages[0](self.stem(x))
        for down, stage in zip(self.downsample, self.stages[1:]):
            x = stage(down(x))
        return x

    def forward(self, x):
        return self.norm(self.features(x).mean(dim=(2, 3, 4)))


def init_weights(module: nn.Module, seed: int, std: float = INIT_STD) -> None:
    """Weights ~ N(0, std), biases 0, norm scales 1; deterministic by seed."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2 or name.endswith("cls_token"):
                noise = torch.empty(p.shape, dtype=torch.float64).normal_(0.0, std, generator=g)
                p.copy_(noise.to(p.dtype))
            elif _is_norm_scale(module, name):
                p.fill_(1.0)
            else:
                p.zero_()


def _is_norm_scale(root: nn.Module, name: str) -> bool:
    owner, _, leaf = name.rpartition(".")
    mod = root.get_submodule(owner) if owner else root
    return isinstance(mod, nn.LayerNorm) and leaf == "weight"


def decay_eligible(name: str, p: torch.Tensor) -> bool:
    """Convolution / linear weights only; norm parameters and biases are never decayed."""
    return p.ndim >= 2


def build_backbone(
    variant: str = "P",
    input_channels: int = 1,
    init_seed: int = 0,
    channels: int | None = None,
    blocks: tuple[int, int, int, int] | None = None,
) -> tuple[BackboneConfig, Backbone]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    v = VARIANTS[variant]
    config = BackboneConfig(channels or v.channels, tuple(blocks or v.blocks), input_channels)
    model = Backbone(config)
    init_weights(model, init_seed)
    return config, model


def count_params(store: Union[nn.Module, Mapping[str, torch.Tensor]]) -> int:
    if isinstance(store, nn.Module):
        return sum(p.numel() for p in store.parameters())
    return sum(t.numel() for t in store.values())


def inflate_stem_weight(weight: torch.Tensor, in_channels: int) -> torch.Tensor:
    """Adapt a stem kernel trained on ``c`` channels to ``in_channels``.

    The kernel is averaged over its input channels and tiled, so a volume whose
    channels are all equal maps to the same response as before.
    """
    if weight.shape[1] == in_channels:
        return weight
    mean = weight.mean(dim=1, keepdim=True)
    return mean.repeat(1, in_channels, 1, 1, 1) * (weight.shape[1] / in_channels)
