"""Group U-Net: every convolution is a group convolution; features are fused
across the group before the final upsampling and K-class convolution."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .layers import GroupConv, as_group, group_fuse


class GroupUNet(nn.Module):
    """U-Net over a variable-size group of aligned single-channel inputs.

    Level 0 derives ``first_features`` maps and then ``features`` maps; every
    other convolution has ``features`` filters. The up arm skip-concatenates
    the down-arm features of the same level. The activated output of the
    second-last level is averaged over the group, upsampled, concatenated with
    the group-averaged level-0 features and mapped to ``n_classes`` softmax
    probabilities.
    """

    def __init__(
        self,
        levels: int = 6,
        features: int = 64,
        first_features: int = 1,
        n_classes: int = 22,
        in_channels: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        if levels < 1:
            raise ValueError("need at least one level")
        self.levels, self.features, self.first_features = levels, features, first_features
        self.n_classes, self.in_channels, self.seed = n_classes, in_channels, seed
        gen = torch.Generator().manual_seed(seed)

        self.down = nn.ModuleList()
        for level in range(levels):
            if level == 0:
                pair = [GroupConv(in_channels, first_features, generator=gen), GroupConv(first_features, features, generator=gen)]
            else:
                pair = [GroupConv(features, features, generator=gen), GroupConv(features, features, generator=gen)]
            self.down.append(nn.Sequential(*pair))
        self.up = nn.ModuleList()
        for _ in range(levels - 2, 0, -1):
            self.up.append(nn.Sequential(GroupConv(2 * features, features, generator=gen), GroupConv(features, features, generator=gen)))
        final_in = 2 * features if levels > 1 else features
        self.final = GroupConv(final_in, n_classes, activation=False, generator=gen)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def config(self) -> dict:
        return {
            "levels": self.levels,
            "features": self.features,
            "first_features": self.first_features,
            "n_classes": self.n_classes,
            "in_channels": self.in_channels,
            "seed": self.seed,
        }

    def forward(self, x) -> torch.Tensor:
        """Map an (n, C, D, H, W) group to (1, K, D, H, W) class probabilities."""
        x = as_group(x)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels per entry, got {x.shape[1]}")
        for extent in x.shape[2:]:
            if extent % self.divisor:
                raise ValueError(f"spatial extents {tuple(x.shape[2:])} must be divisible by {self.divisor}")

        skips = []
        for level, block in enumerate(self.down):
            x = block(x)
            skips.append(x)
            if level < self.levels - 1:
                x = F.max_pool3d(x, 2)
        for i, block in enumerate(self.up):
            level = self.levels - 2 - i
            x = _upsample(x)
            x = block(torch.cat([x, skips[level]], dim=1))

        x = group_fuse(x)
        if self.levels > 1:
            x = torch.cat([_upsample(x), group_fuse(skips[0])], dim=1)
        return torch.softmax(self.final(x), dim=1)


def _upsample(x):
    return F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
