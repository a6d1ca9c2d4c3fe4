"""Group convolution and group fusion.

A group holds ``n`` spatially aligned entries stacked along the leading
dimension, shape (n, C, D, H, W). The parameters of a layer do not depend on
``n``.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def as_group(features) -> torch.Tensor:
    """Stack a list of (C, D, H, W) tensors, or pass through an (n, C, D, H, W) tensor."""
    if isinstance(features, torch.Tensor):
        if features.dim() != 5:
            raise ValueError(f"group tensor must be 5-D (n, C, D, H, W), got {tuple(features.shape)}")
        if features.shape[0] < 1:
            raise ValueError("empty group")
        return features
    features = list(features)
    if not features:
        raise ValueError("empty group")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise ValueError(f"group members differ in shape: {tuple(f.shape)} vs {tuple(shape)}")
    return torch.stack(features)


def group_conv(x: torch.Tensor, V: torch.Tensor, W: torch.Tensor, b: torch.Tensor, activation: bool = True) -> torch.Tensor:
    """out_i = 0.5 * (V * f_i + W * mean_j f_j) + b, with optional ELU.

    Stride-1 convolution with zero padding keeps the spatial extent.
    """
    x = as_group(x)
    if x.shape[1] != V.shape[1]:
        raise ValueError(f"expected {V.shape[1]} input channels, got {x.shape[1]}")
    pad = V.shape[-1] // 2
    mean = x.mean(dim=0, keepdim=True)
    out = 0.5 * (F.conv3d(x, V, padding=pad) + F.conv3d(mean, W, padding=pad)) + b.view(1, -1, 1, 1, 1)
    return F.elu(out) if activation else out


def group_fuse(x) -> torch.Tensor:
    """Element-wise mean over the group entries; returns a (1, C, ...) tensor."""
    return as_group(x).mean(dim=0, keepdim=True)


class GroupConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, activation: bool = True, kernel: int = 3, generator=None):
        super().__init__()
        self.c_in, self.c_out, self.activation = c_in, c_out, activation
        shape = (c_out, c_in, kernel, kernel, kernel)
        fan_in = c_in * kernel**3
        std = math.sqrt(2.0 / fan_in)
        self.V = nn.Parameter(torch.randn(shape, generator=generator) * std)
        self.W = nn.Parameter(torch.randn(shape, generator=generator) * std)
        self.b = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return group_conv(x, self.V, self.W, self.b, self.activation)

    def extra_repr(self):
        return f"{self.c_in}, {self.c_out}, activation={self.activation}"
