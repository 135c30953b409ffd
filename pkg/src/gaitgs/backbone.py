"""Multi-granularity 3D-convolutional feature extractor.

All volumes are laid out as (batch, channels, time, height, width).
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


def make_activation(name: str = "leaky_relu", negative_slope: float = 0.01) -> nn.Module:
    if name == "leaky_relu":
        return nn.LeakyReLU(negative_slope)
    if name == "relu":
        return nn.ReLU()
    if name == "identity":
        return nn.Identity()
    raise ValueError(f"unknown activation {name!r}")


class ShallowStem(nn.Module):
    """One 3x3x3 convolution + activation lifting the silhouette to C channels."""

    def __init__(self, in_channels: int = 1, out_channels: int = 32, act: str = "leaky_relu",
                 negative_slope: float = 0.01):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.act = make_activation(act, negative_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(x))


class B3D(nn.Module):
    """Sum of parallel (3,3,3), (3,1,1) and (1,3,3) convolutions, then activation."""

    def __init__(self, in_channels: int, out_channels: int, act: str = "leaky_relu",
                 negative_slope: float = 0.01, norm: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv333 = nn.Conv3d(in_channels, out_channels, (3, 3, 3), padding=(1, 1, 1))
        self.conv311 = nn.Conv3d(in_channels, out_channels, (3, 1, 1), padding=(1, 0, 0))
        self.conv133 = nn.Conv3d(in_channels, out_channels, (1, 3, 3), padding=(0, 1, 1))
        self.norm = nn.BatchNorm3d(out_channels) if norm else nn.Identity()
        self.act = make_activation(act, negative_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"channel mismatch: got {x.shape[1]}, expected {self.in_channels}")
        y = self.conv333(x) + self.conv311(x) + self.conv133(x)
        return self.act(self.norm(y))


def b3d_forward(x: torch.Tensor, block: B3D) -> torch.Tensor:
    return block(x)


def split_height(x: torch.Tensor, parts: int) -> torch.Tensor:
    """(B, C, T, H, W) -> (B*parts, C, T, H/parts, W), strips stacked part-major per sample."""
    b, c, t, h, w = x.shape
    if h % parts:
        raise ValueError(f"height not partitionable: H={h} into {parts} parts")
    x = x.reshape(b, c, t, parts, h // parts, w)
    return x.permute(0, 3, 1, 2, 4, 5).reshape(b * parts, c, t, h // parts, w)


def merge_height(x: torch.Tensor, parts: int) -> torch.Tensor:
    bp, c, t, hp, w = x.shape
    b = bp // parts
    x = x.reshape(b, parts, c, t, hp, w).permute(0, 2, 3, 1, 4, 5)
    return x.reshape(b, c, t, parts * hp, w)


class STEM(nn.Module):
    """Height-split shared-weight B3D plus a full-frame B3D shortcut.

    The same ``plain`` block is applied to each of the ``parts`` horizontal
    strips (zero padding at strip borders), the strips are stacked back along
    height, and ``shortcut(x)`` on the unsplit input is added.
    """

    def __init__(self, in_channels: int, out_channels: int, parts: int = 4,
                 act: str = "leaky_relu", negative_slope: float = 0.01, norm: bool = False):
        super().__init__()
        self.parts = parts
        self.plain = B3D(in_channels, out_channels, act, negative_slope, norm)
        self.shortcut = B3D(in_channels, out_channels, act, negative_slope, norm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        strips = self.plain(split_height(x, self.parts))
        return merge_height(strips, self.parts) + self.shortcut(x)


class UTA(nn.Module):
    """Unit temporal aggregation: kernel-3 / stride-3 temporal conv + activation.

    No temporal padding, so ``T' = (T - 3) // 3 + 1``.
    """

    def __init__(self, channels: int, act: str = "leaky_relu", negative_slope: float = 0.01):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, (3, 1, 1), stride=(3, 1, 1))
        self.act = make_activation(act, negative_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[2] < 3:
            raise ValueError(f"sequence too short for unit aggregation: T={x.shape[2]}")
        return self.act(self.conv(x))


def uta_length(t: int) -> int:
    return (t - 3) // 3 + 1


class FineBranch(nn.Module):
    """Stack of STEM stages with a 1x2x2 max-pool after each stage in ``pool_after``."""

    def __init__(self, in_channels: int, channels: Sequence[int], pool_after: Sequence[int] = (0,),
                 parts: int = 4, act: str = "leaky_relu", negative_slope: float = 0.01,
                 norm: bool = False):
        super().__init__()
        if not channels or any(c <= 0 for c in channels):
            raise ValueError("stage channel list must be nonempty and positive")
        self.in_channels = in_channels
        self.pool_after = tuple(pool_after)
        ins = [in_channels, *channels[:-1]]
        self.stages = nn.ModuleList(
            STEM(ci, co, parts, act, negative_slope, norm) for ci, co in zip(ins, channels)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"fine branch expects {self.in_channels} channels, got {x.shape[1]}")
        outputs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in self.pool_after:
                x = F.max_pool3d(x, (1, 2, 2))
            outputs.append(x)
        return x, outputs


class CoarseBranch(nn.Module):
    """Coarse tower over UTA(input), fed fine-stage outputs through UTA at each stage boundary.

    Stage ``i > 0`` receives ``coarse_{i-1} + UTA_i(fine_{i-1})``; the entry is
    ``UTA_0(s_hat_f)``. ``inject=False`` drops the boundary injections.
    """

    def __init__(self, in_channels: int, channels: Sequence[int], pool_after: Sequence[int] = (0,),
                 parts: int = 4, act: str = "leaky_relu", negative_slope: float = 0.01,
                 norm: bool = False, inject: bool = True):
        super().__init__()
        self.pool_after = tuple(pool_after)
        self.inject = inject
        self.entry = UTA(in_channels, act, negative_slope)
        ins = [in_channels, *channels[:-1]]
        self.stages = nn.ModuleList(
            STEM(ci, co, parts, act, negative_slope, norm) for ci, co in zip(ins, channels)
        )
        self.injections = nn.ModuleList(
            UTA(c, act, negative_slope) for c in (channels[:-1] if inject else ())
        )

    def forward(self, s_hat_f: torch.Tensor, fine_outputs: Sequence[torch.Tensor] | None) -> torch.Tensor:
        x = self.entry(s_hat_f)
        if self.inject and (fine_outputs is None or len(fine_outputs) != len(self.stages)):
            raise ValueError("fine stage outputs must align with coarse stages")
        for i, stage in enumerate(self.stages):
            if i > 0 and self.inject:
                extra = self.injections[i - 1](fine_outputs[i - 1])
                if extra.shape != x.shape:
                    raise ValueError(f"temporal misalignment: {tuple(extra.shape)} vs {tuple(x.shape)}")
                x = x + extra
            x = stage(x)
            if i in self.pool_after:
                x = F.max_pool3d(x, (1, 2, 2))
        return x


class MGFE(nn.Module):
    """Shallow stem followed by the fine and (optionally) coarse branches."""

    def __init__(self, shallow_channels: int = 32, channels: Sequence[int] = (64, 64, 128),
                 pool_after: Sequence[int] = (0,), parts: int = 4, act: str = "leaky_relu",
                 negative_slope: float = 0.01, norm: bool = False,
                 use_fine: bool = True, use_coarse: bool = True, inject: bool = True):
        super().__init__()
        if not (use_fine or use_coarse):
            raise ValueError("at least one branch must be enabled")
        self.use_fine = use_fine
        self.use_coarse = use_coarse
        self.shallow = ShallowStem(1, shallow_channels, act, negative_slope)
        # without the fine tower there is nothing to inject
        self.fine = FineBranch(shallow_channels, channels, pool_after, parts, act, negative_slope,
                               norm) if use_fine else None
        self.coarse = CoarseBranch(shallow_channels, channels, pool_after, parts, act, negative_slope,
                                   norm, inject and use_fine) if use_coarse else None

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        s_hat = self.shallow(x)
        s_f, outs = self.fine(s_hat) if self.fine is not None else (None, None)
        s_c = self.coarse(s_hat, outs) if self.coarse is not None else None
        return s_f, s_c
