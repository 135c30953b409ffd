"""Full network: backbone + multi-span head, model configs, and parameter init."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import MGFE, uta_length
from .head import MSFL, PE_STRATEGIES, CATM, GeM, PositionEncoding, PriorHead, SeparateFC


@dataclass
class ModelConfig:
    # average-pool the silhouettes spatially at entry (1 = full resolution)
    input_pool: int = 1
    shallow_channels: int = 32
    stage_channels: tuple[int, ...] = (64, 64, 128)
    pool_after: tuple[int, ...] = (0,)
    stem_parts: int = 4
    num_parts: int = 32
    pe_kernel: int = 7
    pe_strategy: str = "channel-grouped"
    num_layers: int = 3
    num_heads: int = 8
    ff_mult: int = 4
    mcm_window: int = 3
    temporal_pool: str = "max"
    gem_p: float = 3.0
    activation: str = "leaky_relu"
    negative_slope: float = 0.01
    norm_layers: bool = False
    use_fine: bool = True
    use_coarse: bool = True
    inject: bool = True
    use_global: bool = True
    use_local: bool = True
    # prior type -> number of classes
    priors: dict[str, int] = field(default_factory=lambda: {"view": 11})

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.pool_after = tuple(int(i) for i in self.pool_after)
        self.priors = {str(k): int(v) for k, v in dict(self.priors).items()}
        if self.input_pool < 1:
            raise ValueError("input_pool must be >= 1")
        if not self.stage_channels or min(self.stage_channels) <= 0:
            raise ValueError("stage_channels must be nonempty and positive")
        if self.pe_strategy not in PE_STRATEGIES:
            raise ValueError(f"unknown pe_strategy {self.pe_strategy!r}")
        if self.pe_kernel % 2 == 0:
            raise ValueError("pe_kernel must be odd")
        if self.channels % self.num_heads:
            raise ValueError(f"C2={self.channels} not divisible by num_heads={self.num_heads}")
        if not (self.use_fine or self.use_coarse):
            raise ValueError("at least one of use_fine/use_coarse must be set")
        if not (self.use_global or self.use_local):
            raise ValueError("at least one of use_global/use_local must be set")

    @property
    def channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def branches(self) -> tuple[str, ...]:
        return tuple(b for b, on in (("fine", self.use_fine), ("coarse", self.use_coarse)) if on)

    @property
    def descriptor_dim(self) -> int:
        return self.channels * len(self.branches)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["pool_after"] = list(self.pool_after)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


MODEL_PRESETS = {
    "casia-b": ModelConfig(priors={"view": 11}),
    "oumvlp": ModelConfig(stage_channels=(64, 64, 128, 256), priors={"view": 14}),
    "grew": ModelConfig(stage_channels=(64, 64, 128, 256), priors={"view": 2}),
    "desk": ModelConfig(input_pool=4, shallow_channels=8, stage_channels=(16, 16, 32), num_parts=8,
                        num_layers=1, num_heads=4, priors={"view": 4}),
    "micro": ModelConfig(shallow_channels=4, stage_channels=(4, 8), num_parts=4, pe_kernel=3,
                         num_layers=1, num_heads=2, priors={"view": 3}),
}


class GaitGS(nn.Module):
    """Silhouette clip (B, T, H, W) or (B, 1, T, H, W) -> part descriptor (B, P, D).

    ``forward`` returns a dict with ``descriptor``, prior ``logits``/``preds``
    per prior type, the backbone volumes ``s_f``/``s_c`` and the per-branch
    part ``tokens``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = MGFE(cfg.shallow_channels, cfg.stage_channels, cfg.pool_after, cfg.stem_parts,
                             cfg.activation, cfg.negative_slope, cfg.norm_layers,
                             cfg.use_fine, cfg.use_coarse, cfg.inject)
        self.head = MSFL(cfg.channels, cfg.num_parts, cfg.branches, cfg.priors, cfg.pe_kernel,
                         cfg.num_layers, cfg.num_heads, cfg.pe_strategy, cfg.mcm_window,
                         cfg.use_global, cfg.use_local, cfg.temporal_pool, cfg.gem_p, cfg.ff_mult)

    def forward(self, x: torch.Tensor) -> dict:
        if x.dim() == 4:
            x = x.unsqueeze(1)
        if x.shape[2] < 3:
            raise ValueError(f"sequence too short: T={x.shape[2]} (need >= 3)")
        if self.cfg.input_pool > 1:
            k = self.cfg.input_pool
            x = F.avg_pool3d(x, (1, k, k))
        s_f, s_c = self.backbone(x)
        volumes = {k: v for k, v in (("fine", s_f), ("coarse", s_c)) if v is not None}
        out = self.head(volumes)
        out["s_f"], out["s_c"] = s_f, s_c
        return out

    def transformer_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if ".encoder." in n]

    @torch.no_grad()
    def clamp_(self) -> None:
        for m in self.modules():
            if isinstance(m, GeM):
                m.clamp_()


def output_shapes(cfg: ModelConfig, t: int, h: int = 64, w: int = 44) -> dict[str, tuple[int, ...]]:
    """Closed-form shapes of S_f, S_c, E_f and S_o for one sample."""
    h, w = h // cfg.input_pool, w // cfg.input_pool
    for i in cfg.pool_after:
        if i < len(cfg.stage_channels):
            h, w = h // 2, w // 2
    c = cfg.channels
    return {
        "s_f": (c, t, h, w),
        "s_c": (c, uta_length(t), h, w),
        "e_f": (cfg.num_parts, t, c),
        "s_o": (cfg.num_parts, cfg.descriptor_dim),
    }


def fan_in_bound(fan_in: int, gain: float = 1.0) -> float:
    """Half-width of the scaled-uniform init; its standard deviation is bound / sqrt(3)."""
    return gain * math.sqrt(3.0 / fan_in)


def leaky_gain(slope: float) -> float:
    return math.sqrt(2.0 / (1.0 + slope ** 2))


@torch.no_grad()
def init_parameters(model: GaitGS, seed: int) -> GaitGS:
    """Deterministic init.

    Convolution weights: uniform with He-style fan-in bound; linear weights:
    uniform with unit-gain fan-in bound; biases zero; class token and prior
    tables N(0, 0.02); position-encoding kernels zero; LayerNorm at (1, 0).
    """
    g = torch.Generator().manual_seed(int(seed))
    cfg = model.cfg
    conv_gain = leaky_gain(cfg.negative_slope) if cfg.activation == "leaky_relu" else math.sqrt(2.0)

    def uniform_(t: torch.Tensor, bound: float) -> None:
        t.copy_((torch.rand(t.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)

    def normal_(t: torch.Tensor, std: float) -> None:
        t.copy_(torch.randn(t.shape, generator=g, dtype=torch.float64) * std)

    for m in model.modules():
        if isinstance(m, (nn.Conv3d, nn.Conv1d)):
            fan_in = m.weight[0].numel()
            gain = 1.0 if isinstance(m, nn.Conv1d) else conv_gain
            uniform_(m.weight, fan_in_bound(fan_in, gain))
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, nn.Linear):
            uniform_(m.weight, fan_in_bound(m.in_features))
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            m.weight.fill_(1.0)
            m.bias.zero_()
        elif isinstance(m, SeparateFC):
            uniform_(m.weight, fan_in_bound(m.weight.shape[1]))
        elif isinstance(m, CATM):
            normal_(m.class_token, 0.02)
        elif isinstance(m, PositionEncoding):
            if hasattr(m, "weight"):
                m.weight.zero_()
        elif isinstance(m, PriorHead):
            for table in m.tables.values():
                normal_(table, 0.02)
        elif isinstance(m, GeM):
            m.p.fill_(cfg.gem_p)
        elif isinstance(m, nn.BatchNorm3d):
            m.reset_parameters()
    return model


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> GaitGS:
    model = GaitGS(cfg)
    init_parameters(model, seed)
    return model.to(dtype)
