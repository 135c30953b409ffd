"""Multi-span temporal head: part tokens, prior embeddings, transformer and local pooling.

Part-token tensors are laid out as (batch, parts, time, channels).
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

PE_STRATEGIES = ("none", "sinusoidal", "conv1d-shared", "channel-grouped")


def horizontal_pool(s: torch.Tensor, parts: int) -> torch.Tensor:
    """Max + mean over each of ``parts`` horizontal strips.

    (B, C, T, H, W) -> (B, parts, T, C)
    """
    b, c, t, h, w = s.shape
    if h % parts:
        raise ValueError(f"height {h} not divisible into {parts} parts")
    x = s.reshape(b, c, t, parts, (h // parts) * w)
    x = x.amax(-1) + x.mean(-1)
    return x.permute(0, 3, 2, 1)


def temporal_pool(x: torch.Tensor, dim: int, mode: str = "max") -> torch.Tensor:
    if mode == "max":
        return x.amax(dim)
    if mode == "mean":
        return x.mean(dim)
    raise ValueError(f"unknown temporal pooling {mode!r}")


class MCM(nn.Module):
    """Micro-motion template: channel-wise logistic attention times a sliding temporal max.

    Both the attention convolution and the window max pad the time axis by
    edge replication so the output keeps the input length.
    """

    def __init__(self, channels: int, window: int = 3):
        super().__init__()
        if window % 2 == 0:
            raise ValueError("micro-motion window must be odd")
        self.window = window
        self.conv = nn.Conv1d(channels, channels, 3, groups=channels)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, p, t, c = tokens.shape
        x = tokens.reshape(b * p, t, c).transpose(1, 2)
        r = self.window // 2
        wmax = F.max_pool1d(F.pad(x, (r, r), mode="replicate"), self.window, stride=1)
        att = torch.sigmoid(self.conv(F.pad(x, (1, 1), mode="replicate")))
        return (att * wmax).transpose(1, 2).reshape(b, p, t, c)


class GeM(nn.Module):
    """Generalized mean over the spatial axes with a learnable exponent."""

    p_min = 1.0
    p_max = 64.0

    def __init__(self, p: float = 3.0, eps: float = 1e-6):
        super().__init__()
        self.p = nn.Parameter(torch.tensor(float(p)))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, C, H, W) -> (B, C)
        # GeM is 1-homogeneous, so dividing by the (constant) spatial max and
        # multiplying back is exact and keeps |x|^p away from underflow at large p
        p = self.p.clamp(self.p_min, self.p_max)
        x = x.abs().flatten(2)
        scale = x.detach().amax(-1, keepdim=True).clamp_min(self.eps)
        m = (x / scale).pow(p).mean(-1).clamp_min(torch.finfo(x.dtype).tiny)
        return m.pow(1.0 / p) * scale.squeeze(-1)

    @torch.no_grad()
    def clamp_(self) -> None:
        self.p.clamp_(self.p_min, self.p_max)


class PriorHead(nn.Module):
    """Linear prior classifier plus one prior-embedding table per branch."""

    def __init__(self, num_classes: int, in_dim: int, channels: int, branches: tuple[str, ...]):
        super().__init__()
        if num_classes < 2:
            raise ValueError("a prior head needs at least two classes")
        self.num_classes = num_classes
        self.classifier = nn.Linear(in_dim, num_classes, bias=False)
        self.tables = nn.ParameterDict({br: nn.Parameter(torch.zeros(num_classes, channels))
                                        for br in branches})

    def forward(self, s_prior: torch.Tensor):
        logits = self.classifier(s_prior)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("prior head diverged")
        # torch.argmax returns the first maximal index
        y_hat = logits.argmax(-1)
        return logits, y_hat, {br: table[y_hat] for br, table in self.tables.items()}


class PIEG(nn.Module):
    """Prior-information embedding generation from pooled fine/coarse volumes."""

    def __init__(self, channels: int, branches: tuple[str, ...], priors: dict[str, int],
                 gem_p: float = 3.0, tp: str = "max"):
        super().__init__()
        self.branches = branches
        self.tp = tp
        self.gem = GeM(gem_p)
        self.heads = nn.ModuleDict({
            name: PriorHead(m, channels * len(branches), channels, branches)
            for name, m in priors.items()
        })

    def pool(self, volumes: dict[str, torch.Tensor]) -> torch.Tensor:
        pooled = torch.cat([temporal_pool(volumes[br], 2, self.tp) for br in self.branches], 1)
        return self.gem(pooled)

    def forward(self, volumes: dict[str, torch.Tensor]):
        s_prior = self.pool(volumes)
        logits, preds, embeds = {}, {}, {br: None for br in self.branches}
        for name, head in self.heads.items():
            logits[name], preds[name], e = head(s_prior)
            for br in self.branches:
                embeds[br] = e[br] if embeds[br] is None else embeds[br] + e[br]
        return logits, preds, embeds


def sinusoidal_table(t: int, channels: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(t, dtype=torch.float64, device=device)[:, None]
    i = torch.arange(0, channels, 2, dtype=torch.float64, device=device)
    angle = pos / torch.pow(10000.0, i / channels)
    table = torch.zeros(t, channels, dtype=torch.float64, device=device)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : channels // 2])
    return table.to(dtype)


class PositionEncoding(nn.Module):
    """Temporal position encoding on (N, T, C) tokens.

    ``channel-grouped`` adds a per-channel width-K convolution of the tokens
    (residual form, so zero kernels give the identity); ``conv1d-shared`` uses a
    single width-K kernel for every channel; ``sinusoidal`` adds the fixed
    sin/cos table; ``none`` is the identity.
    """

    def __init__(self, channels: int, kernel_size: int = 7, strategy: str = "channel-grouped"):
        super().__init__()
        if strategy not in PE_STRATEGIES:
            raise ValueError(f"unknown position-encoding strategy {strategy!r}; choose from {PE_STRATEGIES}")
        if kernel_size % 2 == 0:
            raise ValueError("position-encoding kernel size must be odd")
        self.strategy = strategy
        self.channels = channels
        self.kernel_size = kernel_size
        if strategy == "channel-grouped":
            self.weight = nn.Parameter(torch.zeros(channels, 1, kernel_size))
        elif strategy == "conv1d-shared":
            self.weight = nn.Parameter(torch.zeros(1, 1, kernel_size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, t, c = x.shape
        if self.strategy == "none":
            return x
        if self.strategy == "sinusoidal":
            return x + sinusoidal_table(t, c, x.dtype, x.device)
        pad = self.kernel_size // 2
        xt = x.transpose(1, 2)
        if self.strategy == "channel-grouped":
            y = F.conv1d(xt, self.weight, padding=pad, groups=c)
        else:
            y = F.conv1d(xt.reshape(n * c, 1, t), self.weight, padding=pad).reshape(n, c, t)
        return x + y.transpose(1, 2)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block with a 4x feed-forward, no dropout."""

    def __init__(self, channels: int, heads: int, ff_mult: int = 4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.ff1 = nn.Linear(channels, ff_mult * channels)
        self.ff2 = nn.Linear(ff_mult * channels, channels)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        n, t, c = x.shape
        d = c // self.heads
        q, k, v = self.qkv(x).reshape(n, t, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        return self.proj((w @ v).transpose(1, 2).reshape(n, t, c))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


class TransformerStack(nn.Module):
    def __init__(self, channels: int, layers: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(channels, heads, ff_mult) for _ in range(layers))
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class SeparateFC(nn.Module):
    """One independent C_in x C_out linear map per part."""

    def __init__(self, parts: int, in_channels: int, out_channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(parts, in_channels, out_channels))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bpc,pcd->bpd", x, self.weight)


class CATM(nn.Module):
    """Class-token transformer over each part's frame tokens.

    Every part runs through the same encoder (parts are folded into the batch);
    the class-token output is projected by that part's own linear map.
    """

    def __init__(self, channels: int, parts: int, kernel_size: int = 7, layers: int = 3,
                 heads: int = 8, pe: str = "channel-grouped", ff_mult: int = 4):
        super().__init__()
        self.pe = PositionEncoding(channels, kernel_size, pe)
        self.class_token = nn.Parameter(torch.zeros(channels))
        self.encoder = TransformerStack(channels, layers, heads, ff_mult)
        self.fc = SeparateFC(parts, channels, channels)

    def forward(self, tokens: torch.Tensor, e_prior: torch.Tensor | None = None) -> torch.Tensor:
        b, p, t, c = tokens.shape
        x = self.pe(tokens.reshape(b * p, t, c)).reshape(b, p, t, c)
        cls = self.class_token.expand(b, p, 1, c)
        x = torch.cat([x, cls], 2)
        if e_prior is not None:
            x = x + e_prior[:, None, None, :]
        out = self.encoder(x.reshape(b * p, t + 1, c))
        return self.fc(out[:, -1].reshape(b, p, c))


def local_feature(tokens: torch.Tensor, mode: str = "max") -> torch.Tensor:
    """Temporal pooling of (B, P, T, C) tokens -> (B, P, C)."""
    return temporal_pool(tokens, 2, mode)


def fuse(s_fg, s_fl, s_cg, s_cl) -> torch.Tensor:
    """Concatenate fine (global + local) and coarse (global + local) part features.

    Any argument may be ``None`` when that branch or span is disabled.
    """
    halves = []
    for g, loc in ((s_fg, s_fl), (s_cg, s_cl)):
        present = [f for f in (g, loc) if f is not None]
        if not present:
            continue
        if len(present) == 2 and g.shape != loc.shape:
            raise ValueError(f"shape mismatch: {tuple(g.shape)} vs {tuple(loc.shape)}")
        halves.append(present[0] if len(present) == 1 else present[0] + present[1])
    if not halves:
        raise ValueError("nothing to fuse")
    if len(halves) == 2 and halves[0].shape != halves[1].shape:
        raise ValueError(f"shape mismatch: {tuple(halves[0].shape)} vs {tuple(halves[1].shape)}")
    return torch.cat(halves, -1)


class MSFL(nn.Module):
    """Per-branch MCM, CATM and local pooling, conditioned on PIEG embeddings."""

    def __init__(self, channels: int, parts: int = 32, branches: tuple[str, ...] = ("fine", "coarse"),
                 priors: dict[str, int] | None = None, kernel_size: int = 7, layers: int = 3,
                 heads: int = 8, pe: str = "channel-grouped", mcm_window: int = 3,
                 use_global: bool = True, use_local: bool = True, tp: str = "max",
                 gem_p: float = 3.0, ff_mult: int = 4):
        super().__init__()
        if not (use_global or use_local):
            raise ValueError("at least one of global/local must be enabled")
        self.parts = parts
        self.branches = branches
        self.use_global = use_global
        self.use_local = use_local
        self.tp = tp
        priors = priors or {}
        self.pieg = PIEG(channels, branches, priors, gem_p, tp) if priors else None
        self.mcm = nn.ModuleDict({br: MCM(channels, mcm_window) for br in branches})
        self.catm = nn.ModuleDict({
            br: CATM(channels, parts, kernel_size, layers, heads, pe, ff_mult) for br in branches
        }) if use_global else None

    def forward(self, volumes: dict[str, torch.Tensor]) -> dict:
        out: dict = {"logits": {}, "preds": {}, "tokens": {}}
        embeds = {br: None for br in self.branches}
        if self.pieg is not None:
            out["logits"], out["preds"], embeds = self.pieg(volumes)
        feats = {}
        for br in self.branches:
            e = self.mcm[br](horizontal_pool(volumes[br], self.parts))
            out["tokens"][br] = e
            g = self.catm[br](e, embeds[br]) if self.use_global else None
            loc = local_feature(e, self.tp) if self.use_local else None
            feats[br] = (g, loc)
        fine = feats.get("fine", (None, None))
        coarse = feats.get("coarse", (None, None))
        out["descriptor"] = fuse(fine[0], fine[1], coarse[0], coarse[1])
        return out
