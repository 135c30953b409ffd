"""Batch-all triplet loss over part descriptors plus prior-head cross-entropy."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

MARGIN = 0.25
ALPHA = 0.2


def part_distances(x: torch.Tensor) -> torch.Tensor:
    """(B, P, D) descriptors -> (B, B, P) per-part Euclidean distances.

    Exactly zero (with zero gradient) where two part vectors coincide.
    """
    diff = x[:, None] - x[None, :]
    sq = diff.pow(2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.where(pos, sq, torch.ones_like(sq)).sqrt(), torch.zeros_like(sq))


def triplet_loss_ba(dist: torch.Tensor, labels: torch.Tensor, margin: float = MARGIN):
    """Batch-all hinge over every (anchor, positive, negative), per part.

    Each part averages over its triplets with strictly positive loss (0 if
    none); parts are then averaged. Returns ``(loss, active_fraction)``.
    """
    labels = torch.as_tensor(labels, device=dist.device)
    b = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(b, dtype=torch.bool, device=dist.device)
    valid = (same & ~eye)[:, :, None] & (~same)[:, None, :]  # (a, p, n)
    n_valid = int(valid.sum())
    d = dist.permute(2, 0, 1)  # (P, B, B)
    if n_valid == 0:
        log.warning("batch has no valid triplet")
        return dist.sum() * 0.0, 0.0
    hinge = F.relu(d[:, :, :, None] - d[:, :, None, :] + margin)  # (P, a, p, n)
    hinge = hinge * valid
    active = (hinge > 0).flatten(1).sum(1)
    per_part = hinge.flatten(1).sum(1) / active.clamp_min(1)
    frac = float(active.sum()) / (n_valid * d.shape[0])
    return per_part.mean(), frac


def prior_ce(logits: dict[str, torch.Tensor], labels: dict[str, torch.Tensor]) -> torch.Tensor:
    """Mean softmax cross-entropy per prior head, summed over heads."""
    total = None
    for name, z in logits.items():
        ce = F.cross_entropy(z, torch.as_tensor(labels[name], device=z.device))
        total = ce if total is None else total + ce
    if total is None:
        return torch.zeros(())
    return total


@dataclass
class LossReport:
    total: float
    triplet: float
    ce: float
    active_frac: float = 0.0
    prior_acc: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_loss(triplet, ce, alpha: float = ALPHA):
    """``triplet + alpha * ce``; raises ``FloatingPointError`` when non-finite."""
    total = triplet + alpha * ce
    if not math.isfinite(_scalar(total)):
        raise FloatingPointError(f"loss diverged (triplet={_scalar(triplet)}, ce={_scalar(ce)})")
    return total
