"""Descriptor extraction, cross-view rank-k evaluation and feature export."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .data import SampleMeta, SilhouetteSequence

RANKS = (1, 5, 10, 20)


@dataclass
class FeatureStore:
    metas: list[SampleMeta]
    features: np.ndarray  # (N, dim)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or len(self.features) != len(self.metas):
            raise ValueError("features must be (N, dim) with one row per meta")
        keys = [m.key for m in self.metas]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate metadata in feature store")

    def __len__(self) -> int:
        return len(self.metas)

    def subset(self, pred) -> "FeatureStore":
        idx = [i for i, m in enumerate(self.metas) if pred(m)]
        return FeatureStore([self.metas[i] for i in idx], self.features[idx])


@torch.no_grad()
def extract(model, seq: SilhouetteSequence | np.ndarray) -> np.ndarray:
    """Full-sequence descriptor (P, D); no clip sampling."""
    frames = seq.frames if isinstance(seq, SilhouetteSequence) else np.asarray(seq)
    if len(frames) < 3:
        raise ValueError(f"sequence too short: {len(frames)} frames (need >= 3)")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(frames), dtype=dtype)[None]
    out = model(x)["descriptor"][0].cpu().numpy()
    model.train(was_training)
    return out


def extract_store(model, sequences: list[SilhouetteSequence]) -> FeatureStore:
    feats = [extract(model, s).reshape(-1) for s in sequences]
    return FeatureStore([s.meta for s in sequences], np.stack(feats).astype(np.float32))


@dataclass
class RankTable:
    """Rank-k accuracies per (probe condition, probe view, gallery view) cell."""

    ks: tuple[int, ...]
    cells: dict[tuple[str, str, str], dict[int, float]]
    counts: dict[tuple[str, str, str], int] = field(default_factory=dict)
    invalid: int = 0

    def conditions(self) -> list[str]:
        return sorted({c for c, _, _ in self.cells})

    def probe_views(self, cond: str) -> list[str]:
        return sorted({pv for c, pv, _ in self.cells if c == cond})

    def gallery_views(self, cond: str) -> list[str]:
        return sorted({gv for c, _, gv in self.cells if c == cond})

    def probe_view_mean(self, cond: str, pview: str, k: int) -> float:
        vals = [acc[k] for (c, pv, _), acc in self.cells.items() if c == cond and pv == pview]
        return float(np.mean(vals))

    def condition_mean(self, cond: str, k: int) -> float:
        """Mean over gallery views within each probe view, then over probe views."""
        return float(np.mean([self.probe_view_mean(cond, pv, k) for pv in self.probe_views(cond)]))

    def condition_mean_gallery_first(self, cond: str, k: int) -> float:
        """Mean over probe views within each gallery view, then over gallery views."""
        per_g = []
        for gv in self.gallery_views(cond):
            per_g.append(np.mean([a[k] for (c, _, g), a in self.cells.items() if c == cond and g == gv]))
        return float(np.mean(per_g))

    def to_json(self) -> dict:
        conds = self.conditions()
        return {
            "ks": list(self.ks),
            "invalid_probes": self.invalid,
            "cells": [
                {"condition": c, "probe_view": pv, "gallery_view": gv, "n": self.counts.get((c, pv, gv), 0),
                 **{f"rank{k}": acc[k] for k in self.ks}}
                for (c, pv, gv), acc in sorted(self.cells.items())
            ],
            "probe_view_means": {
                c: {pv: {f"rank{k}": self.probe_view_mean(c, pv, k) for k in self.ks} for pv in self.probe_views(c)}
                for c in conds
            },
            "condition_means": {c: {f"rank{k}": self.condition_mean(c, k) for k in self.ks} for c in conds},
            "condition_means_gallery_first": {
                c: {f"rank{k}": self.condition_mean_gallery_first(c, k) for k in self.ks} for c in conds
            },
        }

    def to_text(self, k: int | None = None) -> str:
        """Views as columns, one row per probe condition, plus the row mean."""
        ks = self.ks if k is None else (k,)
        blocks = []
        for kk in ks:
            views = sorted({pv for _, pv, _ in self.cells})
            header = f"{'Rank-' + str(kk):>8} | " + " ".join(f"{v:>6}" for v in views) + " |   Mean"
            lines = [header, "-" * len(header)]
            for c in self.conditions():
                row = [f"{100 * self.probe_view_mean(c, v, kk):6.1f}" if v in self.probe_views(c) else f"{'-':>6}"
                       for v in views]
                lines.append(f"{c:>8} | " + " ".join(row) + f" | {100 * self.condition_mean(c, kk):6.1f}")
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks)


def rank_k(gallery: FeatureStore, probe: FeatureStore, ks=RANKS, exclude_identical_view: bool = True) -> RankTable:
    """Cross-view rank-k with Euclidean distance on flattened descriptors.

    For each probe and each gallery view (other than the probe's own when
    ``exclude_identical_view``), gallery samples of that view are ranked by
    ascending distance, ties broken by ascending metadata key. Probes whose
    subject is missing from a gallery view are excluded from that cell and
    counted in ``invalid``.
    """
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    ks = tuple(sorted(ks))
    dist = cdist(probe.features.astype(np.float64), gallery.features.astype(np.float64))
    key_rank = np.empty(len(gallery), dtype=np.int64)
    key_rank[sorted(range(len(gallery)), key=lambda i: gallery.metas[i].key)] = np.arange(len(gallery))
    g_subj = np.array([m.subject for m in gallery.metas])
    g_view = np.array([m.view for m in gallery.metas])
    hits: dict[tuple, np.ndarray] = {}
    counts: dict[tuple, int] = {}
    invalid = 0
    for i, pm in enumerate(probe.metas):
        for gv in sorted(set(g_view)):
            if exclude_identical_view and gv == pm.view:
                continue
            cand = np.flatnonzero(g_view == gv)
            if not (g_subj[cand] == pm.subject).any():
                invalid += 1
                continue
            order = cand[np.lexsort((key_rank[cand], dist[i, cand]))]
            match = g_subj[order] == pm.subject
            first = int(np.argmax(match))
            cell = (pm.condition, pm.view, gv)
            hit = np.array([first < k for k in ks], dtype=np.float64)
            hits[cell] = hits.get(cell, 0) + hit
            counts[cell] = counts.get(cell, 0) + 1
    cells = {c: {k: float(h[j] / counts[c]) for j, k in enumerate(ks)} for c, h in hits.items()}
    return RankTable(ks, cells, counts, invalid)


def _paths(prefix: str | os.PathLike) -> tuple[Path, Path]:
    prefix = str(prefix)
    return Path(prefix + ".f32"), Path(prefix + ".json")


def export_features(store: FeatureStore, prefix: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<prefix>.f32`` (row-major little-endian float32) and ``<prefix>.json``."""
    if len(store) == 0:
        raise ValueError("empty feature store")
    bin_path, side_path = _paths(prefix)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(np.ascontiguousarray(store.features, dtype="<f4").tobytes())
    rows = [{"subject": m.subject, "condition": m.condition, "view": m.view, "seq_index": m.seq_index,
             "condition_idx": m.condition_idx, "view_idx": m.view_idx} for m in store.metas]
    side_path.write_text(json.dumps({"n": len(store), "dim": int(store.features.shape[1]), "rows": rows}))
    return bin_path, side_path


def import_features(prefix: str | os.PathLike) -> FeatureStore:
    bin_path, side_path = _paths(prefix)
    side = json.loads(side_path.read_text())
    feats = np.frombuffer(bin_path.read_bytes(), dtype="<f4").reshape(side["n"], side["dim"])
    return FeatureStore([SampleMeta(**r) for r in side["rows"]], feats.astype(np.float32))


def gallery_probe(store: FeatureStore, protocol: str) -> tuple[FeatureStore, FeatureStore]:
    """Split a test-set store into gallery and probe.

    ``casia-b``: gallery nm-01..04; probes nm-05/06, bg, cl.
    ``synthetic``: odd ``seq_index`` is gallery, even is probe (all conditions).
    """
    if protocol == "casia-b":
        is_gallery = lambda m: m.condition == "nm" and m.seq_index <= 4  # noqa: E731
    elif protocol == "synthetic":
        is_gallery = lambda m: m.seq_index % 2 == 1  # noqa: E731
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return store.subset(is_gallery), store.subset(lambda m: not is_gallery(m))
