"""Silhouette ingestion, dataset manifests, clip sampling and P x K batch sampling.

On-disk layout mirrors CASIA-B::

    ROOT/<subject>/<condition>-<index>/<view>/<frame>.png
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

FRAME_H = 64
FRAME_W = 44
THRESHOLD = 127
IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True)
class SampleMeta:
    subject: str
    condition: str
    view: str
    seq_index: int
    condition_idx: int = 0
    view_idx: int = 0

    @property
    def key(self) -> tuple:
        return (self.subject, self.condition, self.view, self.seq_index)


@dataclass
class SilhouetteSequence:
    frames: np.ndarray  # (T, H, W) uint8 in {0, 1}
    meta: SampleMeta | None = None

    def __post_init__(self):
        if self.frames.ndim != 3 or len(self.frames) == 0:
            raise ValueError("a sequence needs at least one (H, W) frame")

    def __len__(self) -> int:
        return len(self.frames)


def binarize(img: np.ndarray, threshold: int = THRESHOLD) -> np.ndarray:
    return (np.asarray(img) > threshold).astype(np.uint8)


def _nearest_index(dst: int, src: int) -> np.ndarray:
    # centre-aligned nearest neighbour in integer arithmetic
    return ((2 * np.arange(dst) + 1) * src) // (2 * dst)


def normalize_frame(mask: np.ndarray, out_h: int = FRAME_H, out_w: int = FRAME_W,
                    return_clipped: bool = False):
    """Crop to the vertical foreground extent, resize to ``out_h`` rows keeping aspect,
    and centre horizontally on the foreground centroid in an ``out_w``-wide window.

    Returns ``None`` for an empty mask. Frames that already satisfy the layout
    (full height, centred) come back unchanged.
    """
    mask = np.asarray(mask, dtype=np.uint8)
    rows = np.flatnonzero(mask.any(1))
    if rows.size == 0:
        return (None, 0) if return_clipped else None
    crop = mask[rows[0]: rows[-1] + 1]
    h, w = crop.shape
    new_w = max(1, (w * out_h * 2 + h) // (2 * h))
    resized = crop[_nearest_index(out_h, h)][:, _nearest_index(new_w, w)]
    xs = np.nonzero(resized)[1]
    cx = int(np.floor(xs.mean() + 0.5))
    left = cx - out_w // 2
    out = np.zeros((out_h, out_w), dtype=np.uint8)
    src_lo, src_hi = max(left, 0), min(left + out_w, new_w)
    if src_hi > src_lo:
        out[:, src_lo - left: src_hi - left] = resized[:, src_lo:src_hi]
    clipped = int(resized.sum()) - int(out.sum())
    return (out, clipped) if return_clipped else out


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def list_frames(path: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_sequence(path: str | os.PathLike, meta: SampleMeta | None = None,
                  out_h: int = FRAME_H, out_w: int = FRAME_W) -> SilhouetteSequence:
    """Load a directory of PNG/PGM frames in filename order as a normalized binary sequence."""
    files = list_frames(path)
    if not files:
        raise ValueError(f"no frames in {path}")
    frames = []
    for f in files:
        norm = normalize_frame(binarize(read_image(f)), out_h, out_w)
        if norm is None:
            log.warning("dropping empty frame %s", f)
            continue
        frames.append(norm)
    if not frames:
        raise ValueError(f"empty sequence: every frame in {path} has zero foreground")
    return SilhouetteSequence(np.stack(frames), meta)


def write_sequence(frames: np.ndarray, path: str | os.PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        Image.fromarray((np.asarray(frame) * 255).astype(np.uint8), mode="L").save(path / f"{i:03d}.png")


@dataclass
class ManifestEntry:
    path: str
    meta: SampleMeta
    split: str = "train"
    descriptor: dict | None = None

    def to_json(self) -> dict:
        d = {"path": self.path, "subject": self.meta.subject, "condition": self.meta.condition,
             "view": self.meta.view, "seq_index": self.meta.seq_index, "split": self.split}
        if self.descriptor is not None:
            d["descriptor"] = self.descriptor
        return d


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    protocol_name: str = "none"
    conditions: list[str] = field(default_factory=list)
    views: list[str] = field(default_factory=list)

    def __post_init__(self):
        keys = [e.meta.key for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (subject, condition, view, seq_index) in manifest")

    def __len__(self) -> int:
        return len(self.entries)

    def subjects(self, split: str | None = None) -> list[str]:
        return sorted({e.meta.subject for e in self.entries if split is None or e.split == split})

    def select(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def check_disjoint(self) -> None:
        overlap = set(self.subjects("train")) & set(self.subjects("test"))
        if overlap:
            raise ValueError(f"train/test subjects overlap: {sorted(overlap)[:5]}")

    def to_json(self) -> dict:
        return {"protocol": self.protocol_name, "conditions": self.conditions, "views": self.views,
                "entries": [e.to_json() for e in self.entries]}

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        conditions = list(d.get("conditions") or sorted({e["condition"] for e in d["entries"]}))
        views = list(d.get("views") or sorted({e["view"] for e in d["entries"]}))
        entries = [
            ManifestEntry(
                e["path"],
                SampleMeta(e["subject"], e["condition"], e["view"], int(e["seq_index"]),
                           conditions.index(e["condition"]), views.index(e["view"])),
                e.get("split", "train"), e.get("descriptor"),
            )
            for e in d["entries"]
        ]
        return cls(entries, d.get("protocol", "none"), conditions, views)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def scan_dataset(root: str | os.PathLike) -> DatasetManifest:
    """Build a manifest from a ``subject/cond-idx/view/`` tree (paths relative to root)."""
    root = Path(root)
    raw = []
    for seq_dir in sorted(root.glob("*/*/*")):
        if not seq_dir.is_dir() or not list_frames(seq_dir):
            continue
        subject, cond_idx, view = seq_dir.relative_to(root).parts
        cond, _, idx = cond_idx.rpartition("-")
        raw.append({"path": str(seq_dir.relative_to(root)), "subject": subject,
                    "condition": cond or cond_idx, "view": view, "seq_index": int(idx) if idx.isdigit() else 0})
    if not raw:
        raise ValueError(f"no sequences under {root}")
    return DatasetManifest.from_json({"entries": raw})


def _casia_lt(subject: str) -> str:
    return "train" if int(subject) <= 74 else "test"


def apply_protocol(manifest: DatasetManifest, name: str, num_train: int | None = None) -> DatasetManifest:
    """Assign train/test splits by subject.

    ``casia-b``: subjects 001-074 train, 075-124 test (large-sample training).
    ``synthetic``: the first ``num_train`` subjects in sorted order train, the rest test.
    """
    subjects = manifest.subjects()
    if name == "casia-b":
        split_of = _casia_lt
    elif name == "synthetic":
        n = len(subjects) * 5 // 8 if num_train is None else num_train
        if not 0 < n < len(subjects):
            raise ValueError(f"num_train must be in (0, {len(subjects)})")
        train = set(subjects[:n])
        split_of = lambda s: "train" if s in train else "test"  # noqa: E731
    else:
        raise ValueError(f"unknown protocol {name!r}")
    for e in manifest.entries:
        e.split = split_of(e.meta.subject)
    manifest.protocol_name = name
    manifest.check_disjoint()
    return manifest


def sample_clip(frames: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous window of ``t`` frames at a uniform start; shorter sequences wrap cyclically."""
    if t < 1:
        raise ValueError("clip length must be >= 1")
    n = len(frames)
    if n >= t:
        start = int(rng.integers(0, n - t + 1))
        return frames[start: start + t]
    return frames[np.arange(t) % n]


class BatchSampler:
    """Infinite stream of P subjects x K clips.

    Subjects are drawn without replacement within a batch; a subject's
    sequences are drawn without replacement when it has at least K of them.
    """

    def __init__(self, sequences: list[SilhouetteSequence], p: int, k: int, clip_len: int,
                 rng: np.random.Generator):
        self.sequences = sequences
        self.p, self.k, self.clip_len = p, k, clip_len
        self.rng = rng
        by_subject: dict[str, list[int]] = {}
        for i, s in enumerate(sequences):
            by_subject.setdefault(s.meta.subject, []).append(i)
        self.subjects = sorted(by_subject)
        self.by_subject = [by_subject[s] for s in self.subjects]
        if len(self.subjects) < p:
            raise ValueError(f"batch spec infeasible: {len(self.subjects)} subjects < P={p}")

    def draw_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (sequence indices, subject labels) for one batch."""
        subj = self.rng.choice(len(self.subjects), self.p, replace=False)
        idx, labels = [], []
        for s in subj:
            pool = self.by_subject[s]
            pick = self.rng.choice(len(pool), self.k, replace=len(pool) < self.k)
            idx.extend(pool[j] for j in pick)
            labels.extend([s] * self.k)
        return np.asarray(idx), np.asarray(labels)

    def __iter__(self) -> Iterator[dict]:
        return self

    def __next__(self) -> dict:
        idx, labels = self.draw_indices()
        clips = np.stack([sample_clip(self.sequences[i].frames, self.clip_len, self.rng) for i in idx])
        metas = [self.sequences[i].meta for i in idx]
        return {
            "clips": clips,
            "labels": labels,
            "view": np.asarray([m.view_idx for m in metas]),
            "condition": np.asarray([m.condition_idx for m in metas]),
        }

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def load_split(manifest: DatasetManifest, root: str | os.PathLike, split: str | None = None) -> list[SilhouetteSequence]:
    entries = manifest.entries if split is None else manifest.select(split)
    return [load_sequence(Path(root) / e.path, e.meta) for e in entries]
