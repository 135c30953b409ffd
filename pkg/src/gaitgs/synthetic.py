"""Procedural articulated walker rendered to normalized 64x44 binary silhouettes.

A subject is a vector of limb lengths/widths plus dynamics (gait period,
stride, arm swing, knee flex); identity therefore lives both in shape and in
motion. A view is a horizontal scale + shear of the side-view figure.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (FRAME_H, FRAME_W, DatasetManifest, ManifestEntry, SampleMeta, SilhouetteSequence,
                   normalize_frame, write_sequence)

CONDITIONS = {"none": "nm", "coat": "cl", "bag": "bg"}
CANVAS_H = 128
CANVAS_W = 128
GROUND = 120.0  # canvas row of the ground line


@dataclass
class SyntheticGaitParams:
    subject_seed: int
    period: float
    torso_length: float
    torso_width: float
    thigh_length: float
    shin_length: float
    leg_width: float
    arm_length: float
    arm_width: float
    head_radius: float
    stride_amplitude: float
    arm_amplitude: float
    knee_amplitude: float
    lean: float
    view: float = 90.0
    condition: str = "none"
    noise: float = 0.0
    phase: float = 0.0
    num_frames: int = 40
    seq_seed: int = 0
    master_seed: int = 0

    def __post_init__(self):
        if self.period <= 4:
            raise ValueError("gait period must exceed 4 frames")
        if not 0.0 <= self.view <= 180.0:
            raise ValueError("view angle must lie in [0, 180]")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition modifier {self.condition!r}")
        if not 0.0 <= self.noise <= 0.05:
            raise ValueError("noise level must lie in [0, 0.05]")

    def geometry(self) -> np.ndarray:
        return np.array([self.torso_length, self.torso_width, self.thigh_length, self.shin_length,
                         self.leg_width, self.arm_length, self.arm_width, self.head_radius])

    def to_json(self) -> dict:
        return asdict(self)


def subject_params(master_seed: int, subject_index: int) -> dict:
    """Identity parameters of one subject, a pure function of (master_seed, subject_index)."""
    rng = np.random.default_rng([int(master_seed), int(subject_index), 0x5EED])
    u = rng.uniform
    return {
        "subject_seed": int(rng.integers(0, 2 ** 31)),
        "period": u(18.0, 30.0),
        "torso_length": u(28.0, 40.0),
        "torso_width": u(8.0, 16.0),
        "thigh_length": u(20.0, 28.0),
        "shin_length": u(20.0, 28.0),
        "leg_width": u(4.0, 8.0),
        "arm_length": u(26.0, 38.0),
        "arm_width": u(3.0, 6.0),
        "head_radius": u(5.0, 9.0),
        "stride_amplitude": u(0.25, 0.5),
        "arm_amplitude": u(0.15, 0.6),
        "knee_amplitude": u(0.2, 0.9),
        "lean": u(-0.08, 0.12),
    }


def _capsule(mask, yy, xx, p0, p1, r):
    (x0, y0), (x1, y1) = p0, p1
    lo_x, hi_x = int(max(min(x0, x1) - r - 1, 0)), int(min(max(x0, x1) + r + 2, mask.shape[1]))
    lo_y, hi_y = int(max(min(y0, y1) - r - 1, 0)), int(min(max(y0, y1) + r + 2, mask.shape[0]))
    if lo_x >= hi_x or lo_y >= hi_y:
        return
    py, px = yy[lo_y:hi_y, lo_x:hi_x], xx[lo_y:hi_y, lo_x:hi_x]
    dx, dy = x1 - x0, y1 - y0
    denom = dx * dx + dy * dy
    s = np.clip(((px - x0) * dx + (py - y0) * dy) / denom, 0.0, 1.0) if denom > 0 else 0.0
    d2 = (px - x0 - s * dx) ** 2 + (py - y0 - s * dy) ** 2
    mask[lo_y:hi_y, lo_x:hi_x] |= d2 <= r * r


def _ellipse(mask, yy, xx, c, ax, ay):
    cx, cy = c
    lo_x, hi_x = int(max(cx - ax - 1, 0)), int(min(cx + ax + 2, mask.shape[1]))
    lo_y, hi_y = int(max(cy - ay - 1, 0)), int(min(cy + ay + 2, mask.shape[0]))
    py, px = yy[lo_y:hi_y, lo_x:hi_x], xx[lo_y:hi_y, lo_x:hi_x]
    mask[lo_y:hi_y, lo_x:hi_x] |= ((px - cx) / ax) ** 2 + ((py - cy) / ay) ** 2 <= 1.0


def view_transform(view_deg: float):
    """Side-view body coords (x forward, y up from the ground) -> canvas (col, row)."""
    v = math.radians(view_deg)
    scale = 0.3 + 0.7 * math.sin(v)
    shear = 0.35 * math.cos(v)

    def apply(x: float, y: float) -> tuple[float, float]:
        return CANVAS_W / 2 + scale * x + shear * (y - 60.0), GROUND - y

    return apply


_YY, _XX = np.mgrid[0:CANVAS_H, 0:CANVAS_W].astype(np.float64)
_DISK2 = ndimage.generate_binary_structure(2, 1)
_DISK2 = ndimage.iterate_structure(_DISK2, 2)


def render_canvas(p: SyntheticGaitParams, t: int) -> np.ndarray:
    """Rasterize the walker at frame ``t`` on the full-resolution canvas."""
    phi = 2.0 * math.pi * t / p.period + p.phase
    tf = view_transform(p.view)
    mask = np.zeros((CANVAS_H, CANVAS_W), dtype=bool)
    leg = p.thigh_length + p.shin_length
    bob = 1.5 * math.cos(2.0 * phi)
    hip = (0.0, leg + bob)
    neck = (hip[0] + p.lean * p.torso_length, hip[1] + p.torso_length)
    cap = lambda a, b, r: _capsule(mask, _YY, _XX, tf(*a), tf(*b), r)  # noqa: E731

    for side in (0.0, math.pi):
        swing = phi + side
        thigh = p.stride_amplitude * math.sin(swing)
        knee_flex = p.knee_amplitude * max(0.0, math.sin(swing + 0.9))
        knee = (hip[0] + p.thigh_length * math.sin(thigh), hip[1] - p.thigh_length * math.cos(thigh))
        shin = thigh - knee_flex
        ankle = (knee[0] + p.shin_length * math.sin(shin), knee[1] - p.shin_length * math.cos(shin))
        toe = (ankle[0] + 0.3 * p.shin_length, ankle[1])
        cap(hip, knee, p.leg_width / 2)
        cap(knee, ankle, p.leg_width / 2 * 0.85)
        cap(ankle, toe, p.leg_width / 2 * 0.6)

        arm = -p.arm_amplitude * math.sin(swing)
        shoulder = (neck[0], neck[1] - 3.0)
        half = p.arm_length / 2
        elbow = (shoulder[0] + half * math.sin(arm), shoulder[1] - half * math.cos(arm))
        fore = arm + 0.4 * p.arm_amplitude * (1.0 + math.sin(swing))
        hand = (elbow[0] + half * math.sin(fore), elbow[1] - half * math.cos(fore))
        cap(shoulder, elbow, p.arm_width / 2)
        cap(elbow, hand, p.arm_width / 2 * 0.85)

    cap(hip, neck, p.torso_width / 2)
    head = tf(neck[0], neck[1] + p.head_radius + 1.0)
    _ellipse(mask, _YY, _XX, head, p.head_radius, p.head_radius)
    if p.condition == "bag":
        _ellipse(mask, _YY, _XX, tf(hip[0] + p.torso_width / 2 + 5.0, hip[1] + 4.0), 6.0, 8.0)
    if p.condition == "coat":
        mask = ndimage.binary_dilation(mask, structure=_DISK2)
    return mask.astype(np.uint8)


def render_sequence(p: SyntheticGaitParams) -> np.ndarray:
    """All frames of one synthetic sequence as (T, 64, 44) uint8; bit-exact given ``p``."""
    frames = np.empty((p.num_frames, FRAME_H, FRAME_W), dtype=np.uint8)
    for t in range(p.num_frames):
        frame = render_canvas(p, t)
        # nearest-neighbour downscaling can drop a thin top/bottom row; renormalizing
        # (pure upscaling from then on) reaches a fixed point that reloads unchanged
        for _ in range(4):
            nxt, clipped = normalize_frame(frame, return_clipped=True)
            if clipped:
                raise RuntimeError(f"walker leaves the frame at t={t} (clipped {clipped} px)")
            if nxt.shape == frame.shape and np.array_equal(nxt, frame):
                break
            frame = nxt
        frames[t] = frame
    if p.noise > 0:
        rng = np.random.default_rng([p.master_seed, p.seq_seed, 0x401])
        frames ^= (rng.random(frames.shape) < p.noise).astype(np.uint8)
    return frames


def _view_label(v: float) -> str:
    return f"{int(round(v)):03d}"


def generate_synthetic(num_subjects: int, views: list[float], conditions: list[str], seqs_per_cell: int,
                       frames_per_seq: int, master_seed: int, noise: float = 0.0,
                       out: str | Path | None = None) -> tuple[DatasetManifest, list[SilhouetteSequence]]:
    """Render a full synthetic dataset.

    Returns the manifest and the in-memory sequences (same order). With
    ``out`` set, frames are written as ``out/<subject>/<cond>-<idx>/<view>/NNN.png``
    alongside ``manifest.json`` and ``synthetic.json`` (per-sequence render
    descriptors, enough to re-render every frame exactly).
    """
    if num_subjects < 2:
        raise ValueError("need at least two subjects")
    cond_labels = [CONDITIONS[c] for c in conditions]
    view_labels = [_view_label(v) for v in views]
    entries, sequences = [], []
    for s in range(num_subjects):
        base = subject_params(master_seed, s)
        if frames_per_seq < base["period"]:
            raise ValueError(f"sequence shorter than one cycle ({frames_per_seq} < {base['period']:.1f})")
        subject = f"{s + 1:03d}"
        for ci, cond in enumerate(conditions):
            for vi, view in enumerate(views):
                for k in range(seqs_per_cell):
                    seq_seed = ((s * len(conditions) + ci) * len(views) + vi) * seqs_per_cell + k
                    rng = np.random.default_rng([master_seed, s, seq_seed, 0x5E0])
                    jitter = dict(base)
                    for name in ("stride_amplitude", "arm_amplitude", "knee_amplitude"):
                        jitter[name] = base[name] * float(rng.uniform(0.95, 1.05))
                    params = SyntheticGaitParams(
                        **jitter, view=float(view), condition=cond, noise=noise,
                        phase=float(rng.uniform(0, 2 * math.pi)), num_frames=frames_per_seq,
                        seq_seed=seq_seed, master_seed=master_seed,
                    )
                    meta = SampleMeta(subject, cond_labels[ci], view_labels[vi], k + 1, ci, vi)
                    path = f"{subject}/{cond_labels[ci]}-{k + 1:02d}/{view_labels[vi]}"
                    frames = render_sequence(params)
                    sequences.append(SilhouetteSequence(frames, meta))
                    entries.append(ManifestEntry(path, meta, "train", params.to_json()))
    manifest = DatasetManifest(entries, "none", cond_labels, view_labels)
    if out is not None:
        out = Path(out)
        for e, seq in zip(entries, sequences):
            write_sequence(seq.frames, out / e.path)
        manifest.save(out / "manifest.json")
        (out / "synthetic.json").write_text(json.dumps(
            {"master_seed": master_seed, "num_subjects": num_subjects, "views": list(views),
             "conditions": list(conditions), "seqs_per_cell": seqs_per_cell,
             "frames_per_seq": frames_per_seq, "noise": noise,
             "sequences": [e.descriptor for e in entries]}, indent=1))
    return manifest, sequences


def render_from_descriptor(d: dict) -> np.ndarray:
    return render_sequence(SyntheticGaitParams(**d))


def estimate_period(frames: np.ndarray, max_lag: int | None = None) -> int:
    """Dominant lag of the autocorrelation of per-frame foreground width.

    Width is the horizontal spread (standard deviation of foreground columns),
    which is smoother than the raw extent. Legs swap every half cycle, so the
    lag found is half the gait period.
    """
    width = np.array([np.nonzero(f)[1].std() if f.any() else 0.0 for f in frames])
    x = width - width.mean()
    n = len(x)
    max_lag = max_lag or n // 2
    ac = np.array([np.dot(x[:-lag], x[lag:]) / (n - lag) for lag in range(1, max_lag + 1)])
    # first local maximum after the first negative dip that reaches 70% of the best peak
    neg = np.flatnonzero(ac < 0)
    start = int(neg[0]) if neg.size else 0
    tail = ac[start:]
    best = tail.max()
    for i in range(1, len(tail) - 1):
        if tail[i] >= tail[i - 1] and tail[i] >= tail[i + 1] and tail[i] >= 0.7 * best:
            return start + i + 1
    return int(start + np.argmax(tail) + 1)
