"""Training loop: two-group AdamW, piecewise-constant LR, JSON-lines log, exact resume."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_archive, save_archive
from .data import BatchSampler, SilhouetteSequence
from .model import GaitGS, ModelConfig, build_model
from .objective import ALPHA, MARGIN, LossReport, part_distances, prior_ce, total_loss, triplet_loss_ba

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    transformer_lr_mult: float = 0.1
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    margin: float = MARGIN
    alpha: float = ALPHA
    batch_p: int = 8
    batch_k: int = 8
    clip_len: int = 30
    iterations: int = 1000
    # (iteration, new base lr): applies to every iteration after the given one
    schedule: list[tuple[int, float]] = field(default_factory=list)
    seed: int = 0
    checkpoint_interval: int = 0
    dtype: str = "float32"
    threads: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.schedule = [(int(i), float(v)) for i, v in self.schedule]
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        its = [i for i, _ in self.schedule]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("schedule iterations must be strictly increasing")
        if any(v <= 0 for _, v in self.schedule):
            raise ValueError("scheduled lr must be positive")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def lr_at(self, iteration: int) -> float:
        lr = self.lr
        for it, v in self.schedule:
            if iteration > it:
                lr = v
        return lr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["schedule"] = [list(s) for s in self.schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


TRAIN_PRESETS = {
    "casia-b": TrainConfig(batch_p=8, batch_k=8, iterations=80_000, schedule=[(70_000, 1e-5)]),
    "oumvlp": TrainConfig(batch_p=32, batch_k=8, iterations=210_000, schedule=[(150_000, 1e-5), (200_000, 1e-6)]),
    "grew": TrainConfig(batch_p=32, batch_k=4, iterations=190_000, schedule=[(150_000, 1e-5)]),
    "desk": TrainConfig(lr=1e-3, batch_p=8, batch_k=4, iterations=1500, schedule=[(1200, 1e-4)]),
}


def build_optimizer(model: GaitGS, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with the encoder stacks in their own group at ``transformer_lr_mult`` x lr."""
    tf = {id(p) for _, p in model.transformer_parameters()}
    other = [p for p in model.parameters() if id(p) not in tf]
    encoder = [p for p in model.parameters() if id(p) in tf]
    if not other and not encoder:
        raise ValueError("no parameters to optimize")
    groups = []
    if other:
        groups.append({"params": other, "lr": cfg.lr, "lr_mult": 1.0, "name": "base"})
    if encoder:
        groups.append({"params": encoder, "lr": cfg.lr * cfg.transformer_lr_mult,
                       "lr_mult": cfg.transformer_lr_mult, "name": "transformer"})
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                             weight_decay=cfg.weight_decay, foreach=False)


def set_lr(opt: torch.optim.Optimizer, base_lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = base_lr * g["lr_mult"]


class Trainer:
    """Owns the model, optimizer and sampler for one run.

    ``iteration`` counts completed optimizer steps; log records are numbered
    from 1.
    """

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, sequences: list[SilhouetteSequence],
                 out_dir: str | os.PathLike | None = None, on_checkpoint=None):
        self.on_checkpoint = on_checkpoint
        self.model_cfg = model_cfg
        self.cfg = cfg
        torch.set_num_threads(cfg.threads)
        self.dtype = DTYPES[cfg.dtype]
        self.model = build_model(model_cfg, cfg.seed, self.dtype)
        self.model.train()
        self.opt = build_optimizer(self.model, cfg)
        self.sampler = BatchSampler(sequences, cfg.batch_p, cfg.batch_k, cfg.clip_len,
                                    np.random.default_rng([cfg.seed, 0xBA7C]))
        self.iteration = 0
        self.history: list[dict] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._names = {id(p): n for n, p in self.model.named_parameters()}

    @property
    def log_path(self) -> Path | None:
        return self.out_dir / "train_log.jsonl" if self.out_dir is not None else None

    def step(self) -> dict:
        it = self.iteration + 1
        set_lr(self.opt, self.cfg.lr_at(it))
        batch = next(self.sampler)
        x = torch.as_tensor(batch["clips"], dtype=self.dtype)
        labels = torch.as_tensor(batch["labels"])
        prior_labels = {name: torch.as_tensor(batch[name]) for name in self.model_cfg.priors}
        try:
            out = self.model(x)
            trip, frac = triplet_loss_ba(part_distances(out["descriptor"]), labels, self.cfg.margin)
            ce = prior_ce(out["logits"], prior_labels)
            loss = total_loss(trip, ce, self.cfg.alpha)
        except FloatingPointError as e:
            self._diverged(str(e))
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.model.clamp_()
        self.iteration = it
        accs = [float((out["preds"][n] == prior_labels[n]).double().mean()) for n in out["preds"]]
        report = LossReport(float(loss.detach()), float(trip.detach()), float(ce.detach()), frac, float(np.mean(accs)) if accs else 0.0)
        record = {"iter": it, **report.to_json(),
                  "lr": self.opt.param_groups[0]["lr"],
                  "lr_groups": {g["name"]: g["lr"] for g in self.opt.param_groups},
                  "prior": {n: {"pred": out["preds"][n].tolist(), "true": prior_labels[n].tolist()}
                            for n in out["preds"]}}
        self.history.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        return record

    def _diverged(self, msg: str):
        if self.out_dir is not None:
            self.save(self.out_dir / "diverged.ckpt")
        raise TrainingDiverged(f"iteration {self.iteration + 1}: {msg}")

    def run(self, until: int | None = None) -> "Trainer":
        until = self.cfg.iterations if until is None else until
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        while self.iteration < until:
            rec = self.step()
            if rec["iter"] % 100 == 0:
                log.info("iter %d loss %.4f tri %.4f ce %.4f active %.3f prior_acc %.3f", rec["iter"],
                         rec["total"], rec["triplet"], rec["ce"], rec["active_frac"], rec["prior_acc"])
            ci = self.cfg.checkpoint_interval
            if self.out_dir is not None and ci and self.iteration % ci == 0:
                self.save(self.out_dir / f"iter_{self.iteration:06d}.ckpt")
        return self

    # -- checkpoints -----------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = dict(self.model.state_dict())
        for p, st in self.opt.state.items():
            name = self._names[id(p)]
            for k, v in st.items():
                tensors[f"optim.{name}.{k}"] = torch.as_tensor(v)
        return tensors

    def manifest(self) -> dict:
        return {
            "iteration": self.iteration,
            "config_hash": self.model_cfg.hash(),
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "rng_state": self.sampler.get_state(),
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        save_archive(path, self.state_tensors(), self.manifest())
        if self.on_checkpoint is not None:
            self.on_checkpoint(path)
        return path

    def load(self, path: str | os.PathLike) -> "Trainer":
        tensors, man = load_archive(path)
        if man.get("config_hash") != self.model_cfg.hash():
            raise CheckpointError("checkpoint was written for a different model config")
        model_state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
        self.model.load_state_dict({k: v.to(self.dtype) if v.is_floating_point() else v
                                    for k, v in model_state.items()})
        by_name = {n: p for n, p in self.model.named_parameters()}
        self.opt.state.clear()
        for k, v in tensors.items():
            if not k.startswith("optim."):
                continue
            pname, key = k[len("optim."):].rsplit(".", 1)
            p = by_name[pname]
            self.opt.state[p][key] = v.to(torch.float32) if key == "step" else v.to(self.dtype)
        self.iteration = int(man["iteration"])
        self.sampler.set_state(man["rng_state"])
        return self


def train(model_cfg: ModelConfig, cfg: TrainConfig, sequences: list[SilhouetteSequence],
          out_dir: str | os.PathLike | None = None, resume: str | os.PathLike | None = None,
          on_checkpoint=None) -> Trainer:
    """Run (or resume) a training job and write ``final.ckpt`` when ``out_dir`` is set.

    ``on_checkpoint(path)`` is called after every checkpoint write.
    """
    trainer = Trainer(model_cfg, cfg, sequences, out_dir, on_checkpoint)
    if resume is not None:
        trainer.load(resume)
    trainer.run()
    if trainer.out_dir is not None:
        trainer.save(trainer.out_dir / "final.ckpt")
    return trainer


def load_model(path: str | os.PathLike, dtype: torch.dtype | None = None) -> tuple[GaitGS, dict]:
    """Rebuild the model from a checkpoint; verifies the stored config hash."""
    tensors, man = load_archive(path)
    try:
        cfg = ModelConfig.from_dict(man["model_config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid model config ({e})") from e
    if cfg.hash() != man.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    dtype = dtype or DTYPES.get(man.get("train_config", {}).get("dtype", "float32"), torch.float32)
    model = GaitGS(cfg).to(dtype)
    state = {k: v.to(dtype) if v.is_floating_point() else v for k, v in tensors.items()
             if not k.startswith("optim.")}
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not match config ({e})") from e
    model.eval()
    return model, man
