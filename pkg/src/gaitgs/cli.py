"""``gaitgs`` command line: synth, train, eval, export."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import PRESETS, ConfigError, format_value, load_config
from .data import DatasetManifest, apply_protocol, load_split, scan_dataset
from .evaluator import RANKS, export_features, extract_store, gallery_probe, rank_k
from .model import ModelConfig
from .synthetic import CONDITIONS, generate_synthetic
from .trainer import TrainingDiverged, load_model, train

log = logging.getLogger("gaitgs")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ARTIFACT = 0, 2, 3, 4

EXIT_CODES = """exit codes:
  0  success
  2  configuration or usage error
  3  training diverged (a diagnostic checkpoint is written to the run dir)
  4  artifact mismatch (unreadable/corrupted checkpoint, config hash mismatch)
"""


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="gaitgs", description="Gait recognition with multi-granularity and multi-span features.",
                epilog=EXIT_CODES, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic walker dataset", epilog=EXIT_CODES, formatter_class=fmt,
                       description="Render procedural walking silhouettes to OUT/<subject>/<cond>-<idx>/<view>/NNN.png "
                                   "plus manifest.json and synthetic.json.")
    s.add_argument("--out", required=True, type=Path, help="output directory")
    s.add_argument("--config", type=Path, help="config file (synth.* keys)")
    s.add_argument("--subjects", type=int, help="number of subjects (default 16)")
    s.add_argument("--views", type=_int_list, help="comma-separated view angles in degrees (default 0,30,60,90)")
    s.add_argument("--conditions", type=_str_list,
                   help=f"comma-separated conditions from {{{','.join(CONDITIONS)}}} (default none,coat)")
    s.add_argument("--seqs", type=int, help="sequences per (subject, condition, view) cell (default 2)")
    s.add_argument("--frames", type=int, help="frames per sequence (default 40)")
    s.add_argument("--noise", type=float, help="per-pixel flip probability in [0, 0.05] (default 0)")
    s.add_argument("--seed", type=int, help="master seed (default 7)")

    t = sub.add_parser("train", help="train a model", epilog=EXIT_CODES, formatter_class=fmt,
                       description="Train on the train split of a dataset. Precedence: defaults < --preset < "
                                   "--config < flags. The effective config is written next to every checkpoint "
                                   "as <checkpoint>.cfg and to OUT/config.cfg.")
    t.add_argument("--config", type=Path, help="flat key = value config file")
    t.add_argument("--preset", choices=PRESETS, help="named model+schedule preset")
    t.add_argument("--data", type=Path, help="dataset root (overrides data.root)")
    t.add_argument("--out", type=Path, required=True, help="run directory (checkpoints, train_log.jsonl)")
    t.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    t.add_argument("--iterations", type=int, help="overrides train.iterations")
    t.add_argument("--threads", type=int, help="intra-op threads (overrides train.threads)")
    t.add_argument("--resume", type=Path, help="checkpoint to resume from")
    t.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                   metavar="KEY=VALUE", help="override any config key, e.g. --set model.num_layers=2 (repeatable)")

    e = sub.add_parser("eval", help="rank-k evaluation of a checkpoint", epilog=EXIT_CODES, formatter_class=fmt,
                       description="Extract full-sequence descriptors for the test split and print cross-view "
                                   "rank-k accuracies (identical views excluded).")
    e.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")
    e.add_argument("--data", type=Path, required=True, help="dataset root")
    e.add_argument("--protocol", default="synthetic", choices=("synthetic", "casia-b"), help="split protocol")
    e.add_argument("--num-train", type=int, help="training subjects for the synthetic protocol")
    e.add_argument("--ranks", type=_int_list, default=list(RANKS), help="comma-separated k values (default 1,5,10,20)")
    e.add_argument("--include-identical-view", action="store_true", help="do not exclude same-view gallery cells")
    e.add_argument("--json", type=Path, help="also write the JSON table here")

    x = sub.add_parser("export", help="export test-split descriptors", epilog=EXIT_CODES, formatter_class=fmt,
                       description="Write PREFIX.f32 (row-major little-endian float32, one descriptor per row) "
                                   "and PREFIX.json {n, dim, rows}.")
    x.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")
    x.add_argument("--data", type=Path, required=True, help="dataset root")
    x.add_argument("--out", type=Path, required=True, help="output prefix")
    x.add_argument("--protocol", default="synthetic", choices=("synthetic", "casia-b"), help="split protocol")
    x.add_argument("--num-train", type=int, help="training subjects for the synthetic protocol")
    x.add_argument("--split", default="test", choices=("train", "test", "all"), help="which sequences to export")
    return p


def load_manifest(root: Path, protocol: str, num_train: int | None) -> DatasetManifest:
    if not root.is_dir():
        raise UsageError(f"dataset root {root} does not exist")
    path = root / "manifest.json"
    manifest = DatasetManifest.load(path) if path.exists() else scan_dataset(root)
    try:
        return apply_protocol(manifest, protocol, num_train)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_synth(args) -> int:
    flags = {"synth.subjects": args.subjects, "synth.views": args.views, "synth.conditions": args.conditions,
             "synth.seqs_per_cell": args.seqs, "synth.frames": args.frames, "synth.noise": args.noise,
             "synth.seed": args.seed}
    cfg = load_config(args.config, overrides={k: format_value(tuple(v) if isinstance(v, list) else v)
                                              for k, v in flags.items() if v is not None})
    sc = cfg.synth
    bad = [c for c in sc.conditions if c not in CONDITIONS]
    if bad:
        raise UsageError(f"unknown condition(s) {bad}; choose from {sorted(CONDITIONS)}")
    try:
        manifest, _ = generate_synthetic(sc.subjects, list(sc.views), list(sc.conditions), sc.seqs_per_cell,
                                         sc.frames, sc.seed, noise=sc.noise, out=args.out)
    except ValueError as e:
        raise UsageError(str(e)) from e
    print(f"wrote {len(manifest)} sequences to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    flags = dict(args.overrides)
    for key, val in (("data.root", args.data), ("train.seed", args.seed), ("train.iterations", args.iterations),
                     ("train.threads", args.threads)):
        if val is not None:
            flags[key] = str(val)
    cfg = load_config(args.config, preset=args.preset, overrides=flags)
    if not cfg.data.root:
        raise UsageError("no dataset given (use --data or data.root)")
    manifest = load_manifest(Path(cfg.data.root), cfg.data.protocol, cfg.data.num_train or None)
    views = len(manifest.views)
    if "view" in cfg.model.priors and cfg.model.priors["view"] != views:
        log.info("model.priors: view head resized to %d classes to match the dataset", views)
        cfg.set("model.priors", format_value({**cfg.model.priors, "view": views}))
    if "condition" in cfg.model.priors and cfg.model.priors["condition"] != len(manifest.conditions):
        cfg.set("model.priors", format_value({**cfg.model.priors, "condition": len(manifest.conditions)}))
    sequences = load_split(manifest, cfg.data.root, "train")
    out = Path(args.out)
    cfg.write(out / "config.cfg")
    trainer = train(cfg.model, cfg.train, sequences, out, resume=args.resume, on_checkpoint=cfg.write_beside)
    print(f"trained {trainer.iteration} iterations; final checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def _load_for_eval(path: Path):
    model, man = load_model(path)
    return model, ModelConfig.from_dict(man["model_config"])


def cmd_eval(args) -> int:
    model, _ = _load_for_eval(args.checkpoint)
    manifest = load_manifest(args.data, args.protocol, args.num_train)
    store = extract_store(model, load_split(manifest, args.data, "test"))
    gallery, probe = gallery_probe(store, args.protocol)
    table = rank_k(gallery, probe, tuple(args.ranks), exclude_identical_view=not args.include_identical_view)
    doc = table.to_json()
    print(json.dumps(doc, indent=1))
    print()
    print(table.to_text())
    if args.json:
        args.json.write_text(json.dumps(doc, indent=1))
    return EXIT_OK


def cmd_export(args) -> int:
    model, _ = _load_for_eval(args.checkpoint)
    manifest = load_manifest(args.data, args.protocol, args.num_train)
    seqs = load_split(manifest, args.data, None if args.split == "all" else args.split)
    bin_path, side_path = export_features(extract_store(model, seqs), args.out)
    print(f"wrote {bin_path} and {side_path}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"gaitgs {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"gaitgs {args.command}: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(f"gaitgs {args.command}: artifact mismatch: {e}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
