"""Command-line entry point wiring all modules together.

Subcommands: train, infer, eval-landmarks, dataset-stats, synth-gen,
ablate, export-grid, replay.  Every run that produces artifacts writes a
``manifest.json`` next to them holding the command, the fully resolved
configuration, the seed, and content digests of file inputs; ``replay``
re-executes a manifest into a new directory and reproduces the outputs
bit-identically at desk scale.

Option precedence for training configuration: command-line flags beat
config-file values, which beat built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import evalkit, trainer
from .datamodel import (CheckpointError, ConfigError, TrainConfig, default_config,
                        derive_seed, load_checkpoint)

MANIFEST_VERSION = 1
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class CliError(RuntimeError):
    """A structured, user-facing command failure."""


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_path(path) -> str:
    """Content digest of a file, or of a directory's sorted file tree."""
    path = Path(path)
    if path.is_file():
        return _digest_file(path)
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(f"{p.relative_to(path)}:{_digest_file(p)}\n".encode())
        return h.hexdigest()
    raise CliError(f"input path does not exist: {path}")


def write_manifest(out_dir: Path, command: str, *, config: dict | None = None,
                   seed: int | None = None, inputs: dict | None = None,
                   outputs: list | None = None, replay: dict | None = None) -> Path:
    manifest = {
        "format_version": MANIFEST_VERSION,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": inputs or {},
        "outputs": outputs or [],
        "replay": replay or {},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _resolve_config(args) -> TrainConfig:
    """defaults < config file < explicit flags."""
    base = default_config(getattr(args, "attribute", None) or "glasses",
                          getattr(args, "scope", None) or "local")
    resolved = base.to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        resolved.update(json.loads(path.read_text()))
        if getattr(args, "attribute", None):
            resolved["attribute_name"] = args.attribute
    flag_map = {
        "image_size": "image_size", "alpha": "alpha", "beta": "beta",
        "learning_rate": "learning_rate", "batch_size": "batch_size",
        "iterations": "iterations", "gan_loss_mode": "gan_loss_mode",
        "seed": "seed", "checkpoint_every": "checkpoint_every",
        "width_scale": "width_scale",
    }
    for flag, field in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            resolved[field] = value
    if getattr(args, "attribute", None):
        resolved["attribute_name"] = args.attribute
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    resolved = {k: v for k, v in resolved.items() if k in known}
    return TrainConfig.from_dict(resolved)


def _training_pools(config: TrainConfig, source: str, synth_kind: str,
                    synth_n: int) -> tuple:
    """Returns (pools, input digests dict)."""
    if source == "synth":
        samples = data_mod.synth_generate(synth_n, config.image_size, synth_kind,
                                          derive_seed(config.seed, "train-data"))
        return data_mod.PairedImagePools.from_synth_samples(samples), {}
    path = Path(source)
    if (path / "dataset.json").is_file():
        samples = data_mod.load_synth_dataset(path)
        return (data_mod.PairedImagePools.from_synth_samples(samples),
                {str(path): digest_path(path)})
    raise CliError(f"--data must be 'synth' or an exported synthetic dataset "
                   f"directory, got {source!r}")


def _run_train(out_dir: Path, config: TrainConfig, *, mode: str, data_source: str,
               synth_kind: str, synth_n: int, resume: str | None) -> dict:
    pools, input_digests = _training_pools(config, data_source, synth_kind, synth_n)
    resume_from = load_checkpoint(resume) if resume else None
    trainer.train(config, pools, mode, out_dir=out_dir, resume_from=resume_from,
                  log_every=max(1, config.iterations // 10) if config.iterations else 0)
    outputs = ["final", "loss_log.jsonl"]
    for artifact in outputs:
        if not (out_dir / artifact).exists():
            raise CliError(f"expected artifact missing after training: {artifact}")
    replay = {"config": config.to_dict(), "mode": mode, "data": data_source,
              "synth_kind": synth_kind, "synth_n": synth_n}
    write_manifest(out_dir, "train", config=config.to_dict(), seed=config.seed,
                   inputs=input_digests, outputs=outputs, replay=replay)
    return replay


def cmd_train(args) -> int:
    config = _resolve_config(args)
    _run_train(Path(args.out), config, mode=args.mode, data_source=args.data,
               synth_kind=args.synth_kind, synth_n=args.synth_n, resume=args.resume)
    print(f"trained {config.iterations} iterations -> {args.out}/final")
    return 0


def _list_images(path: Path) -> list:
    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(p for p in path.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
        if not found:
            raise CliError(f"no image files in {path}")
        return found
    raise CliError(f"input path does not exist: {path}")


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    g0, g1, _ = trainer.models_from_checkpoint(ckpt)
    size = ckpt.config.image_size
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    direction = {"0to1": "0to1", "1to0": "1to0"}[args.direction]
    outputs = []
    images = _list_images(Path(args.infile))
    for path in images:
        x = data_mod.preprocess(Image.open(path), size)
        edited, residual = evalkit.manipulate((g0, g1), x, direction)
        edited_name = f"{path.stem}_edited.png"
        residual_name = f"{path.stem}_residual.png"
        Image.fromarray(data_mod.tensor_to_uint8(edited)).save(out_dir / edited_name)
        Image.fromarray(data_mod.tensor_to_uint8(
            evalkit.residual_to_display(residual))).save(out_dir / residual_name)
        outputs += [edited_name, residual_name]
    write_manifest(out_dir, "infer", seed=ckpt.config.seed,
                   inputs={str(p): digest_path(p) for p in [Path(args.ckpt), Path(args.infile)]},
                   outputs=outputs,
                   replay={"ckpt": str(args.ckpt), "infile": str(args.infile),
                           "direction": args.direction})
    print(f"wrote {len(outputs)} files to {out_dir}")
    return 0


def _build_detector(args):
    if args.detector_cmd:
        return evalkit.ExternalDetector(args.detector_cmd.split())
    if args.detector == "noisy-oracle":
        return evalkit.NoisyOracleDetector()
    if args.detector == "synthetic-oracle":
        return evalkit.SyntheticOracleDetector()
    raise CliError(f"unknown detector {args.detector!r}")


def cmd_eval_landmarks(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    size = ckpt.config.image_size
    samples = data_mod.synth_generate(2 * args.n_eval, size, args.synth_kind,
                                      derive_seed(args.seed, "landmark-eval"))
    d0 = evalkit.eval_images_from_synth(samples[:args.n_eval], "neg")
    d1 = evalkit.eval_images_from_synth(samples[args.n_eval:], "pos")
    detector = _build_detector(args)
    summary = evalkit.landmark_gain_eval(ckpt, d0, d1, detector)
    out_dir = Path(args.out)
    summary.save(out_dir)
    write_manifest(out_dir, "eval-landmarks", seed=args.seed,
                   inputs={str(args.ckpt): digest_path(args.ckpt)},
                   outputs=["landmark_summary.csv", "landmark_summary.txt"],
                   replay={"ckpt": str(args.ckpt), "n_eval": args.n_eval,
                           "seed": args.seed, "synth_kind": args.synth_kind,
                           "detector": args.detector, "detector_cmd": args.detector_cmd})
    print(summary.to_text())
    return 0


def cmd_dataset_stats(args) -> int:
    index = data_mod.parse_attribute_index(Path(args.attr_file))
    attr_a, attr_b = args.pair
    corr = data_mod.attribute_correlation(index, attr_a, attr_b)
    col_a, col_b = index.column(attr_a), index.column(attr_b)
    lines = [
        f"rows: {len(index.rows)}",
        f"{attr_a}: {int(col_a.sum())} positive / {int((1 - col_a).sum())} negative",
        f"{attr_b}: {int(col_b.sum())} positive / {int((1 - col_b).sum())} negative",
        f"pearson({attr_a}, {attr_b}) = {corr:.4f}",
    ]
    text = "\n".join(lines)
    print(text)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "stats.txt").write_text(text + "\n")
        write_manifest(out_dir, "dataset-stats",
                       inputs={args.attr_file: digest_path(args.attr_file)},
                       outputs=["stats.txt"],
                       replay={"attr_file": args.attr_file, "pair": list(args.pair)})
    return 0


def cmd_synth_gen(args) -> int:
    samples = data_mod.synth_generate(args.n, args.size, args.kind, args.seed)
    out_dir = Path(args.out)
    data_mod.export_synth_dataset(samples, out_dir)
    outputs = sorted(p.name for p in out_dir.iterdir())
    write_manifest(out_dir, "synth-gen", seed=args.seed, outputs=outputs,
                   replay={"n": args.n, "size": args.size, "kind": args.kind,
                           "seed": args.seed})
    print(f"wrote {len(samples)} sample pairs to {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    config = _resolve_config(args)
    out_dir = Path(args.out)
    held_out = data_mod.synth_generate(
        args.n_heldout, config.image_size, args.synth_kind,
        derive_seed(config.seed, "ablate-heldout"))
    rows = ["mode,oracle_win_rate,mean_edited_l1,mean_input_l1,mean_localization"]
    results = {}
    for mode in trainer.ABLATION_MODES:
        run_dir = out_dir / mode.replace("-", "_")
        _run_train(run_dir, config, mode=mode, data_source=args.data,
                   synth_kind=args.synth_kind, synth_n=args.synth_n, resume=None)
        ckpt = load_checkpoint(run_dir / "final")
        g0, g1, _ = trainer.models_from_checkpoint(ckpt)
        pairs = evalkit.oracle_paired_l1((g0, g1), held_out, direction="1to0",
                                         residual_mode=(mode != "no-residual"))
        wins = sum(1 for edited, base in pairs if edited < base) / len(pairs)
        mean_edited = sum(e for e, _ in pairs) / len(pairs)
        mean_input = sum(b for _, b in pairs) / len(pairs)
        loc = evalkit.mean_residual_localization((g0, g1), held_out, direction="1to0")
        rows.append(f"{mode},{wins:.4f},{mean_edited:.5f},{mean_input:.5f},{loc:.4f}")
        results[mode] = (wins, mean_edited)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text("\n".join(rows) + "\n")
    write_manifest(out_dir, "ablate", config=config.to_dict(), seed=config.seed,
                   outputs=["ablation.csv"],
                   replay={"config": config.to_dict(), "data": args.data,
                           "synth_kind": args.synth_kind, "synth_n": args.synth_n,
                           "n_heldout": args.n_heldout})
    print("\n".join(rows))
    return 0


def cmd_export_grid(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    g0, g1, _ = trainer.models_from_checkpoint(ckpt)
    size = ckpt.config.image_size
    images = _list_images(Path(args.infile))[:args.max_images]
    originals, edited_row, residual_row = [], [], []
    for path in images:
        x = data_mod.preprocess(Image.open(path), size)
        edited, residual = evalkit.manipulate((g0, g1), x, args.direction)
        originals.append(x)
        edited_row.append(edited)
        residual_row.append(evalkit.residual_to_display(residual))
    out_path = Path(args.out)
    evalkit.export_grid([originals, edited_row, residual_row], out_path)
    write_manifest(out_path.parent, "export-grid", seed=ckpt.config.seed,
                   inputs={str(args.infile): digest_path(args.infile)},
                   outputs=[out_path.name],
                   replay={"ckpt": str(args.ckpt), "infile": str(args.infile),
                           "direction": args.direction, "max_images": args.max_images})
    print(f"wrote {out_path}")
    return 0


def cmd_replay(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        raise CliError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    command = manifest.get("command")
    replay = manifest.get("replay") or {}
    out_dir = Path(args.out)
    if command == "train":
        config = TrainConfig.from_dict(replay["config"])
        _run_train(out_dir, config, mode=replay["mode"], data_source=replay["data"],
                   synth_kind=replay["synth_kind"], synth_n=replay["synth_n"],
                   resume=None)
    elif command == "synth-gen":
        ns = argparse.Namespace(out=str(out_dir), **replay)
        cmd_synth_gen(ns)
    else:
        raise CliError(f"replay supports train and synth-gen manifests, got {command!r}")
    print(f"replayed {command} -> {out_dir}")
    return 0


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file mirroring TrainConfig fields")
    p.add_argument("--attribute", help="attribute name (default glasses)")
    p.add_argument("--scope", choices=["local", "global"],
                   help="attribute scope for default weights (default local)")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--gan-loss-mode", dest="gan_loss_mode",
                   choices=["target-class", "paper-literal"])
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--width-scale", dest="width_scale", type=float)


def _add_train_data_flags(p):
    p.add_argument("--data", default="synth",
                   help="'synth' or an exported synthetic dataset directory")
    p.add_argument("--synth-kind", default="glasses-like", choices=data_mod.SYNTH_KINDS)
    p.add_argument("--synth-n", type=int, default=256,
                   help="sample pairs to render when --data synth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resedit",
        description="Residual-image face attribute manipulation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the two transformation networks")
    _add_config_flags(p)
    _add_train_data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="full", choices=trainer.ABLATION_MODES)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="apply an attribute edit to images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--direction", required=True, choices=evalkit.DIRECTIONS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval-landmarks", help="landmark detection gain protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-eval", dest="n_eval", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--synth-kind", default="glasses-like", choices=data_mod.SYNTH_KINDS)
    p.add_argument("--detector", default="noisy-oracle",
                   choices=["noisy-oracle", "synthetic-oracle"])
    p.add_argument("--detector-cmd", dest="detector_cmd",
                   help="external detector command (line protocol)")
    p.set_defaults(func=cmd_eval_landmarks)

    p = sub.add_parser("dataset-stats", help="attribute index statistics")
    p.add_argument("--attr-file", dest="attr_file", required=True)
    p.add_argument("--pair", nargs=2, required=True, metavar=("ATTR_A", "ATTR_B"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset_stats)

    p = sub.add_parser("synth-gen", help="render a synthetic paired dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--kind", default="glasses-like", choices=data_mod.SYNTH_KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("ablate", help="train full / no-residual / no-dual and compare")
    _add_config_flags(p)
    _add_train_data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-heldout", dest="n_heldout", type=int, default=100)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-grid", help="tile originals, edits, and residuals")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--direction", default="1to0", choices=evalkit.DIRECTIONS)
    p.add_argument("--out", required=True)
    p.add_argument("--max-images", dest="max_images", type=int, default=8)
    p.set_defaults(func=cmd_export_grid)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (CliError, CheckpointError, ConfigError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
