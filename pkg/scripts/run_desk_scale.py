#!/usr/bin/env python3
"""Reference desk-scale experiment: train the glasses-like edit, report the
oracle metrics, run the landmark-gain protocol, and export a picture grid.

Results land under --out (default runs/desk):
    full/                training run (checkpoints + loss log + manifest)
    landmarks/           landmark_summary.{csv,txt}
    panel.png            originals / edited / residuals
    report.txt           oracle paired L1, win rate, residual localization
"""

import argparse
import sys
import time
from pathlib import Path

import torch

from resedit import data, datamodel, evalkit, trainer
from resedit.config_presets import desk_scale_config, desk_training_pools, heldout_samples


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--mode", default="full", choices=trainer.ABLATION_MODES)
    args = parser.parse_args(argv)

    torch.set_num_threads(max(1, torch.get_num_threads()))
    cfg = desk_scale_config()
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)

    out = Path(args.out)
    t0 = time.time()
    pools = desk_training_pools(cfg)
    ckpt = trainer.train(cfg, pools, args.mode, out_dir=out / args.mode,
                         log_every=max(1, cfg.iterations // 20))
    print(f"training done in {(time.time() - t0) / 60:.1f} min")

    held = heldout_samples(200, cfg.image_size)
    models = trainer.models_from_checkpoint(ckpt)[:2]
    residual_mode = args.mode != "no-residual"
    pairs = evalkit.oracle_paired_l1(models, held, "1to0", residual_mode=residual_mode)
    wins = sum(1 for e, b in pairs if e < b) / len(pairs)
    mean_edited = sum(e for e, _ in pairs) / len(pairs)
    mean_input = sum(b for _, b in pairs) / len(pairs)
    loc = evalkit.mean_residual_localization(models, held, "1to0")
    report = [
        f"mode: {args.mode}",
        f"oracle win rate (1to0): {wins:.3f}",
        f"mean L1 edited vs target: {mean_edited:.5f}",
        f"mean L1 input  vs target: {mean_input:.5f}",
        f"mean residual localization: {loc:.3f}",
    ]
    (out / "report.txt").write_text("\n".join(report) + "\n")
    print("\n".join(report))

    d0 = evalkit.eval_images_from_synth(held[:100], "neg")
    d1 = evalkit.eval_images_from_synth(held[100:], "pos")
    summary = evalkit.landmark_gain_eval(ckpt, d0, d1, evalkit.NoisyOracleDetector())
    summary.save(out / "landmarks")
    print(summary.to_text())

    show = held[:6]
    originals = [s.image_pos for s in show]
    edited, residuals = [], []
    for s in show:
        x_edit, r = evalkit.manipulate(models, s.image_pos, "1to0", residual=residual_mode)
        edited.append(x_edit)
        residuals.append(evalkit.residual_to_display(r))
    evalkit.export_grid([originals, edited, residuals], out / "panel.png")
    print(f"wrote {out}/panel.png")
    return 0


if __name__ == "__main__":
    sys.exit(main())
