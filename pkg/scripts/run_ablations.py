#!/usr/bin/env python3
"""Train the full model and both ablations on identical data, then compare
them on the paired-oracle L1 metric.

Equivalent to `resedit ablate` with the desk-scale preset.
"""

import argparse
import sys
from pathlib import Path

from resedit import evalkit, trainer
from resedit.config_presets import desk_scale_config, desk_training_pools, heldout_samples


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/ablations")
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--n-heldout", type=int, default=200)
    args = parser.parse_args(argv)

    cfg = desk_scale_config()
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)

    pools = desk_training_pools(cfg)
    held = heldout_samples(args.n_heldout, cfg.image_size)
    out = Path(args.out)
    lines = ["mode,oracle_win_rate,mean_edited_l1,mean_input_l1,mean_localization"]
    for mode in trainer.ABLATION_MODES:
        ckpt = trainer.train(cfg, pools, mode, out_dir=out / mode.replace("-", "_"),
                             log_every=max(1, cfg.iterations // 10))
        models = trainer.models_from_checkpoint(ckpt)[:2]
        pairs = evalkit.oracle_paired_l1(models, held, "1to0",
                                         residual_mode=(mode != "no-residual"))
        wins = sum(1 for e, b in pairs if e < b) / len(pairs)
        mean_e = sum(e for e, _ in pairs) / len(pairs)
        mean_b = sum(b for _, b in pairs) / len(pairs)
        loc = evalkit.mean_residual_localization(models, held, "1to0")
        lines.append(f"{mode},{wins:.4f},{mean_e:.5f},{mean_b:.5f},{loc:.4f}")
        print(lines[-1])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
