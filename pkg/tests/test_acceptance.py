"""Acceptance gate.

Each criterion runs at its stated tolerance and prints one pass/fail line
(visible with `pytest tests/test_acceptance.py -v -s`).  The desk-scale
criteria (4, 5, 6) train real models on the synthetic corpus and dominate
the runtime; everything else finishes in seconds.
"""

import json
import math
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
import _gradcheck

from resedit import cli, data, evalkit, losses, trainer
from resedit.config_presets import (DESK_ITERATIONS, desk_scale_config,
                                    desk_training_pools, heldout_samples)
from resedit.datamodel import (default_config, load_checkpoint, save_checkpoint)
from resedit.networks import (Discriminator, DiscriminatorSpec, Generator,
                              GeneratorSpec, compose, init_params)

torch.set_num_threads(2)

N_HELDOUT = 200
COLLAPSE_STEPS = 500
COLLAPSE_TOL = 1e-3


@contextmanager
def criterion(number, label):
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPTANCE] criterion {number} ({label}): FAIL", flush=True)
        raise
    print(f"\n[ACCEPTANCE] criterion {number} ({label}): PASS", flush=True)


# ---------------------------------------------------------------------------
# 1. loss unit suite
# ---------------------------------------------------------------------------

def test_criterion_1_loss_unit_suite():
    with criterion(1, "loss unit suite"):
        tol = 1e-6

        def row(p0, p1, p2):
            return torch.tensor([[p0, p1, p2]], dtype=torch.float64)

        uniform = row(1 / 3, 1 / 3, 1 / 3)
        assert abs(losses.classification_loss(uniform, 0).item() - math.log(3)) < tol
        assert abs(losses.classification_loss(row(0.2, 0.5, 0.3), 1).item()
                   + math.log(0.5)) < tol
        assert losses.classification_loss(row(1, 0, 0), 0).item() < tol
        assert losses.pixel_sparsity_loss(torch.tensor([1.0, -1.0, 2.0, 0.0])).item() \
            == pytest.approx(1.0, abs=tol)
        assert losses.pixel_sparsity_loss(torch.zeros(4)).item() == 0.0
        assert abs(losses.adversarial_generator_loss(row(0.25, 0.25, 0.5), 0).item()
                   + math.log(0.25)) < tol
        assert abs(losses.adversarial_generator_loss(row(0.5, 0.25, 0.25), 1,
                                                     "paper-literal").item()
                   + math.log(0.75)) < tol
        assert abs(losses.dual_loss(row(0.7, 0.2, 0.1), 0).item() + math.log(0.7)) < tol
        assert abs(losses.dual_loss(row(0.0, 0.2, 0.8), 0, "paper-literal").item()
                   + math.log(0.8)) < tol
        assert losses.total_generator_loss(1, 1, 0, 0, 5e-4, 5e-5) == pytest.approx(2.0, abs=tol)
        assert losses.total_generator_loss(0, 0, 2, 0, 5e-4, 5e-5) == pytest.approx(1e-3, abs=tol)
        assert losses.total_generator_loss(0.5, 0.25, 4, 10, 5e-4, 5e-5) \
            == pytest.approx(0.7525, abs=tol)
        assert losses.discriminator_loss(uniform, uniform, uniform).item() \
            == pytest.approx(math.log(3), abs=tol)
        assert losses.perceptual_loss(torch.full((2, 2), 0.3),
                                      torch.full((2, 2), 0.4)).item() \
            == pytest.approx(0.1, abs=tol)


# ---------------------------------------------------------------------------
# 2. gradient check (miniature spec, rtol 1e-3)
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_check():
    with criterion(2, "finite-difference gradient check"):
        g0, g1, d, x0, x1 = _gradcheck.build_miniature(seed=0)

        d_named = list(d.named_parameters())
        worst_d = _gradcheck.central_difference_check(
            lambda: _gradcheck.discriminator_objective(g0, g1, d, x0, x1),
            d_named, rtol=1e-3)
        print(f"  l_D worst entry {worst_d[0]}: |analytic-numeric| = {worst_d[3]:.2e}")

        # the D objective must not reach generator parameters at all
        loss_d = _gradcheck.discriminator_objective(g0, g1, d, x0, x1)
        g_params = list(g0.parameters()) + list(g1.parameters())
        leaked = torch.autograd.grad(loss_d, g_params, allow_unused=True)
        assert all(g is None for g in leaked)

        g_named = ([(f"g0.{n}", p) for n, p in g0.named_parameters()]
                   + [(f"g1.{n}", p) for n, p in g1.named_parameters()])
        for p in d.parameters():
            p.requires_grad_(False)
        worst_g = _gradcheck.central_difference_check(
            lambda: _gradcheck.generator_objective(g0, g1, d, x0, x1),
            g_named, rtol=1e-3)
        print(f"  l_G worst entry {worst_g[0]}: |analytic-numeric| = {worst_g[3]:.2e}")


# ---------------------------------------------------------------------------
# 3. shape / identity suite
# ---------------------------------------------------------------------------

def test_criterion_3_shape_identity_suite():
    with criterion(3, "shape and identity suite"):
        gen = init_params(Generator(GeneratorSpec()), seed=0)
        gen.eval()
        for size in (32, 64, 96, 128):
            x = torch.zeros(1, 3, size, size)
            assert gen(x).shape == x.shape, size

        with torch.no_grad():
            gen.conv6.weight.zero_()
            gen.conv6.bias.zero_()
        x = torch.rand(2, 3, 64, 64) * 2 - 1
        r = gen(x)
        assert torch.all(r == 0)
        assert torch.equal(compose(x, r), x)

        assert torch.all(compose(torch.full((1, 3, 4, 4), 0.9),
                                 torch.full((1, 3, 4, 4), 0.3)) == 1.0)
        assert torch.all(compose(torch.full((1, 3, 4, 4), -0.9),
                                 torch.full((1, 3, 4, 4), -0.3)) == -1.0)
        assert torch.allclose(compose(torch.full((1, 3, 4, 4), -0.5),
                                      torch.full((1, 3, 4, 4), 0.2)),
                              torch.full((1, 3, 4, 4), -0.3))


# ---------------------------------------------------------------------------
# 4. residual collapse under a huge sparsity weight
# ---------------------------------------------------------------------------

def test_criterion_4_residual_collapse():
    with criterion(4, "residual collapse at alpha=1e6"):
        # beta1=0.9: at the adversarial default (0.5) Adam's sign-dither on
        # the final conv floors mean|r| near 2e-3 regardless of alpha; the
        # canonical beta1 averages the alternating gradients away and lets
        # the collapse reach the stated tolerance (see decisions ledger)
        cfg = desk_scale_config().replace(alpha=1e6, beta=1e5, iterations=COLLAPSE_STEPS,
                                          adam_beta1=0.9)
        pools = desk_training_pools(cfg, n_samples=64)
        state = trainer.build_state(cfg)
        reached = None
        for it in range(COLLAPSE_STEPS):
            batch = pools.sample_batch(cfg.seed, it, cfg.batch_size)
            report = trainer.train_step(state, *batch, cfg)
            if report.pix < COLLAPSE_TOL and reached is None:
                reached = it + 1
        state.g0.eval()
        state.g1.eval()
        with torch.no_grad():
            values = []
            for sample in heldout_samples(16, cfg.image_size):
                values.append(state.g0(sample.image_neg).abs().mean().item())
                values.append(state.g1(sample.image_pos).abs().mean().item())
        mean_r = sum(values) / len(values)
        print(f"  mean|r| = {mean_r:.2e} after {COLLAPSE_STEPS} steps "
              f"(first dip below {COLLAPSE_TOL:g} at step {reached})")
        assert mean_r < COLLAPSE_TOL


# ---------------------------------------------------------------------------
# 5. desk-scale training, oracle metrics, ablations
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """The reference desk-scale run plus both ablations, trained once."""
    root = tmp_path_factory.mktemp("desk")
    cfg = desk_scale_config()
    pools = desk_training_pools(cfg)
    runs = {}
    for mode in trainer.ABLATION_MODES:
        print(f"\n[desk] training mode={mode} ({cfg.iterations} iterations)", flush=True)
        ckpt = trainer.train(cfg, pools, mode, out_dir=root / mode.replace("-", "_"),
                             log_every=500)
        runs[mode] = ckpt
    return runs


@pytest.fixture(scope="session")
def heldout_200():
    return heldout_samples(N_HELDOUT)


def _oracle_stats(ckpt, held, mode):
    models = trainer.models_from_checkpoint(ckpt)[:2]
    pairs = evalkit.oracle_paired_l1(models, held, "1to0",
                                     residual_mode=(mode != "no-residual"))
    win = sum(1 for e, b in pairs if e < b) / len(pairs)
    mean_edited = sum(e for e, _ in pairs) / len(pairs)
    return win, mean_edited, models


def test_criterion_5_desk_scale_training(desk_runs, heldout_200):
    with criterion(5, "desk-scale training: oracle L1, localization, ablations"):
        stats = {mode: _oracle_stats(ckpt, heldout_200, mode)
                 for mode, ckpt in desk_runs.items()}
        win_full, l1_full, models_full = stats["full"]

        # (a) paired-oracle improvement on >= 80% of held-out samples
        print(f"  (a) oracle win rate [full]: {win_full:.3f} (need >= 0.80)")
        assert win_full >= 0.80

        # (b) residual mass concentrates in the attribute mask
        loc = evalkit.mean_residual_localization(models_full, heldout_200, "1to0")
        print(f"  (b) mean residual localization [full]: {loc:.3f} (need >= 0.6)")
        assert loc >= 0.6
        # per-pixel density: attribute-free regions carry less residual
        inside, outside = [], []
        for sample in heldout_200[:50]:
            _, r = evalkit.manipulate(models_full, sample.image_pos, "1to0")
            mag = r.abs().sum(dim=(0, 1)).numpy()
            inside.append(mag[sample.mask].mean())
            outside.append(mag[~sample.mask].mean())
        print(f"  (b) mean |r| per pixel: inside mask {np.mean(inside):.4f} vs "
              f"outside {np.mean(outside):.4f}")
        assert np.mean(outside) < np.mean(inside)

        # (c) full beats both ablations on the same oracle metric
        for mode in ("no-residual", "no-dual"):
            win_m, l1_m, _ = stats[mode]
            print(f"  (c) mean edited L1: full {l1_full:.4f} vs {mode} {l1_m:.4f} "
                  f"(win rates {win_full:.2f} vs {win_m:.2f})")
            assert l1_full < l1_m, mode


# ---------------------------------------------------------------------------
# 6. landmark-detection gain with the noisy-oracle detector
# ---------------------------------------------------------------------------

def test_criterion_6_landmark_gain(desk_runs, heldout_200):
    with criterion(6, "landmark-detection gain (noisy oracle)"):
        half = len(heldout_200) // 2
        d0 = evalkit.eval_images_from_synth(heldout_200[:half], "neg")
        d1 = evalkit.eval_images_from_synth(heldout_200[half:], "pos")
        summary = evalkit.landmark_gain_eval(desk_runs["full"], d0, d1,
                                             evalkit.NoisyOracleDetector())
        eye_d1 = summary.rows["D1"].eye_mean
        eye_d1m = summary.rows["D1m"].eye_mean
        rest_d1 = summary.rows["D1"].rest_mean
        rest_d1m = summary.rows["D1m"].rest_mean
        print(f"  eyes: D1 {eye_d1:.5f} -> D1m {eye_d1m:.5f} (need strict drop)")
        print(f"  rest: D1 {rest_d1:.5f} vs D1m {rest_d1m:.5f} "
              f"(need |diff| < 10% of D1)")
        assert eye_d1m < eye_d1
        assert abs(rest_d1m - rest_d1) < 0.10 * rest_d1


# ---------------------------------------------------------------------------
# 7. dataset utilities
# ---------------------------------------------------------------------------

def test_criterion_7_dataset_utilities():
    with criterion(7, "dataset utilities"):
        rows = {f"p{i}": (1,) for i in range(300)}
        rows.update({f"n{i}": (0,) for i in range(700)})
        index = data.AttributeIndex(names=("X",), rows=rows)
        test_ids = [f"p{i}" for i in range(50)] + [f"n{i}" for i in range(50)]
        neg, pos = data.make_balanced_training_split(index, "X", test_ids, seed=0)
        assert len(neg) == len(pos) == 250
        assert not (set(neg) | set(pos)) & set(test_ids)

        rng = np.random.default_rng(123)
        a = rng.integers(0, 2, 1000)
        b = (a ^ (rng.random(1000) < 0.3)).astype(int)
        fixture = data.AttributeIndex(
            names=("A", "B"),
            rows={f"i{k}": (int(a[k]), int(b[k])) for k in range(1000)})
        mean_a, mean_b = a.mean(), b.mean()
        cov = sum((float(x) - mean_a) * (float(y) - mean_b) for x, y in zip(a, b))
        denom = math.sqrt(sum((float(x) - mean_a) ** 2 for x in a)
                          * sum((float(y) - mean_b) ** 2 for y in b))
        oracle = cov / denom
        value = data.attribute_correlation(fixture, "A", "B")
        print(f"  pearson vs brute-force oracle: |diff| = {abs(value - oracle):.2e}")
        assert abs(value - oracle) <= 1e-12


def test_criterion_7_real_celeba_correlation():
    path = os.environ.get("CELEBA_ATTR_FILE")
    if not path or not Path(path).is_file():
        pytest.skip("CELEBA_ATTR_FILE not supplied; real-index check skipped")
    with criterion(7, "real CelebA (male, no_beard) correlation"):
        index = data.parse_attribute_index(Path(path))
        value = data.attribute_correlation(index, "Male", "No_Beard")
        print(f"  pearson(Male, No_Beard) = {value:.4f} (published -0.5222)")
        assert value == pytest.approx(-0.5222, abs=0.005)


# ---------------------------------------------------------------------------
# 8. reproducibility
# ---------------------------------------------------------------------------

def _checkpoint_arrays_equal(a, b):
    for part in ("g0", "g1", "d"):
        da, db = getattr(a, part), getattr(b, part)
        if set(da) != set(db):
            return False
        for key in da:
            if not np.array_equal(da[key], db[key]):
                return False
    return True


def test_criterion_8_reproducibility(tmp_path):
    with criterion(8, "reproducibility: round-trip, resume, manifest replay"):
        cfg = default_config("glasses", "local").replace(
            image_size=64, width_scale=0.0625, batch_size=2, iterations=4,
            checkpoint_every=2, seed=21)
        samples = data.synth_generate(8, 64, "glasses-like", seed=5)
        pools = data.PairedImagePools.from_synth_samples(samples)

        # checkpoint round-trip identity
        full = trainer.train(cfg, pools, out_dir=tmp_path / "full")
        save_checkpoint(full, tmp_path / "resaved")
        assert _checkpoint_arrays_equal(full, load_checkpoint(tmp_path / "resaved"))
        print("  round-trip: bit-exact")

        # resume equals continuous
        trainer.train(cfg.replace(iterations=2), pools, out_dir=tmp_path / "half")
        mid = load_checkpoint(tmp_path / "half" / "final")
        resumed = trainer.train(cfg, pools, out_dir=tmp_path / "resumed", resume_from=mid)
        assert _checkpoint_arrays_equal(full, resumed)
        print("  resume-from-checkpoint: parameter-identical to uninterrupted run")

        # manifest replay reproduces outputs bit-identically
        args = ["--image-size", "64", "--width-scale", "0.0625", "--batch-size", "2",
                "--iterations", "3", "--checkpoint-every", "2", "--synth-n", "8",
                "--seed", "13"]
        assert cli.main(["train", "--out", str(tmp_path / "cli_a"), *args]) == 0
        assert cli.main(["replay", str(tmp_path / "cli_a" / "manifest.json"),
                         "--out", str(tmp_path / "cli_b")]) == 0
        assert (cli.digest_path(tmp_path / "cli_a" / "final")
                == cli.digest_path(tmp_path / "cli_b" / "final"))
        assert ((tmp_path / "cli_a" / "loss_log.jsonl").read_bytes()
                == (tmp_path / "cli_b" / "loss_log.jsonl").read_bytes())
        print("  manifest replay: outputs bit-identical")
