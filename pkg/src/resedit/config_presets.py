"""Pinned reference configurations for desk-scale experiments.

The regularization weights here deserve a note: the published weights pair
with a summed L1, while this codebase reduces the sparsity and perceptual
terms by the mean (a documented convention that keeps weights comparable
across image sizes).  The desk preset therefore rescales alpha by the pixel
element count so the effective per-element pressure matches the published
local-attribute setting: 5e-4 * (64 * 64 * 3) ~ 6.1.  The same reasoning
gives beta via the perceptual feature count of the desk discriminator.

Channel widths shrink to 1/8 of the published architecture so the reference
run fits a two-core CPU budget; every layer, kernel, and stride is unchanged.
"""

from __future__ import annotations

from .data import PairedImagePools, synth_generate
from .datamodel import LOCAL_ALPHA, TrainConfig, derive_seed

DESK_IMAGE_SIZE = 64
DESK_WIDTH_SCALE = 0.125
DESK_BATCH_SIZE = 16
DESK_ITERATIONS = 2000
DESK_SEED = 0
DESK_TRAIN_SAMPLES = 4096
DESK_HELDOUT_SEED = 999

DESK_ALPHA = LOCAL_ALPHA * (DESK_IMAGE_SIZE * DESK_IMAGE_SIZE * 3)  # sum-equivalent
# third-block feature map of the desk discriminator: 32 channels at 8x8
DESK_BETA = 0.1 * LOCAL_ALPHA * (32 * 8 * 8)


def desk_scale_config(seed: int = DESK_SEED, iterations: int = DESK_ITERATIONS) -> TrainConfig:
    return TrainConfig(
        attribute_name="glasses",
        image_size=DESK_IMAGE_SIZE,
        alpha=DESK_ALPHA,
        beta=DESK_BETA,
        batch_size=DESK_BATCH_SIZE,
        iterations=iterations,
        seed=seed,
        checkpoint_every=max(500, iterations // 4),
        width_scale=DESK_WIDTH_SCALE,
    )


def desk_training_pools(config: TrainConfig,
                        n_samples: int = DESK_TRAIN_SAMPLES) -> PairedImagePools:
    samples = synth_generate(n_samples, config.image_size, "glasses-like",
                             derive_seed(config.seed, "train-data"))
    return PairedImagePools.from_synth_samples(samples)


def heldout_samples(n: int, image_size: int = DESK_IMAGE_SIZE,
                    seed: int = DESK_HELDOUT_SEED):
    """Evaluation pairs disjoint from every training corpus by seed namespace."""
    return synth_generate(n, image_size, "glasses-like", derive_seed(seed, "heldout"))
