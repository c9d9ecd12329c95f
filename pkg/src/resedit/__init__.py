"""Residual-image face attribute manipulation.

Two transformation networks learn sparse residual edits for an attribute
and its inverse, trained adversarially against a three-class discriminator
with a dual-learning closed loop.
"""

from .datamodel import (Checkpoint, CheckpointError, ConfigError, LabeledImage,
                        TrainConfig, default_config, load_checkpoint, save_checkpoint)
from .losses import LossReport
from .networks import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, compose, init_params
from .trainer import TrainState, TrainStepError, build_state, train, train_step

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigError", "LabeledImage", "TrainConfig",
    "default_config", "load_checkpoint", "save_checkpoint", "LossReport",
    "Discriminator", "DiscriminatorSpec", "Generator", "GeneratorSpec", "compose",
    "init_params", "TrainState", "TrainStepError", "build_state", "train", "train_step",
]

__version__ = "0.1.0"
