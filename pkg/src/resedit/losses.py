"""Scalar training objectives.

All reductions over image or feature elements use the mean (not the sum) so
the regularization weights keep their meaning across image sizes; multiply
by the element count to recover summed values.  Every logarithm clamps its
argument at 1e-12 to stay finite at softmax saturation.

The generator-side adversarial terms support two readings of what the
scalar D(.) means for a three-class classifier:

* ``paper-literal`` treats D(.) as the probability of the real-positive
  class and uses -log(1 - p1) where the literal formula says so.
* ``target-class`` (the default) replaces -log(1 - p1) with -log p_target,
  so the generator cannot satisfy its loss by inflating the "generated"
  class probability.

Everything here is a pure function and freely concurrent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .datamodel import GAN_LOSS_MODES

LOG_EPS = 1e-12


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_EPS))


def _check_probs(probs: torch.Tensor, name: str = "probs") -> torch.Tensor:
    if probs.ndim != 2 or probs.shape[1] != 3:
        raise ValueError(f"{name} must have shape (batch, 3), got {tuple(probs.shape)}")
    if probs.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not torch.isfinite(probs).all():
        raise ValueError(f"{name} contains non-finite values")
    with torch.no_grad():
        if probs.min() < -1e-6 or (probs.sum(dim=1) - 1.0).abs().max() > 1e-4:
            raise ValueError(f"{name} rows are not valid distributions")
    return probs


def _check_mode(mode: str) -> str:
    if mode not in GAN_LOSS_MODES:
        raise ValueError(f"mode must be one of {GAN_LOSS_MODES}, got {mode!r}")
    return mode


def pixel_sparsity_loss(r: torch.Tensor) -> torch.Tensor:
    """L1 sparsity of the raw residual: mean absolute value over all elements."""
    if not torch.isfinite(r).all():
        raise ValueError("residual contains non-finite values")
    return r.abs().mean()


def classification_loss(probs: torch.Tensor, t: int) -> torch.Tensor:
    """Batch mean of -log p_t for a single target label t in {0, 1, 2}."""
    _check_probs(probs)
    if t not in (0, 1, 2):
        raise ValueError(f"target label must be 0, 1, or 2, got {t!r}")
    return -_safe_log(probs[:, t]).mean()


def perceptual_loss(phi_x: torch.Tensor, phi_y: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between two discriminator feature maps."""
    if phi_x.shape != phi_y.shape:
        raise ValueError(f"feature shape mismatch: {tuple(phi_x.shape)} vs {tuple(phi_y.shape)}")
    return (phi_x - phi_y).abs().mean()


def adversarial_generator_loss(probs_fake: torch.Tensor, generator_index: int,
                               mode: str = "target-class") -> torch.Tensor:
    """First-pass adversarial term for one transformation network.

    Network 0 turns attribute-negative inputs positive, so its outputs should
    score as the real-positive class; network 1 does the inverse edit.
    """
    _check_probs(probs_fake, "probs_fake")
    _check_mode(mode)
    if generator_index not in (0, 1):
        raise ValueError(f"generator_index must be 0 or 1, got {generator_index!r}")
    p1 = probs_fake[:, 1]
    if generator_index == 0:
        return -_safe_log(p1).mean()
    if mode == "paper-literal":
        return -_safe_log(1.0 - p1).mean()
    return -_safe_log(probs_fake[:, 0]).mean()


def dual_loss(probs_second_pass: torch.Tensor, origin_index: int,
              mode: str = "target-class") -> torch.Tensor:
    """Closed-loop adversarial term for the second pass.

    An image that started attribute-negative and went through both networks
    should score as real-negative again, and vice versa.
    """
    _check_probs(probs_second_pass, "probs_second_pass")
    _check_mode(mode)
    if origin_index not in (0, 1):
        raise ValueError(f"origin_index must be 0 or 1, got {origin_index!r}")
    p1 = probs_second_pass[:, 1]
    if origin_index == 1:
        return -_safe_log(p1).mean()
    if mode == "paper-literal":
        return -_safe_log(1.0 - p1).mean()
    return -_safe_log(probs_second_pass[:, 0]).mean()


def total_generator_loss(gan, dual, pix, per, alpha: float, beta: float):
    """Weighted sum: gan + dual + alpha * pix + beta * per."""
    return gan + dual + alpha * pix + beta * per


def discriminator_loss(probs_real_neg: torch.Tensor, probs_real_pos: torch.Tensor,
                       probs_fake: torch.Tensor) -> torch.Tensor:
    """Three-class loss: targets 0, 1, 2 per group, equal weight per group."""
    terms = (
        classification_loss(probs_real_neg, 0),
        classification_loss(probs_real_pos, 1),
        classification_loss(probs_fake, 2),
    )
    return sum(terms) / 3.0


@dataclass(frozen=True)
class LossReport:
    """Per-term scalars for one training step.

    ``total_g = gan + dual + alpha * pix + beta * per`` and ``total_d = cls``
    hold exactly when built through :meth:`build`.
    """

    gan: float
    dual: float
    pix: float
    per: float
    cls: float
    total_g: float
    total_d: float

    @classmethod
    def build(cls, *, gan: float, dual: float, pix: float, per: float, cls_: float,
              alpha: float, beta: float) -> "LossReport":
        report = cls(
            gan=float(gan), dual=float(dual), pix=float(pix), per=float(per),
            cls=float(cls_),
            total_g=float(gan + dual + alpha * pix + beta * per),
            total_d=float(cls_),
        )
        for name, value in report.__dict__.items():
            if value != value or value in (float("inf"), float("-inf")):
                raise ValueError(f"loss term {name} is not finite: {value}")
        return report

    def to_dict(self) -> dict:
        return dict(self.__dict__)
