"""The dual-learning adversarial training loop.

One step runs four phases: (a) both transformation networks produce
first-pass outputs, (b) the discriminator updates on real negatives (label
0), real positives (label 1), and the detached first-pass outputs (label 2),
(c) each first-pass output goes through the *other* network, and (d) both
transformation networks update jointly on the adversarial + dual +
sparsity + perceptual objective with the discriminator frozen.  Gradients of
the dual term flow through the composition into both networks; pass
``detach_dual_input=True`` to cut that closed loop for ablation studies.

The sparsity and perceptual terms apply to first-pass outputs only, and the
discriminator only ever sees first-pass outputs as its generated class.
While frozen in phase (d) the discriminator evaluates with its running
normalization statistics, i.e. as a fixed per-image function; its own update
in phase (b) uses per-batch statistics as usual.

Ablation modes: ``no-residual`` makes each network emit the full image
instead of a residual (output = clamp(net(x)) with no addition); ``no-dual``
skips phase (c) and zeroes the dual term.

Exactly one owner may mutate a TrainState; evaluation callbacks get
read-only snapshots via checkpoints.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses
from .datamodel import (Checkpoint, TrainConfig, arrays_to_state_dict, derive_seed,
                        rng_digest, save_checkpoint, state_dict_to_arrays,
                        validate_image)
from .networks import (Discriminator, DiscriminatorSpec, Generator, GeneratorSpec,
                       compose, init_params)

ABLATION_MODES = ("full", "no-residual", "no-dual")


class TrainStepError(RuntimeError):
    """A loss term went non-finite; the step was rolled back."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r} ({value}); step aborted, "
                         f"parameters restored")
        self.term = term
        self.value = value


@dataclass
class TrainState:
    """Mutable bundle of the three networks, their optimizers, and the clock."""

    g0: Generator
    g1: Generator
    d: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    iteration: int = 0


def build_state(config: TrainConfig) -> TrainState:
    """Fresh networks and optimizers, deterministically initialized."""
    gspec = GeneratorSpec.scaled(config.width_scale)
    dspec = DiscriminatorSpec.scaled(config.image_size, config.width_scale)
    g0 = init_params(Generator(gspec), derive_seed(config.seed, "init-g0"))
    g1 = init_params(Generator(gspec), derive_seed(config.seed, "init-g1"))
    d = init_params(Discriminator(dspec), derive_seed(config.seed, "init-d"))
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(list(g0.parameters()) + list(g1.parameters()),
                             lr=config.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=config.learning_rate, betas=betas)
    return TrainState(g0=g0, g1=g1, d=d, opt_g=opt_g, opt_d=opt_d)


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _check_finite(term: str, value: torch.Tensor, restore):
    if not torch.isfinite(value).all():
        restore()
        raise TrainStepError(term, float(value))


def _transform(gen: Generator, x: torch.Tensor, mode: str, *,
               update_running_stats: bool = True):
    """One attribute edit. Returns (output image, raw network output).

    The second pass feeds generated images back through the networks; those
    batches still normalize with their own statistics, but they are kept out
    of the running averages so that inference-time normalization reflects
    the real-image distribution each network sees at deployment.
    """
    if update_running_stats:
        out = gen(x)
    else:
        momenta = []
        for m in gen.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                momenta.append((m, m.momentum))
                m.momentum = 0.0
        try:
            out = gen(x)
        finally:
            for m, momentum in momenta:
                m.momentum = momentum
    if mode == "no-residual":
        return torch.clamp(out, -1.0, 1.0), out
    return compose(x, out), out


def train_step(state: TrainState, batch_neg: torch.Tensor, batch_pos: torch.Tensor,
               config: TrainConfig, mode: str = "full", *,
               detach_dual_input: bool = False,
               cycle_l1_weight: float = 0.0) -> losses.LossReport:
    """One alternating D-then-G update.  Mutates ``state`` in place.

    ``cycle_l1_weight`` optionally adds an explicit pixel reconstruction term
    on the second pass; it defaults to 0 and is off everywhere in the
    standard objective.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"mode must be one of {ABLATION_MODES}, got {mode!r}")
    if batch_neg.shape[0] == 0 or batch_pos.shape[0] == 0:
        raise ValueError("both batches must be nonempty")
    if batch_neg.shape[2:] != batch_pos.shape[2:]:
        raise ValueError("batches must share spatial size")
    validate_image(batch_neg, name="batch_neg")
    validate_image(batch_pos, name="batch_pos")

    snapshot = {
        "params": [(p, p.detach().clone()) for net in (state.g0, state.g1, state.d)
                   for p in net.parameters()],
        "opt_g": copy.deepcopy(state.opt_g.state_dict()),
        "opt_d": copy.deepcopy(state.opt_d.state_dict()),
    }

    def restore():
        with torch.no_grad():
            for p, saved in snapshot["params"]:
                p.copy_(saved)
        state.opt_g.load_state_dict(snapshot["opt_g"])
        state.opt_d.load_state_dict(snapshot["opt_d"])

    gl_mode = config.gan_loss_mode

    # (a) first pass
    xt0, out0 = _transform(state.g0, batch_neg, mode)
    xt1, out1 = _transform(state.g1, batch_pos, mode)

    # (b) discriminator update on constants.  One forward over all three
    # groups so the per-batch normalization statistics match the mixture the
    # running averages converge to.
    n_neg, n_pos = batch_neg.shape[0], batch_pos.shape[0]
    d_all = state.d(torch.cat([batch_neg, batch_pos, xt0.detach(), xt1.detach()], dim=0))
    probs_neg = d_all.probs[:n_neg]
    probs_pos = d_all.probs[n_neg:n_neg + n_pos]
    probs_fake = d_all.probs[n_neg + n_pos:]
    l_cls = losses.discriminator_loss(probs_neg, probs_pos, probs_fake)
    _check_finite("cls", l_cls, restore)
    state.opt_d.zero_grad()
    l_cls.backward()
    state.opt_d.step()

    # (c) second pass through the opposite network
    if mode != "no-dual":
        y0 = xt0.detach() if detach_dual_input else xt0
        y1 = xt1.detach() if detach_dual_input else xt1
        xh0, _ = _transform(state.g1, y0, mode, update_running_stats=False)
        xh1, _ = _transform(state.g0, y1, mode, update_running_stats=False)

    # (d) joint generator update, discriminator frozen.  The frozen D runs
    # with its running normalization statistics so it scores each image as a
    # fixed function; per-batch statistics here would let the generators
    # satisfy their loss through batch composition instead of image content.
    _set_requires_grad(state.d, False)
    d_was_training = state.d.training
    state.d.eval()
    try:
        f0 = state.d(xt0)
        f1 = state.d(xt1)
        l_gan = (losses.adversarial_generator_loss(f0.probs, 0, gl_mode)
                 + losses.adversarial_generator_loss(f1.probs, 1, gl_mode)) / 2
        if mode == "no-dual":
            l_dual = torch.zeros(())
        else:
            h0 = state.d(xh0)
            h1 = state.d(xh1)
            l_dual = (losses.dual_loss(h0.probs, 0, gl_mode)
                      + losses.dual_loss(h1.probs, 1, gl_mode)) / 2
        l_pix = (losses.pixel_sparsity_loss(out0) + losses.pixel_sparsity_loss(out1)) / 2
        with torch.no_grad():
            phi_neg = state.d(batch_neg).phi
            phi_pos = state.d(batch_pos).phi
        l_per = (losses.perceptual_loss(phi_neg, f0.phi)
                 + losses.perceptual_loss(phi_pos, f1.phi)) / 2
        for term, value in (("gan", l_gan), ("dual", l_dual), ("pix", l_pix), ("per", l_per)):
            _check_finite(term, value, restore)
        l_g = losses.total_generator_loss(l_gan, l_dual, l_pix, l_per,
                                          config.alpha, config.beta)
        if cycle_l1_weight > 0.0 and mode != "no-dual":
            l_g = l_g + cycle_l1_weight * ((xh0 - batch_neg).abs().mean()
                                           + (xh1 - batch_pos).abs().mean()) / 2
        state.opt_g.zero_grad()
        l_g.backward()
        state.opt_g.step()
    finally:
        _set_requires_grad(state.d, True)
        state.d.train(d_was_training)

    for net, label in ((state.g0, "g0"), (state.g1, "g1"), (state.d, "d")):
        for name, p in net.named_parameters():
            if not torch.isfinite(p).all():
                restore()
                raise TrainStepError(f"{label}.{name}", float("nan"))

    state.iteration += 1
    return losses.LossReport.build(
        gan=l_gan.detach().item(), dual=l_dual.detach().item(),
        pix=l_pix.detach().item(), per=l_per.detach().item(),
        cls_=l_cls.detach().item(), alpha=config.alpha, beta=config.beta)


def make_checkpoint(state: TrainState, config: TrainConfig,
                    mode: str = "full") -> Checkpoint:
    def pack(net, opt=None, param_slice=None):
        arrays = state_dict_to_arrays(net.state_dict())
        if opt is not None:
            opt_state = opt.state_dict()["state"]
            for i in param_slice:
                for key, value in opt_state.get(i, {}).items():
                    arrays[f"optimizer/{i}/{key}"] = (
                        value.detach().cpu().numpy().copy()
                        if isinstance(value, torch.Tensor) else np.asarray(value))
        return arrays

    n_g0 = len(list(state.g0.parameters()))
    n_g1 = len(list(state.g1.parameters()))
    meta = {
        "config": config.to_dict(),
        "iteration": state.iteration,
        "ablation_mode": mode,
        "rng_state_digest": rng_digest(config.seed, state.iteration),
    }
    return Checkpoint(
        g0=pack(state.g0, state.opt_g, range(0, n_g0)),
        g1=pack(state.g1, state.opt_g, range(n_g0, n_g0 + n_g1)),
        d=pack(state.d, state.opt_d, range(0, len(list(state.d.parameters())))),
        meta=meta,
    )


def _split_arrays(arrays: dict):
    model, opt = {}, {}
    for key, value in arrays.items():
        if key.startswith("optimizer/"):
            _, idx, field = key.split("/", 2)
            opt.setdefault(int(idx), {})[field] = value
        else:
            model[key] = value
    return model, opt


def restore_state(ckpt: Checkpoint) -> tuple:
    """Rebuild (TrainState, TrainConfig) from a checkpoint, optimizer
    moments included."""
    config = ckpt.config
    state = build_state(config)
    packed = {}
    for net, arrays in ((state.g0, ckpt.g0), (state.g1, ckpt.g1), (state.d, ckpt.d)):
        model, opt = _split_arrays(arrays)
        net.load_state_dict(arrays_to_state_dict(model))
        packed[id(net)] = opt

    def load_opt(optimizer, pieces):
        sd = optimizer.state_dict()
        sd["state"] = {
            i: {field: torch.from_numpy(np.array(v)) for field, v in fields.items()}
            for i, fields in pieces.items()
        }
        optimizer.load_state_dict(sd)

    g_pieces = dict(packed[id(state.g0)])
    g_pieces.update(packed[id(state.g1)])
    load_opt(state.opt_g, g_pieces)
    load_opt(state.opt_d, packed[id(state.d)])
    state.iteration = ckpt.iteration
    return state, config


def models_from_checkpoint(ckpt: Checkpoint) -> tuple:
    """Inference-ready (g0, g1, d) in eval mode; optimizer state ignored."""
    state, _ = restore_state(ckpt)
    for net in (state.g0, state.g1, state.d):
        net.eval()
    return state.g0, state.g1, state.d


def train(config: TrainConfig, dataset, mode: str = "full", *,
          out_dir: str | Path, resume_from: Checkpoint | None = None,
          detach_dual_input: bool = False, cycle_l1_weight: float = 0.0,
          log_every: int = 0) -> Checkpoint:
    """Run ``config.iterations`` steps, checkpointing along the way.

    ``dataset`` must expose ``sample_batch(seed, iteration, batch_size)``
    returning one batch per class.  The loss log at ``out_dir/loss_log.jsonl``
    carries one JSON object per step.  Resuming from a checkpoint replays the
    identical batch sequence, so the result matches an uninterrupted run.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"mode must be one of {ABLATION_MODES}, got {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.jsonl"

    if resume_from is not None:
        state, ckpt_config = restore_state(resume_from)
        for field in ("image_size", "width_scale", "seed", "batch_size"):
            if getattr(ckpt_config, field) != getattr(config, field):
                raise ValueError(f"resume config mismatch on {field}: checkpoint has "
                                 f"{getattr(ckpt_config, field)}, run has {getattr(config, field)}")
        kept = []
        if log_path.exists():
            kept = log_path.read_text().splitlines()[:state.iteration]
        log_path.write_text("".join(line + "\n" for line in kept))
    else:
        state = build_state(config)
        log_path.write_text("")

    with log_path.open("a") as log:
        while state.iteration < config.iterations:
            it = state.iteration
            batch_neg, batch_pos = dataset.sample_batch(config.seed, it, config.batch_size)
            report = train_step(state, batch_neg, batch_pos, config, mode,
                                detach_dual_input=detach_dual_input,
                                cycle_l1_weight=cycle_l1_weight)
            log.write(json.dumps({"iteration": it, **report.to_dict()}) + "\n")
            if log_every and (it + 1) % log_every == 0:
                print(f"iter {it + 1}/{config.iterations} "
                      f"g={report.total_g:.4f} d={report.total_d:.4f} pix={report.pix:.4f}")
            if (state.iteration % config.checkpoint_every == 0
                    and state.iteration < config.iterations):
                save_checkpoint(make_checkpoint(state, config, mode),
                                out_dir / f"ckpt_{state.iteration:06d}")

    final = make_checkpoint(state, config, mode)
    save_checkpoint(final, out_dir / "final")
    return final
