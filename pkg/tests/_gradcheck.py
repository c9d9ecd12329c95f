"""Central-difference gradient checking on a miniature network spec.

The miniature stack shrinks every channel count to 1/16 and runs on 8x8
inputs in double precision, so finite differences stay well conditioned.
Inputs are drawn inside [-0.8, 0.8] and the residuals at init are small, so
the composition clamp never saturates and the checked loss surface is smooth
at the evaluation point.
"""

import torch

from resedit import losses
from resedit.networks import (Discriminator, DiscriminatorSpec, Generator,
                              GeneratorSpec, compose, init_params)

MINI_GEN_CHANNELS = (4, 8, 16, 8, 4)     # 1/16 of (64, 128, 256, 128, 64)
MINI_DISC_CHANNELS = (4, 8, 16)          # 1/16 of the first three blocks


def build_miniature(seed=0):
    g0 = init_params(Generator(GeneratorSpec(channels=MINI_GEN_CHANNELS)), seed).double()
    g1 = init_params(Generator(GeneratorSpec(channels=MINI_GEN_CHANNELS)), seed + 1).double()
    d = init_params(Discriminator(DiscriminatorSpec(image_size=8, channels=MINI_DISC_CHANNELS)),
                    seed + 2).double()
    gen = torch.Generator().manual_seed(seed + 3)
    x0 = (torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 1.4 - 0.7)
    x1 = (torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 1.4 - 0.7)
    return g0, g1, d, x0, x1


def discriminator_objective(g0, g1, d, x0, x1):
    """The exact per-step D loss: one concatenated train-mode forward."""
    for net in (g0, g1):
        net.train()
    d.train()
    with torch.no_grad():
        xt0 = compose(x0, g0(x0))
        xt1 = compose(x1, g1(x1))
    out = d(torch.cat([x0, x1, xt0, xt1], dim=0))
    n, m = x0.shape[0], x1.shape[0]
    return losses.discriminator_loss(out.probs[:n], out.probs[n:n + m],
                                     out.probs[n + m:])


def generator_objective(g0, g1, d, x0, x1, alpha=5e-4, beta=5e-5, mode="target-class"):
    """The exact per-step G loss: frozen eval-mode D, dual pass included."""
    g0.train()
    g1.train()
    d.eval()
    r0 = g0(x0)
    xt0 = compose(x0, r0)
    r1 = g1(x1)
    xt1 = compose(x1, r1)
    xh0 = compose(xt0, g1(xt0))
    xh1 = compose(xt1, g0(xt1))
    f0, f1, h0, h1 = d(xt0), d(xt1), d(xh0), d(xh1)
    l_gan = (losses.adversarial_generator_loss(f0.probs, 0, mode)
             + losses.adversarial_generator_loss(f1.probs, 1, mode)) / 2
    l_dual = (losses.dual_loss(h0.probs, 0, mode)
              + losses.dual_loss(h1.probs, 1, mode)) / 2
    l_pix = (losses.pixel_sparsity_loss(r0) + losses.pixel_sparsity_loss(r1)) / 2
    with torch.no_grad():
        phi_neg = d(x0).phi
        phi_pos = d(x1).phi
    l_per = (losses.perceptual_loss(phi_neg, f0.phi)
             + losses.perceptual_loss(phi_pos, f1.phi)) / 2
    return losses.total_generator_loss(l_gan, l_dual, l_pix, l_per, alpha, beta)


def central_difference_check(loss_fn, named_params, *, entries_per_tensor=6,
                             h=1e-6, rtol=1e-3, atol=1e-7, seed=0):
    """Compare autograd gradients against central differences.

    Samples a handful of entries from every parameter tensor.  Returns the
    worst (name, analytic, numeric, error) tuple; raises AssertionError on
    any entry outside rtol/atol.
    """
    params = [p for _, p in named_params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    rng = torch.Generator().manual_seed(seed)
    worst = ("", 0.0, 0.0, 0.0)
    for (name, p), g in zip(named_params, grads):
        flat = p.data.view(-1)
        n = flat.numel()
        count = min(entries_per_tensor, n)
        idx = torch.randperm(n, generator=rng)[:count]
        for i in idx.tolist():
            original = flat[i].item()
            flat[i] = original + h
            f_plus = loss_fn().item()
            flat[i] = original - h
            f_minus = loss_fn().item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = g.view(-1)[i].item()
            err = abs(analytic - numeric)
            bound = rtol * max(abs(analytic), abs(numeric)) + atol
            if err > worst[3]:
                worst = (f"{name}[{i}]", analytic, numeric, err)
            assert err <= bound, (
                f"{name}[{i}]: analytic {analytic:.6e} vs central-difference "
                f"{numeric:.6e} (|diff| {err:.2e} > bound {bound:.2e})")
    return worst
