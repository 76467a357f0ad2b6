"""Shared test utilities: tiny architectures, finite-difference oracles."""

from __future__ import annotations

import torch

from rdplab.codec import ArchConfig, Codec, new_codec

# Smallest architecture satisfying the config invariants (1539 parameters):
# used for gradient checks and fast unit tests.
TINY_ARCH = ArchConfig(
    downsampling_stages=2,
    hidden_channels=8,
    latent_channels=8,
    hyper_channels=8,
    hyper_downsampling_stages=1,
    kernel_size=2,
)


def tiny_codec(seed: int = 3, dtype: torch.dtype = torch.float32) -> Codec:
    return new_codec(TINY_ARCH, seed=seed, dtype=dtype)


def random_patches(seed: int, patch_size: int = 32, channels: int = 3):
    """Infinite deterministic stream of random patches in [0,1]."""
    gen = torch.Generator().manual_seed(seed)
    while True:
        yield torch.rand(channels, patch_size, patch_size, generator=gen)


def central_difference_grads(loss_fn, params, h: float = 1e-4):
    """Finite-difference gradient oracle: central differences per element.

    ``loss_fn`` must be a deterministic function of the current parameter
    values (any stochastic element re-seeded inside).
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                f_plus = loss_fn()
                flat[j] = orig - h
                f_minus = loss_fn()
                flat[j] = orig
                gflat[j] = (f_plus - f_minus) / (2.0 * h)
            grads.append(g)
    return grads


def analytic_grads(loss_fn, params):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def max_relative_error(analytic, numeric, rtol=1e-3, atol=1e-7):
    """Worst-case |a - f| / (rtol*max(|a|,|f|) + atol); <= 1 means pass."""
    worst = 0.0
    for a, f in zip(analytic, numeric):
        denom = rtol * torch.maximum(a.abs(), f.abs()) + atol
        worst = max(worst, float(((a - f).abs() / denom).max()))
    return worst


def finite_difference_suite():
    """Analytic vs central-difference gradients on the tiny double model.

    Covers rate and distortion losses against every sub-network's
    parameters. Seeds are pinned away from leaky-rectifier kinks: a
    pre-activation within the h=1e-4 step of zero invalidates the central
    difference. Returns {(loss, subnet): worst_ratio}; <= 1 passes.
    """
    codec = tiny_codec(seed=5, dtype=torch.float64)
    x = torch.rand(
        1, 3, 32, 32, generator=torch.Generator().manual_seed(6), dtype=torch.float64
    )

    def run():
        gen = torch.Generator().manual_seed(7)
        return codec(x, "train", generator=gen)

    def loss_bpp():
        out = run()
        return out.bpp_y + out.bpp_z

    def loss_mse():
        out = run()
        return ((out.x_hat - x) ** 2).mean()

    results = {}
    for loss_name, loss_fn in (("bpp", loss_bpp), ("mse", loss_mse)):
        for subnet in (
            "analysis", "synthesis", "hyper_analysis",
            "hyper_synthesis", "factorized_prior",
        ):
            params = list(codec.subnet(subnet).parameters())
            ana = analytic_grads(loss_fn, params)
            num = central_difference_grads(lambda: float(loss_fn()), params)
            results[(loss_name, subnet)] = max_relative_error(ana, num)
    return results
