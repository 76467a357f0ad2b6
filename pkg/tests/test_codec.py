"""Codec contracts: shapes, quantization, likelihoods, rate, gradients."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import tiny_codec
from rdplab.codec import (
    ArchConfig,
    GaussianParams,
    P_FLOOR,
    SIGMA_FLOOR,
    estimate_bpp,
    likelihood_conditional,
    likelihood_factorized,
    new_codec,
    params_hash,
    quantize,
    subnet_hash,
)
from rdplab.errors import DimensionMismatchError


# -- shape arithmetic -------------------------------------------------------


def test_analysis_shapes():
    codec = new_codec(ArchConfig(downsampling_stages=3, latent_channels=96), seed=0)
    y = codec.run_analysis(torch.rand(1, 3, 64, 64))
    assert tuple(y.shape) == (1, 96, 8, 8)

    codec = new_codec(
        ArchConfig(downsampling_stages=2, latent_channels=32, hidden_channels=16),
        seed=0,
    )
    y = codec.run_analysis(torch.rand(2, 3, 32, 32))
    assert tuple(y.shape) == (2, 32, 8, 8)


def test_analysis_divisibility_error():
    codec = new_codec(ArchConfig(downsampling_stages=3), seed=0)
    with pytest.raises(DimensionMismatchError):
        codec.run_analysis(torch.rand(1, 3, 60, 60))


def test_synthesis_shapes(codec_tiny):
    codec = new_codec(ArchConfig(downsampling_stages=3, latent_channels=96), seed=0)
    x_hat = codec.run_synthesis(torch.rand(1, 96, 8, 8))
    assert tuple(x_hat.shape) == (1, 3, 64, 64)
    x_hat = codec.run_synthesis(torch.rand(4, 96, 4, 4))
    assert tuple(x_hat.shape) == (4, 3, 32, 32)


def test_synthesis_zero_params_outputs_bias(codec_tiny):
    with torch.no_grad():
        for p in codec_tiny.synthesis.parameters():
            p.zero_()
        codec_tiny.synthesis[-1].bias.fill_(0.3)
    out = codec_tiny.run_synthesis(torch.zeros(1, 8, 4, 4))
    assert torch.allclose(out, torch.full_like(out, 0.3))


def test_hyper_analysis_shapes():
    codec = new_codec(
        ArchConfig(downsampling_stages=3, latent_channels=96, hyper_channels=32,
                   hyper_downsampling_stages=2),
        seed=0,
    )
    z = codec.run_hyper_analysis(torch.rand(1, 96, 8, 8))
    assert tuple(z.shape) == (1, 32, 2, 2)

    codec = new_codec(
        ArchConfig(downsampling_stages=3, latent_channels=96, hyper_channels=16,
                   hyper_downsampling_stages=1),
        seed=0,
    )
    z = codec.run_hyper_analysis(torch.rand(1, 96, 16, 16))
    assert tuple(z.shape) == (1, 16, 8, 8)


def test_hyper_analysis_degenerate_input():
    codec = new_codec(
        ArchConfig(downsampling_stages=3, latent_channels=96,
                   hyper_downsampling_stages=2),
        seed=0,
    )
    with pytest.raises(DimensionMismatchError):
        codec.run_hyper_analysis(torch.rand(1, 96, 1, 1))


def test_hyper_synthesis_contract():
    codec = new_codec(
        ArchConfig(downsampling_stages=3, latent_channels=96, hyper_channels=32,
                   hyper_downsampling_stages=2),
        seed=0,
    )
    with torch.no_grad():
        g = codec.run_hyper_synthesis(torch.zeros(1, 32, 2, 2))
    assert tuple(g.mu.shape) == (1, 96, 8, 8)
    assert tuple(g.sigma.shape) == (1, 96, 8, 8)
    assert float(g.sigma.min()) >= SIGMA_FLOOR


def test_hyper_synthesis_zero_preactivation_sigma(codec_tiny):
    # zero weights/bias make the raw scale pre-activation exactly 0
    with torch.no_grad():
        for p in codec_tiny.hyper_synthesis.parameters():
            p.zero_()
    g = codec_tiny.run_hyper_synthesis(torch.zeros(1, 8, 2, 2))
    expected = SIGMA_FLOOR + math.log(2.0)  # softplus(0)
    assert torch.allclose(g.sigma, torch.full_like(g.sigma, expected))


# -- quantization -----------------------------------------------------------


def test_quantize_eval_rounding():
    v = torch.tensor([2.3])
    assert float(quantize(v, "eval")) == 2.0
    assert float(quantize(v, "eval", offset=torch.tensor([0.4]))) == pytest.approx(2.4)


def test_quantize_train_noise_support():
    gen = torch.Generator().manual_seed(0)
    v = torch.rand(1000)
    out = quantize(v, "train", generator=gen)
    assert float((out - v).abs().max()) <= 0.5


def test_quantize_train_determinism():
    v = torch.rand(64)
    a = quantize(v, "train", generator=torch.Generator().manual_seed(5))
    b = quantize(v, "train", generator=torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


@given(st.floats(-1e4, 1e4), st.floats(-5, 5))
@settings(max_examples=100, deadline=None)
def test_quantize_eval_idempotent(value, offset):
    v = torch.tensor([value], dtype=torch.float64)
    off = torch.tensor([offset], dtype=torch.float64)
    once = quantize(v, "eval", offset=off)
    twice = quantize(once, "eval", offset=off)
    assert torch.equal(once, twice)


# -- likelihoods ------------------------------------------------------------


def test_likelihood_conditional_unit_gaussian():
    # oracle: standard normal CDF difference over the unit bin, via erf
    expected = math.erf(0.5 / math.sqrt(2.0))
    g = GaussianParams(mu=torch.zeros(1), sigma=torch.ones(1))
    p = likelihood_conditional(torch.zeros(1), g)
    assert float(p) == pytest.approx(expected, abs=1e-7)
    assert expected == pytest.approx(0.382925, abs=1e-6)


def test_likelihood_conditional_floor_sigma():
    expected = math.erf((0.5 / SIGMA_FLOOR) / math.sqrt(2.0))
    g = GaussianParams(mu=torch.zeros(1), sigma=torch.full((1,), SIGMA_FLOOR))
    p = likelihood_conditional(torch.zeros(1), g)
    assert float(p) == pytest.approx(expected, abs=1e-6)
    assert float(p) > 0.99999


def test_likelihood_conditional_tail_floor():
    g = GaussianParams(mu=torch.zeros(1), sigma=torch.ones(1))
    p = likelihood_conditional(torch.tensor([100.0]), g)
    assert float(p) == P_FLOOR


def test_likelihood_factorized_examples(codec_tiny):
    prior = codec_tiny.factorized_prior
    loc, scale = prior.location_scale()
    assert torch.allclose(scale, torch.ones_like(scale), atol=1e-6)

    z = loc.view(1, -1, 1, 1).clone()
    p = likelihood_factorized(z, prior)
    expected = math.tanh(0.25)  # logistic CDF difference over the unit bin
    assert torch.allclose(p, torch.full_like(p, expected), atol=1e-6)

    for k in (1.0, 3.0, 7.0):
        p_plus = likelihood_factorized(z + k, prior)
        p_minus = likelihood_factorized(z - k, prior)
        assert torch.equal(p_plus, p_minus)

    p_far = likelihood_factorized(z + 1e4, prior)
    assert torch.all(p_far == P_FLOOR)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_likelihoods_in_unit_interval(seed):
    gen = torch.Generator().manual_seed(seed)
    y = torch.randn(1, 4, 3, 3, generator=gen) * 10
    mu = torch.randn(1, 4, 3, 3, generator=gen)
    sigma = SIGMA_FLOOR + torch.rand(1, 4, 3, 3, generator=gen) * 5
    p = likelihood_conditional(y, GaussianParams(mu, sigma))
    assert float(p.min()) > 0.0
    assert float(p.max()) <= 1.0


# -- rate estimation ----------------------------------------------------------


def test_estimate_bpp_examples():
    p = torch.full((100,), 0.5)
    assert float(estimate_bpp(p, 100)) == pytest.approx(1.0)
    assert float(estimate_bpp(torch.ones(50), 100)) == 0.0
    p = torch.full((64,), 0.25)
    assert float(estimate_bpp(p, 256)) == pytest.approx(0.5)


def test_estimate_bpp_rejects_bad_num_pixels():
    with pytest.raises(ValueError):
        estimate_bpp(torch.ones(4), 0)
    with pytest.raises(ValueError):
        estimate_bpp(torch.ones(4), -3)


def test_estimate_bpp_nonnegative(codec_tiny, image_32):
    with torch.no_grad():
        out = codec_tiny(image_32, "eval")
    assert float(out.bpp_y) >= 0.0
    assert float(out.bpp_z) >= 0.0


# -- forward pipeline ----------------------------------------------------------


def test_forward_eval_deterministic(codec_tiny, image_32):
    with torch.no_grad():
        a = codec_tiny(image_32, "eval")
        b = codec_tiny(image_32, "eval")
    assert torch.equal(a.x_hat, b.x_hat)
    assert float(a.bpp_y) == float(b.bpp_y)
    assert torch.equal(a.latents.y_hat, b.latents.y_hat)


def test_forward_train_deterministic_given_seed(codec_tiny, image_32):
    a = codec_tiny(image_32, "train", generator=torch.Generator().manual_seed(3))
    b = codec_tiny(image_32, "train", generator=torch.Generator().manual_seed(3))
    assert torch.equal(a.x_hat, b.x_hat)
    assert torch.equal(a.latents.y_hat, b.latents.y_hat)


def test_forward_train_positive_rate(codec_tiny, image_32):
    with torch.no_grad():
        out = codec_tiny(image_32, "train", generator=torch.Generator().manual_seed(1))
    assert float(out.bpp_y) > 0.0
    assert float(out.bpp_z) > 0.0


def test_forward_shape_roundtrip(codec_tiny, image_32):
    out = codec_tiny(image_32, "eval")
    assert out.x_hat.shape == image_32.shape


def test_forward_eval_integrality(codec_tiny, image_32):
    out = codec_tiny(image_32, "eval")
    res = out.latents.y_hat - out.latents.gaussian.mu
    assert float((res - torch.round(res)).abs().max()) < 1e-6
    z = out.latents.z_hat
    assert torch.equal(z, torch.round(z))


def test_forward_rejects_out_of_range(codec_tiny):
    with pytest.raises(ValueError):
        codec_tiny(torch.full((1, 3, 32, 32), 1.5), "eval")


@given(st.integers(1, 2), st.integers(4, 8), st.integers(4, 8))
@settings(max_examples=10, deadline=None)
def test_shape_roundtrip_property(batch, hh, ww):
    codec = tiny_codec(seed=1)
    x = torch.rand(batch, 3, 8 * hh, 8 * ww)
    out = codec(x, "eval")
    assert out.x_hat.shape == x.shape


# -- hashing -------------------------------------------------------------------


def test_params_hash_stable_and_sensitive(codec_tiny):
    h1 = params_hash(codec_tiny)
    assert h1 == params_hash(codec_tiny)
    with torch.no_grad():
        codec_tiny.synthesis[0].weight[0, 0, 0, 0] += 1e-3
    assert params_hash(codec_tiny) != h1


def test_subnet_hash_partition(codec_tiny):
    frozen = ("analysis", "hyper_analysis", "hyper_synthesis", "factorized_prior")
    h = subnet_hash(codec_tiny, frozen)
    with torch.no_grad():
        codec_tiny.synthesis[0].weight[0, 0, 0, 0] += 1.0
    assert subnet_hash(codec_tiny, frozen) == h
    with torch.no_grad():
        codec_tiny.analysis[0].weight[0, 0, 0, 0] += 1.0
    assert subnet_hash(codec_tiny, frozen) != h


# -- gradient correctness (finite differences) ---------------------------------


def test_gradients_match_finite_differences():
    from helpers import finite_difference_suite

    results = finite_difference_suite()
    for key, worst in results.items():
        assert worst <= 1.0, f"{key}: rel error ratio {worst}"
