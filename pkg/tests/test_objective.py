import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from astrogan.colorspace import ContractError
from astrogan.objective import (
    NonFiniteError,
    content_l1,
    discriminator_loss,
    generator_adversarial_loss,
    generator_loss,
)

LN2 = math.log(2.0)
logit_maps = arrays(np.float64, (2, 3, 3, 1), elements=st.floats(-30, 30, allow_nan=False))


def test_discriminator_at_zero():
    z = np.zeros((2, 30, 30, 1))
    assert discriminator_loss(z, z).item() == pytest.approx(LN2, abs=1e-12)


def test_discriminator_perfect():
    assert discriminator_loss(np.full((1, 4), 1e4), np.full((1, 4), -1e4)).item() < 1e-12


def test_discriminator_matches_elementwise_oracle():
    rng = np.random.default_rng(0)
    real, fake = rng.normal(0, 3, (2, 2)), rng.normal(0, 3, (2, 2))
    ref = 0.5 * (
        np.mean([oracles.bce_real(v) for v in real.ravel()])
        + np.mean([oracles.bce_fake(v) for v in fake.ravel()])
    )
    assert discriminator_loss(real, fake).item() == pytest.approx(ref, abs=1e-12)


def test_generator_adversarial_values():
    assert generator_adversarial_loss(np.zeros((3, 3))).item() == pytest.approx(LN2, abs=1e-12)
    assert generator_adversarial_loss(np.full((3, 3), 1e4)).item() < 1e-12
    f = np.random.default_rng(1).normal(0, 3, (2, 2))
    ref = np.mean([oracles.bce_real(v) for v in f.ravel()])
    assert generator_adversarial_loss(f).item() == pytest.approx(ref, abs=1e-12)


def test_content_l1():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(2, 5, 5, 2))
    assert content_l1(p, p).item() == 0
    assert content_l1(p, p + 0.1).item() == pytest.approx(0.1, abs=1e-12)
    t = rng.normal(size=p.shape)
    ref = sum(abs(a - b) for a, b in zip(p.ravel(), t.ravel())) / p.size
    assert content_l1(p, t).item() == pytest.approx(ref, abs=1e-12)


def test_generator_loss_examples():
    pred = np.zeros((1, 4, 4, 2))
    out = generator_loss(np.zeros((1, 3, 3, 1)), pred, pred + 0.1, 100.0)
    assert out.total == pytest.approx(LN2 + 10.0, abs=1e-9)
    assert out.adversarial == pytest.approx(LN2, abs=1e-12)
    assert out.content_l1 == pytest.approx(0.1, abs=1e-12)
    assert out.total == out.adversarial + out.lambda_weight * out.content_l1

    perfect = generator_loss(np.full((1, 3, 3, 1), 1e4), pred, pred)
    assert perfect.total < 1e-12

    logits = np.random.default_rng(3).normal(size=(1, 3, 3, 1))
    zero_lambda = generator_loss(logits, pred, pred + 0.5, 0.0)
    assert zero_lambda.total == zero_lambda.adversarial


def test_default_lambda_is_100():
    out = generator_loss(np.zeros((1, 1)), np.zeros(4), np.full(4, 0.01))
    assert out.lambda_weight == 100.0


def test_negative_lambda_rejected():
    with pytest.raises(ContractError):
        generator_loss(np.zeros(2), np.zeros(2), np.zeros(2), -1.0)


def test_shape_mismatch_rejected():
    with pytest.raises(ContractError):
        discriminator_loss(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        content_l1(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(NonFiniteError):
        discriminator_loss(np.array([0.0, bad]), np.zeros(2))
    with pytest.raises(NonFiniteError):
        generator_adversarial_loss(np.array([bad]))


def test_saturation_safety():
    big = np.array([1e4, -1e4, 5e3, -5e3])
    for real, fake in [(big, big), (-big, big), (big, -big)]:
        assert math.isfinite(discriminator_loss(real, fake).item())
        assert math.isfinite(generator_adversarial_loss(fake).item())


@settings(max_examples=50)
@given(logit_maps, logit_maps)
def test_losses_nonnegative_and_permutation_invariant(real, fake):
    d = discriminator_loss(real, fake).item()
    g = generator_adversarial_loss(fake).item()
    assert d >= 0 and g >= 0
    perm = np.random.default_rng(0).permutation(real.size)
    r2 = real.ravel()[perm].reshape(real.shape)
    f2 = fake.ravel()[perm].reshape(fake.shape)
    assert discriminator_loss(r2, f2).item() == pytest.approx(d, rel=1e-12, abs=1e-15)
    assert generator_adversarial_loss(f2).item() == pytest.approx(g, rel=1e-12, abs=1e-15)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 500))
def test_generator_loss_monotone_in_l1(a, b, lam):
    lo, hi = sorted((a, b))
    logits = np.zeros((1, 2))
    pred = np.zeros(4)
    low = generator_loss(logits, pred, pred + lo, lam)
    high = generator_loss(logits, pred, pred + hi, lam)
    assert low.total <= high.total


def test_losses_are_differentiable():
    logits = torch.zeros(1, 2, 2, 1, dtype=torch.float64, requires_grad=True)
    generator_adversarial_loss(logits).backward()
    # d/dz softplus(-z) at 0 = -0.5, averaged over 4 patches
    assert torch.allclose(logits.grad, torch.full_like(logits, -0.125))
