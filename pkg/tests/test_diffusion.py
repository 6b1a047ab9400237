import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from riskgen.diffusion import (NoiseSchedule, build_schedule, ddim_step, forward_diffuse,
                               forward_diffuse_batch, predict_z0)


def two_step(ab1=0.64, ab2=0.25):
    """Schedule with alpha_bar_1 = ab1, alpha_bar_2 = ab2."""
    return NoiseSchedule(2, np.array([ab1, ab2 / ab1]), np.array([1.0, ab1, ab2]))


def test_linear_zero_beta_is_identity_schedule():
    s = build_schedule("linear", T=3, betas=[0.0, 0.0, 0.0])
    assert s.alphas.tolist() == [1.0, 1.0, 1.0]
    assert s.alpha_bars.tolist() == [1.0, 1.0, 1.0, 1.0]


def test_explicit_betas_hand_cumprod():
    s = build_schedule("linear", T=2, betas=[0.1, 0.2])
    np.testing.assert_allclose(s.alphas, [0.9, 0.8], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bars, [1.0, 0.9, 0.72], rtol=0, atol=1e-15)


@pytest.mark.parametrize("T", [0, -3])
def test_rejects_empty_schedule(T):
    with pytest.raises(ValueError):
        build_schedule(T=T)


@pytest.mark.parametrize("betas", [[0.1, 1.0], [-0.1, 0.2], [0.1, float("nan")]])
def test_rejects_bad_betas(betas):
    with pytest.raises(ValueError):
        build_schedule(T=2, betas=betas)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    s = build_schedule(kind, T=50)
    assert s.alpha_bars[0] == 1.0
    assert np.all(s.alpha_bars > 0)
    assert np.all(np.diff(s.alpha_bars) <= 0)
    np.testing.assert_allclose(s.alpha_bars[1:], s.alpha_bars[:-1] * s.alphas, rtol=0, atol=1e-12)
    assert s.alpha_bars.dtype == np.float64


def test_forward_scalar():
    s = two_step(0.64, 0.25)
    z = forward_diffuse(np.array([[2.0]]), 2, np.array([[1.0]]), s)
    assert z[0, 0] == pytest.approx(0.5 * 2.0 + math.sqrt(0.75), abs=1e-12)
    assert z[0, 0] == pytest.approx(1.8660254, abs=1e-7)


def test_forward_identity_and_zero_signal():
    s = build_schedule(T=3, betas=[0.0, 0.0, 0.0])
    z0 = np.arange(6.0).reshape(2, 3)
    eps = np.ones((2, 3))
    assert np.array_equal(forward_diffuse(z0, 2, eps, s), z0)
    s = two_step()
    np.testing.assert_allclose(forward_diffuse(np.zeros((2, 3)), 2, eps, s), math.sqrt(0.75) * eps)


def test_forward_errors():
    s = two_step()
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((2, 3)), 1, np.zeros((2, 2)), s)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((2, 3)), 3, np.zeros((2, 3)), s)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((2, 3)), 0, np.zeros((2, 3)), s)


def test_predict_z0_scalar():
    s = two_step(0.64, 0.25)
    z0 = predict_z0(np.array([[1.0]]), np.array([[0.5]]), 2, s)
    assert z0[0, 0] == pytest.approx((1 - math.sqrt(0.75) * 0.5) / 0.5, abs=1e-12)
    assert z0[0, 0] == pytest.approx(1.1339746, abs=1e-7)
    zt = np.array([[1.5, -2.0]])
    np.testing.assert_allclose(predict_z0(zt, np.zeros_like(zt), 2, s), 2 * zt)


def test_ddim_step_scalar():
    s = two_step(0.64, 0.25)
    z = ddim_step(np.array([[1.0]]), np.array([[0.5]]), 2, s)
    expected = 0.8 * (1 - math.sqrt(0.75) * 0.5) / 0.5 + 0.6 * 0.5
    assert z[0, 0] == pytest.approx(expected, abs=1e-12)
    assert z[0, 0] == pytest.approx(1.2071797, abs=1e-7)


def test_last_step_returns_estimate_exactly():
    s = build_schedule(T=10)
    rng = np.random.default_rng(0)
    zt, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert np.array_equal(ddim_step(zt, eps, 1, s), predict_z0(zt, eps, 1, s))


def test_ddim_rejects_nonfinite_and_bad_step():
    s = build_schedule(T=5)
    with pytest.raises(FloatingPointError):
        ddim_step(np.array([[np.nan]]), np.zeros((1, 1)), 3, s)
    with pytest.raises(ValueError):
        ddim_step(np.zeros((1, 1)), np.zeros((1, 1)), 6, s)


def test_zero_noise_chain_is_identity():
    s = build_schedule(T=4, betas=[0.0] * 4)
    z = np.random.default_rng(1).normal(size=(3, 2))
    out = z
    for t in range(4, 0, -1):
        out = ddim_step(out, np.random.default_rng(t).normal(size=z.shape), t, s)
    assert np.array_equal(out, z)


def test_oracle_chain_recovers_z0():
    # eps_hat reproduces the noise actually present in z_t, so every
    # estimate is exact and the chain lands on z0
    s = build_schedule(T=50)
    rng = np.random.default_rng(2)
    z0, eps = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
    z = forward_diffuse(z0, s.T, eps, s)
    for t in range(s.T, 0, -1):
        z = ddim_step(z, eps, t, s)
    assert np.abs(z - z0).max() < 1e-5


def test_batch_forward_matches_per_row():
    s = build_schedule(T=20)
    rng = np.random.default_rng(3)
    z0, eps = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    ts = np.array([1, 5, 9, 20, 13])
    got = forward_diffuse_batch(z0, ts, eps, s)
    for i, t in enumerate(ts):
        np.testing.assert_array_equal(got[i], forward_diffuse(z0[i:i + 1], int(t), eps[i:i + 1], s)[0])


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(z0=arrays(np.float64, (3, 4), elements=finite), eps=arrays(np.float64, (3, 4), elements=finite),
       t=st.integers(1, 50))
def test_round_trip_property(z0, eps, t):
    s = build_schedule(T=50)
    back = predict_z0(forward_diffuse(z0, t, eps, s), eps, t, s)
    np.testing.assert_allclose(back, z0, rtol=0, atol=1e-6 * (1 + np.abs(eps).max()))


@settings(max_examples=100, deadline=None)
@given(zt=arrays(np.float64, (2, 3), elements=finite), eps=arrays(np.float64, (2, 3), elements=finite),
       t=st.integers(1, 30))
def test_step_defined_via_estimate(zt, eps, t):
    s = build_schedule(T=30)
    ab = s.alpha_bars[t - 1]
    expected = np.sqrt(ab) * predict_z0(zt, eps, t, s) + np.sqrt(1 - ab) * eps
    assert np.array_equal(ddim_step(zt, eps, t, s), expected)
