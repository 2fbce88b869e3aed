import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vesseldiff.diffusion import (
    NoiseSchedule,
    denoising_loss,
    forward_sample,
    make_linear_schedule,
    posterior_step,
)


def oracle_eps(x_t, x0, t, sched):
    abar = sched.alpha_bar[t - 1]
    return (x_t - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert s.alpha_bar[0] == 0.5


def test_default_schedule_terminal_alpha_bar():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    prod = 1.0
    for b in s.beta:
        prod *= 1.0 - b
    assert abs(prod - s.alpha_bar[-1]) < 1e-15
    assert s.alpha_bar[-1] < 1e-4


@given(
    T=st.integers(2, 400),
    lo=st.floats(1e-5, 0.2),
    span=st.floats(1e-4, 0.5),
)
@settings(max_examples=40, deadline=None)
def test_schedule_invariants(T, lo, span):
    hi = min(lo + span, 0.99)
    s = make_linear_schedule(T, lo, hi)
    assert np.all(np.diff(s.beta) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < s.alpha_bar[0] < 1
    recomputed = np.cumprod(1 - s.beta)
    assert np.max(np.abs(recomputed - s.alpha_bar)) <= 1e-12
    for t in range(1, T):
        assert abs(s.alpha_bar[t] - (1 - s.beta[t]) * s.alpha_bar[t - 1]) <= 1e-12


@pytest.mark.parametrize(
    "args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 1e-4, 1.0), (10, 0.03, 0.02), (10, -0.1, 0.5)]
)
def test_schedule_rejects_bad_args(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_schedule_text_roundtrip():
    s = make_linear_schedule(37, 2e-4, 0.03)
    back = NoiseSchedule.from_text(s.to_text())
    assert back.T == 37
    np.testing.assert_array_equal(back.beta, s.beta)
    np.testing.assert_array_equal(back.alpha_bar, s.alpha_bar)


def _limit_schedule(abar):
    return NoiseSchedule(T=1, beta=np.array([1 - abar]), alpha_bar=np.array([abar]), beta_start=0, beta_end=0)


def test_forward_limits():
    rng = np.random.default_rng(0)
    x0 = rng.random((4, 4))
    eps = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(forward_sample(x0, 1, eps, _limit_schedule(1.0)).x_t, x0)
    np.testing.assert_array_equal(forward_sample(x0, 1, eps, _limit_schedule(0.0)).x_t, eps)


def test_forward_statistics():
    s = make_linear_schedule(1000)
    t = 300
    rng = np.random.default_rng(1)
    eps = rng.standard_normal(100_000)
    x = forward_sample(np.zeros(100_000), t, eps, s).x_t
    var = 1 - s.alpha_bar[t - 1]
    assert abs(x.mean()) < 4 * np.sqrt(var / 100_000)
    assert abs(x.var() / var - 1) < 0.02


def test_forward_errors():
    s = make_linear_schedule(10)
    with pytest.raises(ValueError):
        forward_sample(np.zeros((2, 2)), 1, np.zeros((3, 2)), s)
    for bad in (0, 11):
        with pytest.raises(ValueError):
            forward_sample(np.zeros(2), bad, np.zeros(2), s)


def test_forward_batched_timesteps_torch():
    s = make_linear_schedule(50)
    x0 = torch.ones(3, 1, 2, 2)
    eps = torch.zeros(3, 1, 2, 2)
    t = torch.tensor([1, 10, 50])
    x = forward_sample(x0, t, eps, s).x_t
    expected = torch.tensor(np.sqrt(s.alpha_bar[[0, 9, 49]]), dtype=torch.float32)
    torch.testing.assert_close(x[:, 0, 0, 0], expected)


def test_posterior_inverts_at_t1():
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(2)
    x0 = rng.choice([-1.0, 1.0], size=(8, 8))
    eps = rng.standard_normal((8, 8))
    x1 = forward_sample(x0, 1, eps, s).x_t
    out = posterior_step(x1, eps, 1, s, z=np.zeros_like(x1))
    assert np.max(np.abs(out - x0)) < 1e-6


def test_posterior_identity_when_beta_vanishes():
    x = np.random.default_rng(3).standard_normal((5,))
    s = make_linear_schedule(2, 1e-12, 1e-12)
    np.testing.assert_allclose(posterior_step(x, np.zeros_like(x), 2, s, z=np.zeros_like(x)), x, atol=1e-11)


def test_posterior_ignores_noise_at_last_step():
    s = make_linear_schedule(10)
    x = np.ones(4)
    z = np.full(4, 5.0)
    np.testing.assert_array_equal(posterior_step(x, x, 1, s, z=z), posterior_step(x, x, 1, s))
    assert not np.allclose(posterior_step(x, x, 2, s, z=z), posterior_step(x, x, 2, s))


def test_posterior_batched_gate_torch():
    s = make_linear_schedule(10)
    x = torch.zeros(2, 3)
    z = torch.ones(2, 3)
    out = posterior_step(x, torch.zeros_like(x), torch.tensor([1, 2]), s, z=z)
    assert torch.all(out[0] == 0)
    torch.testing.assert_close(out[1], torch.full((3,), float(np.sqrt(s.beta[1]))))


def test_closed_loop_oracle_chain_recovers_x0():
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(4)
    x0 = rng.choice([-1.0, 1.0], size=(16, 16))
    x = forward_sample(x0, 1000, rng.standard_normal((16, 16)), s).x_t
    for t in range(1000, 0, -1):
        x = posterior_step(x, oracle_eps(x, x0, t, s), t, s, z=np.zeros_like(x))
    assert np.max(np.abs(x - x0)) < 1e-3


@given(t0=st.integers(1, 200), seed=st.integers(0, 2**16))
@settings(max_examples=25, deadline=None)
def test_forward_backward_identity(t0, seed):
    s = make_linear_schedule(200, 1e-4, 0.05)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((4, 4))
    x = forward_sample(x0, t0, rng.standard_normal((4, 4)), s).x_t
    for t in range(t0, 0, -1):
        x = posterior_step(x, oracle_eps(x, x0, t, s), t, s)
    assert np.max(np.abs(x - x0)) < 1e-3


def naive_mse(a, b):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            total += (a[i, j] - b[i, j]) ** 2
    return total / a.size


def test_denoising_loss_values():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((8, 8))
    b = rng.standard_normal((8, 8))
    assert denoising_loss(a, a) == 0.0
    assert denoising_loss(a, a + 1.0) == pytest.approx(1.0, abs=1e-12)
    assert abs(denoising_loss(a, b) - naive_mse(a, b)) < 1e-10
    with pytest.raises(ValueError):
        denoising_loss(a, b[:4])


def test_denoising_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    a = torch.tensor(rng.standard_normal((6, 6)), dtype=torch.float64)
    b = torch.tensor(rng.standard_normal((6, 6)), dtype=torch.float64, requires_grad=True)
    denoising_loss(a, b).backward()
    h = 1e-6
    for idx in [(0, 0), (2, 3), (5, 5)]:
        bp = b.detach().clone()
        bm = b.detach().clone()
        bp[idx] += h
        bm[idx] -= h
        fd = (denoising_loss(a, bp) - denoising_loss(a, bm)) / (2 * h)
        assert abs(fd - b.grad[idx]) / abs(b.grad[idx]) < 1e-5
