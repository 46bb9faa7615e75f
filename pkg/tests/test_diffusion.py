import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daegrade.diffusion import (NoiseSchedule, ddim_invert_step, ddim_step, linear_beta_schedule,
                                make_step_schedule, q_sample)


def custom_schedule(alpha_bars):
    ab = np.array([1.0, *alpha_bars])
    return NoiseSchedule(len(alpha_bars), 0.0, 0.0, np.zeros_like(ab), ab)


def test_single_step_schedule():
    s = linear_beta_schedule(1, 1e-4, 1e-4)
    assert s.betas[1:].tolist() == [1e-4]
    assert s.alpha_bar.tolist() == [1.0, 1 - 1e-4]


def test_default_schedule_nearly_destroys_signal():
    s = linear_beta_schedule()
    # independent route: log-sum of the linear betas
    log_ab = sum(math.log(1 - (1e-4 + (0.02 - 1e-4) * i / 999)) for i in range(1000))
    assert s.alpha_bar[1000] == pytest.approx(math.exp(log_ab), rel=1e-9)
    assert s.alpha_bar[1000] < 0.01


@pytest.mark.parametrize("T,lo,hi", [(1, 0.1, 0.1), (10, 1e-3, 0.5), (1000, 1e-4, 0.02)])
def test_alpha_bar_strictly_decreasing(T, lo, hi):
    s = linear_beta_schedule(T, lo, hi)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.betas[1:] > 0) & (s.betas[1:] < 1))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValueError):
        linear_beta_schedule(*args)


def test_q_sample_cases():
    s = linear_beta_schedule(50)
    x0 = np.full((3, 3), 0.7)
    assert np.allclose(q_sample(x0, 10, np.zeros_like(x0), s), math.sqrt(s.alpha_bar[10]) * x0)
    assert np.array_equal(q_sample(x0, 0, np.ones_like(x0), s), x0)
    hand = custom_schedule([0.25])
    assert q_sample(np.array(1.0), 1, np.array(2.0), hand) == pytest.approx(2.2320508, abs=1e-6)
    with pytest.raises(ValueError):
        q_sample(x0, 51, x0, s)


def test_q_sample_linear_in_x0():
    s = linear_beta_schedule(100)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 8, 8))
    a, b = 0.3, -1.7
    zero = np.zeros_like(x)
    lhs = q_sample(a * x + b * y, 40, zero, s)
    rhs = a * q_sample(x, 40, zero, s) + b * q_sample(y, 40, zero, s)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_ddim_step_hand_values():
    s = custom_schedule([0.64, 0.04])
    assert ddim_step(np.array(1.0), np.array(0.5), 2, 1, s) == pytest.approx(2.3404, abs=1e-4)
    assert ddim_invert_step(np.array(2.3404082), np.array(0.5), 1, 2, s) == pytest.approx(1.0, abs=1e-6)


def test_zero_eps_is_pure_rescaling():
    s = linear_beta_schedule(100)
    x = np.linspace(-1, 1, 16).reshape(4, 4)
    ratio = math.sqrt(s.alpha_bar[20] / s.alpha_bar[70])
    assert np.allclose(ddim_step(x, np.zeros_like(x), 70, 20, s), x * ratio)
    assert np.allclose(ddim_invert_step(x, np.zeros_like(x), 20, 70, s), x / ratio)


def test_step_order_is_enforced():
    s = linear_beta_schedule(10)
    x = np.zeros(2)
    with pytest.raises(ValueError):
        ddim_step(x, x, 5, 5, s)
    with pytest.raises(ValueError):
        ddim_invert_step(x, x, 6, 5, s)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 999), st.integers(1, 1000), st.integers(0, 2**32 - 1))
def test_step_inverts_invert_step(tp, dt, seed):
    s = linear_beta_schedule()
    t = min(tp + dt, 1000)
    if t <= tp:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 4))
    eps = rng.normal(size=(4, 4))
    back = ddim_step(ddim_invert_step(x, eps, tp, t, s), eps, t, tp, s)
    assert np.all(np.abs(back - x) <= 1e-5 * np.maximum(np.abs(x), 1.0))


def test_step_schedules():
    s20 = make_step_schedule(1000, 20)
    assert len(s20) == 21 and s20[0] == 0 and s20[-1] == 1000
    assert all(b > a for a, b in zip(s20, s20[1:]))
    assert make_step_schedule(10, 5) == [0, 2, 4, 6, 8, 10]
    assert make_step_schedule(7, 7) == list(range(8))
    for bad in (0, 11):
        with pytest.raises(ValueError):
            make_step_schedule(10, bad)


@given(st.integers(1, 1000), st.data())
def test_step_schedule_invariants(T, data):
    k = data.draw(st.integers(1, T))
    steps = make_step_schedule(T, k)
    assert len(steps) == k + 1 and steps[0] == 0 and steps[-1] == T
    assert all(b > a for a, b in zip(steps, steps[1:]))
