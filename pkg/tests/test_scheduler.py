import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zippo.scheduler import (ScheduleError, add_noise, ddim_step, default_beta_end, make_plan, make_schedule,
                             predict_z0)


def test_four_step_schedule_by_hand():
    s = make_schedule(4, 0.1, 0.4)
    np.testing.assert_allclose(s.betas, [0.1, 0.2, 0.3, 0.4], atol=1e-15)
    np.testing.assert_allclose(s.alphas_bar, [1.0, 0.9, 0.72, 0.504, 0.3024], atol=1e-12)
    assert s.alpha_bar(0) == 1.0


def test_single_step_schedule():
    s = make_schedule(1, 0.3, 0.3)
    assert s.alpha_bar(1) == pytest.approx(0.7)


def test_default_schedule():
    s = make_schedule()
    assert s.T == 200 and s.beta_start == 1e-3
    assert s.beta_end == pytest.approx(0.05) == default_beta_end(200)
    assert default_beta_end(1000) == pytest.approx(0.02)
    # terminal alpha_bar is close to zero so sampling can start from pure noise
    assert s.alpha_bar(200) < 1e-2


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0), (2.5, 0.1, 0.2)])
def test_invalid_schedule(args):
    with pytest.raises(ScheduleError):
        make_schedule(*args)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 400), lo=st.floats(1e-5, 0.5), span=st.floats(0.0, 0.49))
def test_alpha_bar_strictly_decreasing(T, lo, span):
    s = make_schedule(T, lo, min(lo + span, 0.999))
    assert np.all(np.diff(s.alphas_bar) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1))


def test_add_noise_examples():
    s = make_schedule(4, 0.1, 0.4)
    z0 = np.random.default_rng(0).normal(size=(2, 3)).astype(np.float32)
    np.testing.assert_allclose(add_noise(s, z0, np.zeros_like(z0), 2), np.sqrt(0.72) * z0, rtol=1e-6)
    # a schedule whose alpha_bar_1 is exactly 0.25
    q = make_schedule(1, 0.75, 0.75)
    assert add_noise(q, np.array(1.0), np.array(0.0), 1) == pytest.approx(0.5)


def test_add_noise_recovers_eps_and_z0():
    s = make_schedule()
    rng = np.random.default_rng(1)
    z0, eps = rng.normal(size=(4, 4, 8, 8)).astype(np.float32), rng.normal(size=(4, 4, 8, 8)).astype(np.float32)
    for t in (1, 57, 200):
        zt = add_noise(s, z0, eps, t)
        ab = s.alpha_bar(t)
        np.testing.assert_allclose((zt - np.sqrt(ab) * z0) / np.sqrt(1 - ab), eps, atol=1e-4)
        assert np.abs(predict_z0(s, zt, eps, t) - z0).max() < 1e-4
        e = rng.normal(size=z0.shape).astype(np.float32)
        assert np.abs(add_noise(s, predict_z0(s, zt, e, t), e, t) - zt).max() < 1e-4


def test_predict_z0_zero_eps():
    s = make_schedule(10, 0.01, 0.1)
    zt = np.ones(3, dtype=np.float32)
    np.testing.assert_allclose(predict_z0(s, zt, np.zeros(3), 5), zt / np.sqrt(s.alpha_bar(5)), rtol=1e-6)


def test_per_sample_timesteps():
    s = make_schedule()
    rng = np.random.default_rng(2)
    z0, eps = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(3, 2, 4, 4))
    t = np.array([1, 100, 200])
    batched = add_noise(s, z0, eps, t)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], add_noise(s, z0[i], eps[i], int(t[i])))


def test_variance_preserved_for_every_t():
    s = make_schedule()
    rng = np.random.default_rng(3)
    z0, eps = rng.standard_normal(8192), rng.standard_normal(8192)
    for t in range(1, s.T + 1):
        assert 0.9 <= add_noise(s, z0, eps, t).var() <= 1.1


def test_timestep_range_errors():
    s = make_schedule(10, 0.01, 0.1)
    for t in (0, 11, -1):
        with pytest.raises(ScheduleError):
            add_noise(s, np.zeros(2), np.zeros(2), t)
    with pytest.raises(ScheduleError):
        predict_z0(s, np.zeros(2), np.zeros(2), 0)
    with pytest.raises(ScheduleError):
        add_noise(s, np.zeros(2), np.zeros(3), 1)


def test_ddim_step_examples():
    s = make_schedule()
    rng = np.random.default_rng(4)
    z0, eps = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    zt = add_noise(s, z0, eps, 120)
    np.testing.assert_allclose(ddim_step(s, zt, eps, 120, 0), z0, atol=1e-10)
    assert np.all(ddim_step(s, np.zeros(4), np.zeros(4), 50, 20) == 0)
    # two steps with oracle noise predictions land on z0
    z_mid = ddim_step(s, zt, eps, 120, 60)
    np.testing.assert_allclose(z_mid, add_noise(s, z0, eps, 60), atol=1e-10)
    np.testing.assert_allclose(ddim_step(s, z_mid, eps, 60, 0), z0, atol=1e-4)
    with pytest.raises(ScheduleError):
        ddim_step(s, zt, eps, 60, 60)
    with pytest.raises(ScheduleError):
        ddim_step(s, zt, eps, 60, -1)


def test_ddim_is_deterministic():
    s = make_schedule()
    rng = np.random.default_rng(5)
    z, e = rng.normal(size=(2, 4, 8, 8)).astype(np.float32), rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    a = ddim_step(s, ddim_step(s, z, e, 200, 150), e, 150, 0)
    b = ddim_step(s, ddim_step(s, z, e, 200, 150), e, 150, 0)
    assert a.tobytes() == b.tobytes()


def test_make_plan():
    assert make_plan(7, 7) == [7, 6, 5, 4, 3, 2, 1]
    assert make_plan(200, 1) == [200]
    plan = make_plan(200, 20)
    assert len(plan) == 20 and plan[0] == 200 and set(np.diff(plan)) == {-10}
    with pytest.raises(ScheduleError):
        make_plan(10, 11)
    with pytest.raises(ScheduleError):
        make_plan(10, 0)


@settings(max_examples=80, deadline=None)
@given(T=st.integers(1, 500), data=st.data())
def test_plan_invariants(T, data):
    S = data.draw(st.integers(1, T))
    plan = make_plan(T, S)
    assert len(plan) == S and plan[0] <= T and plan[-1] >= 1
    assert all(a > b for a, b in zip(plan, plan[1:]))
