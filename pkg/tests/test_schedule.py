import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from layerstack.schedule import (
    NoiseSchedule,
    ScheduleError,
    build_schedule,
    ddim_step,
    ddim_timesteps,
    draw_timesteps,
    predict_x0,
    q_sample,
)


@pytest.fixture(scope="module")
def sched():
    return build_schedule()


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[1] == 0.5


def test_default_schedule_product_oracle(sched):
    beta = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    prod = 1.0
    for i, b in enumerate(beta, 1):
        prod *= 1.0 - b
        assert abs(sched.alpha_bar[i] - prod) < 1e-12
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[1000] < 0.01
    assert np.all((sched.beta > 0) & (sched.beta < 1))


@pytest.mark.parametrize("args", [(1000, 0.0, 0.0), (1000, 0.02, 0.01), (1000, 1e-4, 1.0), (0, 1e-4, 0.02)])
def test_invalid_schedules(args):
    with pytest.raises(ScheduleError):
        build_schedule(*args)


def test_q_sample_boundaries(sched):
    x0 = torch.randn(2, 3, 4, 4)
    eps = torch.randn(2, 3, 4, 4)
    assert torch.equal(q_sample(sched, x0, 0, eps), x0)
    zero_end = NoiseSchedule(1, np.array([0.5]), np.array([1.0, 0.0]))
    assert torch.equal(q_sample(zero_end, x0, 1, eps), eps)


def test_q_sample_shape_mismatch(sched):
    with pytest.raises(ScheduleError):
        q_sample(sched, torch.zeros(2, 3), 5, torch.zeros(3, 2))


def test_predict_x0_trivial(sched):
    x = torch.randn(3, 5)
    assert torch.equal(predict_x0(sched, x, 0, torch.zeros_like(x)), x)


def test_predict_x0_elementwise_oracle(sched):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 3, generator=g, dtype=torch.float64)
    e = torch.randn(4, 3, generator=g, dtype=torch.float64)
    t = 437
    ab = sched.alpha_bar[t]
    out = predict_x0(sched, x, t, e)
    for i in range(4):
        for j in range(3):
            ref = (x[i, j].item() - (1 - ab) ** 0.5 * e[i, j].item()) / ab**0.5
            assert abs(out[i, j].item() - ref) < 1e-12


def test_predict_x0_inverts_q_sample_float64(sched):
    g = torch.Generator().manual_seed(1)
    for t in (1, 250, 999, 1000):
        x0 = torch.rand(3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
        e = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
        rec = predict_x0(sched, q_sample(sched, x0, t, e), t, e)
        assert (rec - x0).abs().max() < 1e-10


def test_zero_alpha_bar_rejected():
    s = NoiseSchedule(1, np.array([0.5]), np.array([1.0, 0.0]))
    with pytest.raises(ScheduleError):
        predict_x0(s, torch.zeros(2), 1, torch.zeros(2))


def test_per_layer_timesteps_broadcast(sched):
    x0 = torch.randn(2, 3, 6, 4, 4, dtype=torch.float64)
    e = torch.randn_like(x0)
    t = torch.tensor([[1, 500, 1000], [20, 20, 20]])
    out = q_sample(sched, x0, t, e)
    for b in range(2):
        for n in range(3):
            ref = q_sample(sched, x0[b, n], int(t[b, n]), e[b, n])
            assert torch.allclose(out[b, n], ref, atol=0, rtol=0)


def test_ddim_to_zero_returns_x0(sched):
    g = torch.Generator().manual_seed(2)
    x0 = torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
    e = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    xt = q_sample(sched, x0, 600, e)
    assert torch.equal(ddim_step(sched, xt, e, 600, 0), predict_x0(sched, xt, 600, e))
    assert torch.allclose(ddim_step(sched, xt, e, 600, 0), x0, atol=1e-12)


def test_ddim_rejects_bad_order(sched):
    x = torch.zeros(2)
    for t, tp in ((10, 10), (10, 20), (5, -1)):
        with pytest.raises(ScheduleError):
            ddim_step(sched, x, x, t, tp)


def test_ddim_oracle_trajectory(sched):
    g = torch.Generator().manual_seed(3)
    x0 = torch.rand(2, 6, 8, 8, generator=g) * 2 - 1
    eps = torch.randn(2, 6, 8, 8, generator=g)
    ts = ddim_timesteps(sched.T, 50)
    x = q_sample(sched, x0, ts[0], eps)
    for t, tp in zip(ts[:-1], ts[1:]):
        sa, s1a = sched.coef(t, x)
        oracle = (x - sa * x0) / s1a
        x = ddim_step(sched, x, oracle, t, tp)
    assert (x - x0).abs().max() <= 1e-3


@settings(max_examples=20, deadline=None)
@given(steps=st.integers(1, 200))
def test_ddim_timesteps_strictly_decreasing(steps):
    ts = ddim_timesteps(1000, steps)
    assert ts[0] == 1000 and ts[-1] == 0 and len(ts) == steps + 1
    assert all(a > b for a, b in zip(ts, ts[1:]))


def test_draw_timesteps_branches():
    rng = np.random.default_rng(0)
    a = draw_timesteps(4, 1000, rng, force="shared")
    assert a.shared and len(set(a.timesteps)) == 1
    vals = np.array([draw_timesteps(4, 1000, rng, force="independent").timesteps for _ in range(2000)])
    assert vals.min() >= 1 and vals.max() <= 1000
    # independent draws: the four columns are uncorrelated and roughly uniform
    assert abs(vals.mean() - 500.5) < 15
    corr = np.corrcoef(vals.T)
    assert np.abs(corr[np.triu_indices(4, 1)]).max() < 0.1


def test_draw_timesteps_frequency_and_reproducibility():
    rng = np.random.default_rng(123)
    shared = [draw_timesteps(3, 1000, rng).shared for _ in range(10_000)]
    assert 0.47 <= np.mean(shared) <= 0.53
    a = [draw_timesteps(3, 1000, np.random.default_rng(9)).timesteps for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_draw_timesteps_needs_two_layers():
    with pytest.raises(ScheduleError):
        draw_timesteps(1, 1000, np.random.default_rng(0))
