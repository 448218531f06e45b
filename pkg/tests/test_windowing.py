import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lff.errors import ConfigError, DomainError
from lff.windowing import (StepLog, StubDenoiser, baseline_sample, dwsw_sample, euler_step, log_weights,
                           make_plan, motion_frame_sample, plain_window_sample, seam_discontinuity,
                           stub_targets, stub_weighting_ablation, timestep_grid, weight_curve)


def _direct_log_weights(m):
    # straight transcription of the three curve lines
    w = [i / (m - 1) for i in range(m)]
    w = [math.log(1 + x * (math.e - 1)) for x in w]
    lo, hi = min(w), max(w)
    return [(x - lo) / (hi - lo) for x in w]


def test_log_weights_m2_m3():
    np.testing.assert_array_equal(log_weights(2), [0.0, 1.0])
    w = log_weights(3)
    assert abs(w[1] - math.log(1 + (math.e - 1) / 2)) <= 1e-12
    assert abs(w[1] - 0.620114507) <= 1e-9


@pytest.mark.parametrize("m", range(2, 65))
def test_log_weights_shape(m):
    w = log_weights(m)
    np.testing.assert_allclose(w, _direct_log_weights(m), atol=1e-12)
    assert w[0] == 0.0 and w[-1] == 1.0
    d = np.diff(w)
    assert np.all(d > 0)
    assert np.all(np.diff(d) < 1e-15)  # concave


def test_log_weights_rejects_m1():
    with pytest.raises(ConfigError):
        log_weights(1)


def test_other_schemes():
    np.testing.assert_array_equal(weight_curve(4, "fixed").w, [0.5] * 4)
    np.testing.assert_allclose(weight_curve(4, "uniform").w, [0, 1 / 3, 2 / 3, 1])
    np.testing.assert_array_equal(weight_curve(3, "hard").w, [1, 1, 1])
    with pytest.raises(ConfigError):
        weight_curve(4, "cosine")


def test_plan_examples():
    assert make_plan(8, 4, 2).schedule == ((0, 4), (2, 6), (4, 8))
    assert make_plan(9, 4, 2).schedule == ((0, 4), (2, 6), (4, 8), (6, 9))
    assert make_plan(8, 8, 2).schedule == ((0, 8),)
    assert make_plan(5, 16, 4).schedule == ((0, 5),)


@pytest.mark.parametrize("args,frag", [((8, 4, 1), "m must be >= 2"), ((8, 4, 4), "smaller than"),
                                        ((0, 4, 2), "L must be"), ((8, 0, 2), "l must be")])
def test_plan_errors(args, frag):
    with pytest.raises(ConfigError, match=frag):
        make_plan(*args)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 40).flatmap(lambda m: st.tuples(st.just(m), st.integers(m + 1, 60))).flatmap(
    lambda ml: st.tuples(st.just(ml[0]), st.just(ml[1]), st.integers(ml[1], 400))))
def test_plan_properties(mlL):
    m, l, L = mlL
    sched = make_plan(L, l, m).schedule
    assert sched[0][0] == 0 and sched[-1][1] == L
    covered = np.zeros(L, bool)
    for s, e in sched:
        covered[s:e] = True
    assert covered.all()
    starts = [s for s, _ in sched]
    assert all(b - a == l - m for a, b in zip(starts, starts[1:]))


def test_euler():
    z = np.arange(4.0)
    np.testing.assert_array_equal(euler_step(z, np.zeros(4), 0.7, 0.2), z)
    x0, n = np.array([0.3, -1.0]), np.array([1.2, 0.5])
    assert np.abs(euler_step(n, n - x0, 1.0, 0.0) - x0).max() <= 1e-12
    v = np.array([0.4, -2.0])
    half = euler_step(euler_step(z[:2], v, 1.0, 0.5), v, 0.5, 0.0)
    assert np.abs(half - euler_step(z[:2], v, 1.0, 0.0)).max() <= 1e-12
    with pytest.raises(DomainError):
        euler_step(z, z, 0.3, 0.3)


def test_grid():
    np.testing.assert_allclose(timestep_grid(4), [1, 0.75, 0.5, 0.25, 0])
    with pytest.raises(ConfigError):
        timestep_grid(0)


# -- sampler with stubs ---------------------------------------------------


def _elementwise(z, s, e, t, t_next, motion=None):
    return z * (1 - 0.3 * (t - t_next)) + 0.1 * (t - t_next)


def test_convexity_matches_single_window():
    z = np.random.default_rng(0).standard_normal((20, 2, 3))
    plan = make_plan(20, 8, 3)
    single = make_plan(20, 20, 3)
    for scheme in ("logarithmic", "fixed", "uniform"):
        a = dwsw_sample(_elementwise, z, plan, 6, scheme)
        b = dwsw_sample(_elementwise, z, single, 6, scheme)
        assert np.abs(a - b).max() <= 1e-12


def test_fusion_skips_first_window_and_first_step():
    plan = make_plan(12, 6, 2)
    log = StepLog()
    dwsw_sample(_elementwise, np.zeros((12, 1)), plan, 3, log=log)
    assert log.calls == [(k, s, e) for k in range(3) for s, e in plan.schedule]
    assert log.fusions == [(k, s, e) for k in (1, 2) for s, e in plan.schedule if s != 0]
    log2 = StepLog()
    dwsw_sample(_elementwise, np.zeros((12, 1)), plan, 3, skip_fusion_at_T=False, log=log2)
    assert log2.fusions == [(k, s, e) for k in range(3) for s, e in plan.schedule if s != 0]


def _index_stub(plan):
    index = {se: i for i, se in enumerate(plan.schedule)}
    return lambda z, s, e, t, tn, motion=None: np.full_like(z, float(index[(s, e)]))


def test_hand_trace_L8():
    plan = make_plan(8, 4, 2)
    out = dwsw_sample(_index_stub(plan), np.zeros((8, 1)), plan, 2)
    # windows 0,1,2 at (0,4),(2,6),(4,8); m=2 curve [0, 1]
    np.testing.assert_array_equal(out[:, 0], [0, 0, 0, 1, 1, 2, 2, 2])


def test_hand_trace_L8_uniform_m3():
    plan = make_plan(8, 5, 3)
    out = dwsw_sample(_index_stub(plan), np.zeros((8, 1)), plan, 2, "uniform")
    assert plan.schedule == ((0, 5), (2, 7), (4, 8))
    # window 1 blends frames 2-4 with weights [0, .5, 1]; window 2 blends frames 4-6
    # against window 1's fused output [1, 1, 1]
    np.testing.assert_allclose(out[:, 0], [0, 0, 0, 0.5, 1, 1.5, 2, 2])


def test_shared_buffer_changes_overlap_input():
    plan = make_plan(12, 6, 2)
    z = np.random.default_rng(1).standard_normal((12, 1))
    a = dwsw_sample(_elementwise, z, plan, 4)
    b = dwsw_sample(_elementwise, z, plan, 4, shared_buffer=True)
    assert not np.allclose(a, b)


def test_plain_window_overwrites():
    plan = make_plan(8, 4, 2)
    out = plain_window_sample(_index_stub(plan), np.zeros((8, 1)), plan, 3)
    np.testing.assert_array_equal(out[:, 0], [0, 0, 1, 1, 2, 2, 2, 2])
    const = lambda z, s, e, t, tn, motion=None: np.full_like(z, 3.0)
    np.testing.assert_array_equal(plain_window_sample(const, np.zeros((8, 1)), plan, 3),
                                  dwsw_sample(const, np.zeros((8, 1)), plan, 3))


def test_motion_frame_single_clip_equals_single_window():
    plan = make_plan(6, 8, 2)
    z = np.random.default_rng(2).standard_normal((6, 2))
    np.testing.assert_array_equal(motion_frame_sample(_elementwise, z, plan, 5),
                                  dwsw_sample(_elementwise, z, plan, 5))


def test_motion_frame_passes_previous_frames():
    plan = make_plan(10, 6, 2)
    seen = []

    def den(z, s, e, t, tn, motion=None):
        seen.append((s, None if motion is None else motion.copy()))
        return np.full_like(z, float(s))

    out = baseline_sample("motion_frame", den, np.zeros((10, 1)), plan, 2)
    np.testing.assert_array_equal(out[:, 0], [0] * 6 + [4] * 4)
    first_clip2 = [m for s, m in seen if s == 4][0]
    np.testing.assert_array_equal(first_clip2[:, 0], [0, 0])
    with pytest.raises(ConfigError):
        baseline_sample("teleport", den, np.zeros((10, 1)), plan, 2)


def test_length_mismatch():
    with pytest.raises(ConfigError):
        dwsw_sample(_elementwise, np.zeros((7, 1)), make_plan(8, 4, 2), 2)


def test_stub_denoiser_lands_on_targets():
    plan = make_plan(10, 10, 2)
    targets = stub_targets(plan)
    out = dwsw_sample(StubDenoiser(plan, targets), np.ones((10, 1)), plan, 7)
    np.testing.assert_allclose(out, targets[0], atol=1e-12)


def test_seam_metric_and_scheme_ordering():
    plan = make_plan(8, 4, 2)
    z = np.array([0, 0, 0, 1, 1, 2, 2, 2.0])[:, None]
    assert seam_discontinuity(z, plan) == 1.0
    res = stub_weighting_ablation()
    assert set(res) == {"logarithmic", "fixed", "uniform"}
    assert res["logarithmic"] <= res["fixed"]
