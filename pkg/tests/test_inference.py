import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesttoken import inference as inf


# --- window planning ---------------------------------------------------------------

def test_plan_single_window():
    plan = inf.plan_windows(128, 128, 96)
    assert plan.count == 1 and plan.starts == [0]
    assert plan.overlap == 32


def test_plan_three_windows():
    plan = inf.plan_windows(320, 128, 96)
    assert plan.count == 3 and plan.starts == [0, 96, 192]


def test_plan_right_aligned_tail():
    plan = inf.plan_windows(129, 128, 96)
    assert plan.count == 2 and plan.starts == [0, 1]


def test_plan_short_input_padded_flag():
    plan = inf.plan_windows(100, 128, 96)
    assert plan.padded and plan.count == 1


def brute_count(t, w, s):
    if t < w:
        return 1
    k = 0
    while k * s < t - w:
        k += 1
    return k + 1


@settings(max_examples=500, deadline=None)
@given(t=st.integers(1, 2000), w=st.integers(1, 512), s=st.integers(1, 256))
def test_plan_count_matches_bruteforce(t, w, s):
    plan = inf.plan_windows(t, w, s)
    assert plan.count == brute_count(t, w, s)
    if t >= w:
        assert plan.starts[-1] + w >= t          # full coverage
        assert all(b - a <= s for a, b in zip(plan.starts, plan.starts[1:]))


# --- envelope ----------------------------------------------------------------------

def test_hann_w3_values():
    h = inf.hann_envelope(3)
    assert math.isclose(h[1], 1.0, abs_tol=1e-12)
    assert math.isclose(h[0], 0.5, abs_tol=1e-12)
    assert math.isclose(h[2], 0.5, abs_tol=1e-12)


def test_hann_strictly_positive_1_to_512():
    for w in range(1, 513):
        assert inf.hann_envelope(w).min() > 0.0


def test_hann_rejects_bad_window():
    with pytest.raises(ValueError):
        inf.hann_envelope(0)


# --- overlap add -------------------------------------------------------------------

def test_ola_consistent_windows_identity():
    rng = np.random.default_rng(0)
    for trial in range(50):
        t = int(rng.integers(128, 500))
        src = rng.normal(size=(t, 4))
        plan = inf.plan_windows(t, 128, 96)
        wins = [src[s:s + 128] for s in plan.starts]
        out = inf.overlap_add(wins, plan)
        assert np.abs(out - src).max() < 1e-12


def test_ola_single_window_identity():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(128, 3))
    plan = inf.plan_windows(128, 128, 96)
    out = inf.overlap_add([src], plan)
    assert np.abs(out - src).max() < 1e-12


def test_ola_convex_combination_bounds():
    rng = np.random.default_rng(2)
    t = 320
    plan = inf.plan_windows(t, 128, 96)
    wins = [rng.normal(size=(128, 2)) for _ in plan.starts]
    out = inf.overlap_add(wins, plan)
    for frame in range(t):
        contrib = [w[frame - s] for s, w in zip(plan.starts, wins)
                   if s <= frame < s + 128]
        lo = np.min(contrib, axis=0) - 1e-12
        hi = np.max(contrib, axis=0) + 1e-12
        assert ((out[frame] >= lo) & (out[frame] <= hi)).all()


def test_ola_rejects_wrong_window_count():
    plan = inf.plan_windows(320, 128, 96)
    with pytest.raises(inf.AssemblyError):
        inf.overlap_add([np.zeros((128, 2))], plan)


def test_assembly_buffer_detects_uncovered_frame():
    buf = inf.AssemblyBuffer.empty(10, 2)
    buf.add(0, np.ones((5, 2)), inf.hann_envelope(5))
    with pytest.raises(inf.AssemblyError):
        buf.resolve()


# --- postprocess --------------------------------------------------------------------

def test_postprocess_zero_velocity_zero_positions():
    motion = np.zeros((100, 4), dtype=np.float32)
    out = inf.postprocess(motion, velocity_channels=2)
    assert np.abs(out[:, :2]).max() == 0.0


def test_postprocess_rotation_channels_untouched():
    rng = np.random.default_rng(3)
    motion = rng.normal(size=(100, 5)).astype(np.float32)
    out = inf.postprocess(motion, velocity_channels=2)
    assert np.array_equal(out[:, 2:], motion[:, 2:])


def test_postprocess_noop_without_velocity_channels():
    rng = np.random.default_rng(4)
    motion = rng.normal(size=(50, 3)).astype(np.float32)
    out = inf.postprocess(motion, velocity_channels=0)
    assert np.allclose(out, motion)


def test_postprocess_mean_bound_on_drift():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(5):
        drift_vel = rng.normal(size=(600, 2))
        motion = np.concatenate([drift_vel, rng.normal(size=(600, 3))], axis=1)
        out = inf.postprocess(motion.astype(np.float32), velocity_channels=2)
        rms = np.sqrt((out[:, :2] ** 2).mean())
        worst = max(worst, np.abs(out[:, :2].mean(axis=0)).max() / rms)
    assert worst <= 1e-6


def test_constant_velocity_prefilter_is_linear_ramp():
    # the integration stage alone: cumulative sum of constant v is linear
    v = 0.37
    vel = np.full((120, 1), v)
    pos = np.cumsum(vel, axis=0)
    slope = np.diff(pos[:, 0])
    assert np.allclose(slope, v)
    # and postprocess then removes the ramp's low-frequency trend
    motion = np.concatenate([vel, np.zeros((120, 2))], axis=1)
    out = inf.postprocess(motion.astype(np.float32), velocity_channels=1)
    assert np.abs(out[:, 0]).max() < np.abs(pos).max()


def test_moving_average_window_validation():
    with pytest.raises(ValueError):
        inf.moving_average(np.zeros((10, 1)), 0)
