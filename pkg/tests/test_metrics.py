import math

import numpy as np
import pytest

from gesttoken.config import FULL_SCALE_PART_DIMS
from gesttoken import metrics_eval as me


# --- JRMSE / wJRMSE ------------------------------------------------------------------

def test_jrmse_identical_zero():
    x = np.random.default_rng(0).normal(size=(30, 18))
    assert me.jrmse(x, x) == 0.0


def test_jrmse_constant_offset():
    x = np.random.default_rng(1).normal(size=(30, 18))
    assert math.isclose(me.jrmse(x + 0.3, x), 0.09, rel_tol=1e-9)


def test_jrmse_shape_mismatch():
    with pytest.raises(me.MetricError):
        me.jrmse(np.zeros((3, 4)), np.zeros((3, 5)))


def test_wjrmse_full_scale_hands_weight():
    vals = {p: (1.0 if p == "hands" else 0.0) for p in FULL_SCALE_PART_DIMS}
    w = me.wjrmse(vals, FULL_SCALE_PART_DIMS)
    assert math.isclose(w, 180 / 415, rel_tol=1e-12)


def test_wjrmse_weights_sum_to_one():
    vals = {p: 1.0 for p in FULL_SCALE_PART_DIMS}
    assert math.isclose(me.wjrmse(vals, FULL_SCALE_PART_DIMS), 1.0,
                        rel_tol=1e-12)


def test_jrmse_matches_bruteforce():
    rng = np.random.default_rng(2)
    for _ in range(100):
        t, d = int(rng.integers(2, 12)), int(rng.integers(1, 9))
        a, b = rng.normal(size=(t, d)), rng.normal(size=(t, d))
        brute = sum((a[i, j] - b[i, j]) ** 2 for i in range(t)
                    for j in range(d)) / (t * d)
        assert abs(me.jrmse(a, b) - brute) < 1e-10


# --- MSE / LVD -------------------------------------------------------------------------

def test_mse_lvd_identical():
    x = np.random.default_rng(3).normal(size=(20, 6))
    assert me.mse_lvd(x, x) == (0.0, 0.0)


def test_mse_lvd_constant_shift():
    x = np.random.default_rng(4).normal(size=(20, 6))
    c = np.full(6, 0.5)
    mse, lvd = me.mse_lvd(x + c, x)
    assert math.isclose(mse, float(c @ c), rel_tol=1e-9)
    assert lvd < 1e-12


def test_mse_lvd_matches_bruteforce():
    rng = np.random.default_rng(5)
    p, t = rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
    mse_b = np.mean([np.sum((p[i] - t[i]) ** 2) for i in range(9)])
    lvd_b = np.mean([np.sum(np.abs((p[i + 1] - p[i]) - (t[i + 1] - t[i])))
                     for i in range(8)])
    mse, lvd = me.mse_lvd(p, t)
    assert abs(mse - mse_b) < 1e-10 and abs(lvd - lvd_b) < 1e-10


def test_lvd_needs_two_frames():
    with pytest.raises(me.MetricError):
        me.mse_lvd(np.zeros((1, 3)), np.zeros((1, 3)))


# --- FGD --------------------------------------------------------------------------------

def test_fgd_identical_sets_zero():
    x = np.random.default_rng(6).normal(size=(300, 5))
    assert abs(me.fgd(x, x)) < 1e-6


def test_fgd_unit_gaussians_closed_form():
    m1 = me.GaussianMoments(np.array([0.0]), np.array([[1.0]]))
    m2 = me.GaussianMoments(np.array([1.0]), np.array([[1.0]]))
    assert math.isclose(me.fgd_from_moments(m1, m2), 1.0, rel_tol=1e-12)


def test_fgd_diagonal_closed_form():
    rng = np.random.default_rng(7)
    for _ in range(100):
        d = int(rng.integers(1, 8))
        mu_r, mu_g = rng.normal(size=d), rng.normal(size=d)
        sr, sg = rng.uniform(0.3, 2.5, d), rng.uniform(0.3, 2.5, d)
        got = me.fgd_from_moments(me.GaussianMoments(mu_r, np.diag(sr)),
                                  me.GaussianMoments(mu_g, np.diag(sg)))
        closed = float(((mu_r - mu_g) ** 2).sum()
                       + ((np.sqrt(sr) - np.sqrt(sg)) ** 2).sum())
        assert abs(got - closed) < 1e-6


def test_fgd_symmetric():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(200, 4))
    y = rng.normal(size=(250, 4)) + 0.3
    assert abs(me.fgd(x, y) - me.fgd(y, x)) < 1e-8


def test_fgd_rejects_indefinite_covariance():
    bad = me.GaussianMoments(np.zeros(2), np.array([[1.0, 0.0], [0.0, -0.5]]))
    good = me.GaussianMoments(np.zeros(2), np.eye(2))
    with pytest.raises(me.MetricError):
        me.fgd_from_moments(bad, good)


def test_fgd_small_sample_regularized():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 10))        # fewer samples than dim + 1
    y = rng.normal(size=(4, 10))
    value = me.fgd(x, y)
    assert np.isfinite(value) and value >= 0


# --- diversity -----------------------------------------------------------------------

def test_diversity_identical_clips_zero():
    clip = np.random.default_rng(10).normal(size=(16, 3))
    assert me.diversity([clip.copy() for _ in range(5)], 5, seed=0) == 0.0


def test_diversity_symmetric_two_clips():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    assert math.isclose(me.diversity([a, b], 2, seed=0),
                        me.diversity([b, a], 2, seed=0), rel_tol=1e-12)


def test_diversity_matches_bruteforce():
    rng = np.random.default_rng(12)
    clips = [rng.normal(size=(6, 2)) for _ in range(5)]
    got = me.diversity(clips, 5, seed=3)
    flat = [c.ravel() for c in clips]
    brute = np.mean([np.abs(flat[i] - flat[j]).sum()
                     for i in range(5) for j in range(5) if i != j])
    assert math.isclose(got, float(brute), rel_tol=1e-12)


def test_diversity_needs_two():
    with pytest.raises(me.MetricError):
        me.diversity([np.zeros((4, 2))], 5, seed=0)


# --- beat constancy --------------------------------------------------------------------

def test_bc_coincident_beats():
    bc, ok = me.beat_constancy(np.array([3, 9, 15]), np.array([3, 9, 15]),
                               sigma=3.0)
    assert ok and bc == 1.0


def test_bc_single_offset_formula():
    delta = 4.0
    bc, _ = me.beat_constancy(np.array([10.0]), np.array([10.0 + delta]),
                              sigma=3.0)
    assert math.isclose(bc, math.exp(-(delta ** 2) / (2 * 9.0)), rel_tol=1e-12)


def test_bc_time_translation_invariant():
    rng = np.random.default_rng(13)
    g = np.sort(rng.integers(0, 200, 8))
    a = np.sort(rng.integers(0, 200, 6))
    bc1, _ = me.beat_constancy(g, a, sigma=3.0)
    bc2, _ = me.beat_constancy(g + 57, a + 57, sigma=3.0)
    assert math.isclose(bc1, bc2, rel_tol=1e-12)


def test_bc_in_unit_interval():
    rng = np.random.default_rng(14)
    for _ in range(20):
        g = np.sort(rng.integers(0, 100, 5))
        a = np.sort(rng.integers(0, 100, 4))
        bc, ok = me.beat_constancy(g, a, sigma=3.0)
        assert ok and 0.0 < bc <= 1.0


def test_bc_empty_motion_beats_flagged():
    bc, ok = me.beat_constancy(np.array([]), np.array([5]), sigma=3.0)
    assert not ok and bc == 0.0


def test_nbc_identity():
    rng = np.random.default_rng(15)
    t = np.linspace(0, 8 * np.pi, 120)
    upper = np.stack([np.sin(t), np.cos(t)], axis=1)
    beats = me.motion_beat_frames(upper)
    assert beats.size > 0
    audio = beats.copy()
    assert math.isclose(me.nbc(upper, upper, audio, sigma=3.0), 1.0,
                        rel_tol=1e-12)


def test_motion_beats_at_speed_minima():
    t = np.linspace(0, 6 * np.pi, 180)
    upper = np.stack([np.sin(t)], axis=1)
    beats = me.motion_beat_frames(upper, smooth=1)
    # speed minima of |cos| occur near cos zeros: t = pi/2 + k pi
    expect = [(np.pi / 2 + k * np.pi) / (6 * np.pi) * 179 for k in range(6)]
    for b in beats:
        assert min(abs(b - e) for e in expect) <= 3


# --- probes ------------------------------------------------------------------------------

def test_probe_perfectly_separable():
    rng = np.random.default_rng(16)
    speakers = np.repeat(np.arange(4), 25)
    latents = np.eye(4)[speakers] * 5 + rng.normal(scale=0.01, size=(100, 4))
    acc = me.speaker_probe(latents, speakers, split_seed=0)
    assert acc == 1.0


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(17)
    speakers = np.repeat(np.arange(4), 50)
    latents = np.eye(4)[speakers] * 5 + rng.normal(scale=0.01, size=(200, 4))
    shuffled = rng.permutation(speakers)
    acc = me.speaker_probe(latents, shuffled, split_seed=0)
    n_test = 40
    sigma = math.sqrt(0.25 * 0.75 / n_test)
    assert acc <= 0.25 + 3 * sigma


def test_probe_grouped_split_keeps_groups_whole():
    rng = np.random.default_rng(18)
    speakers = np.repeat(np.arange(4), 24)
    groups = np.repeat(np.arange(16), 6)           # 4 groups per speaker
    latents = rng.normal(size=(96, 5))
    acc = me.speaker_probe(latents, speakers, split_seed=1, groups=groups)
    assert 0.0 <= acc <= 1.0


def test_probe_missing_speaker_raises():
    latents = np.random.default_rng(19).normal(size=(10, 3))
    speakers = np.array([0] * 9 + [1])
    with pytest.raises(Exception):
        me.speaker_probe(latents, speakers, split_seed=0,
                         groups=np.arange(10) // 5)


def test_metrics_report_std_only_with_runs():
    report = me.MetricsReport(runs=1)
    report.record("solo", [1.0])
    assert "solo" not in report.stds
    report.record("multi", [1.0, 2.0, 3.0])
    assert "multi" in report.stds


def test_metrics_report_rejects_nonfinite():
    report = me.MetricsReport()
    with pytest.raises(me.MetricError):
        report.record("bad", [float("nan")])


def test_gaussian_moments_psd():
    rng = np.random.default_rng(20)
    m = me.GaussianMoments.fit(rng.normal(size=(50, 4)))
    vals = np.linalg.eigvalsh((m.cov + m.cov.T) / 2)
    assert vals.min() > -1e-12
