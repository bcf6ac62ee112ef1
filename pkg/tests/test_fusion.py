import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from misalign.errors import ConfigError, NothingToFuse
from misalign.estimator import MisalignmentEstimate, estimate_frame
from misalign.fusion import (
    DetectionVerdict,
    EstimateWindow,
    FusionTracker,
    classify_misalignment,
    correct_transform,
    filter_by_uncertainty,
    fuse,
    fuse_unweighted,
    fuse_window,
    residual_misalignment,
)
from misalign.geometry import CameraIntrinsics, EulerMisalignment, RigidTransform
from misalign.perturb import perturb_transform, substream
from misalign.scene import SceneConfig, default_extrinsics, generate_scene, make_correspondences, sample_frustum_points

K = CameraIntrinsics.reference()
GRID = np.round(np.arange(-1.0, 1.0001, 0.1), 12) + 0.0


def est(values, sigma, t=0.0):
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (3,))
    return MisalignmentEstimate(EulerMisalignment.from_array(values), sigma, timestamp=t, n_used=10)


sigmas = st.floats(0.01, 1.0)
values = st.floats(-1.0, 1.0)
estimates = st.builds(
    lambda v, s: est(v, s),
    st.lists(values, min_size=3, max_size=3),
    st.lists(sigmas, min_size=3, max_size=3),
)


# ------------------------------------------------------------ filter


def test_filter_examples():
    assert filter_by_uncertainty([est((0, 0, 0), (0.1, 0.1, 0.35))]) == []
    ok = [est((0, 0, 0), 0.05), est((1, 1, 1), 0.05)]
    assert filter_by_uncertainty(ok) == ok
    assert filter_by_uncertainty(EstimateWindow()) == []
    # boundary: exactly 0.3 is kept
    assert len(filter_by_uncertainty([est((0, 0, 0), 0.3)])) == 1


@given(st.lists(estimates, max_size=12), st.floats(0.05, 0.8))
def test_filter_keeps_exactly_the_low_sigma_estimates(items, sigma_max):
    kept = filter_by_uncertainty(items, sigma_max)
    assert kept == [e for e in items if max(e.sigma) <= sigma_max]


# ------------------------------------------------------------ fuse


def test_single_estimate_unchanged():
    e = est((0.1, -0.2, 0.3), (0.05, 0.06, 0.07))
    f = fuse([e])
    assert f.dr == e.dr and np.array_equal(f.sigma, e.sigma) and f.n_fused == 1


def test_inverse_variance_arithmetic():
    f = fuse([est((0.40, 0, 0), (0.10, 1, 1)), est((0.60, 0, 0), (0.20, 1, 1))])
    assert f.dr.roll == pytest.approx((100 * 0.40 + 25 * 0.60) / 125)
    assert f.dr.roll == pytest.approx(0.44)
    assert f.sigma[0] == pytest.approx(1 / math.sqrt(125))


@given(st.lists(values, min_size=3, max_size=3), sigmas, st.integers(2, 20))
def test_identical_estimates(v, s, n):
    f = fuse([est(v, s)] * n)
    assert np.allclose(f.dr.as_array(), v, atol=1e-12)
    assert np.allclose(f.sigma, s / math.sqrt(n), rtol=1e-12)


@given(st.lists(estimates, min_size=1, max_size=12), st.sampled_from(["inverse-variance", "inverse-sigma"]))
def test_fused_sigma_never_exceeds_smallest_input(items, rule):
    f = fuse(items, rule)
    assert np.all(f.sigma <= np.min([e.sigma for e in items], axis=0))
    assert np.all(f.sigma > 0)


def test_fuse_errors():
    with pytest.raises(NothingToFuse):
        fuse([])
    with pytest.raises(NothingToFuse):
        fuse_unweighted([])
    with pytest.raises(ConfigError):
        fuse([est((0, 0, 0), 0.1)], weight_rule="median")
    with pytest.raises(NothingToFuse):
        fuse_window([est((0, 0, 0), 0.5)])


def test_fuse_window_counts_filtered():
    f = fuse_window([est((0.1, 0, 0), 0.1), est((5, 5, 5), 0.5), est((0.3, 0, 0), 0.1)])
    assert f.n_fused == 2 and f.n_filtered == 1
    assert f.dr.roll == pytest.approx(0.2)


def test_unweighted_is_plain_mean():
    f = fuse_unweighted([est((0.1, 0, 0), 0.01), est((0.5, 0, 0), 0.5)])
    assert f.dr.roll == pytest.approx(0.3)


def test_fused_mean_scatter_below_per_frame_scatter():
    truth = np.array([0.3, -0.2, 0.5])
    rng = np.random.default_rng(0)
    fused, single = [], []
    for _ in range(1000):
        s = rng.uniform(0.02, 0.2, size=(10, 3))
        window = [est(truth + rng.normal(0, si), si) for si in s]
        fused.append(fuse(window).dr.as_array())
        single.append(window[0].dr.as_array())
    assert np.all(np.std(fused, axis=0) < np.std(single, axis=0))


# ------------------------------------------------------------ window


def test_window_eviction():
    w = EstimateWindow(span=5.0)
    for t in np.arange(0, 12, 0.5):
        w.push(est((0, 0, 0), 0.1, t))
        snap = w.snapshot()
        assert snap[-1].timestamp - snap[0].timestamp <= 5.0
        assert all(t - e.timestamp <= 5.0 for e in snap)
    assert len(w) == 11


def test_window_rejects_time_travel():
    w = EstimateWindow()
    w.push(est((0, 0, 0), 0.1, 2.0))
    with pytest.raises(ValueError):
        w.push(est((0, 0, 0), 0.1, 1.0))
    with pytest.raises(ConfigError):
        EstimateWindow(span=0)


def test_snapshot_is_immutable_copy():
    w = EstimateWindow(estimates=[est((0, 0, 0), 0.1, 0.0)])
    snap = w.snapshot()
    w.push(est((0, 0, 0), 0.1, 1.0))
    assert len(snap) == 1 and isinstance(snap, tuple)


def test_tracker_holds_last_value_and_flags_stale():
    tr = FusionTracker(span=1.0)
    assert tr.update(est((0, 0, 0), 0.5, 0.0)) is None
    good = tr.update(est((0.2, 0, 0), 0.1, 0.5))
    assert good.dr.roll == pytest.approx(0.2) and not good.stale
    tr.update(est((9, 9, 9), 0.9, 1.2))
    held = tr.update(est((9, 9, 9), 0.9, 2.0))
    assert held.stale and held.dr == good.dr


# ------------------------------------------------------------ classify


def test_classify_examples():
    assert not classify_misalignment(EulerMisalignment(0.05, 0.02, 0.01)).positive
    assert classify_misalignment(EulerMisalignment(0.0, 0.0, 0.15)).positive
    assert not classify_misalignment(EulerMisalignment(0.1, 0.1, 0.1)).positive
    assert classify_misalignment(EulerMisalignment(0, -0.11, 0)).positive
    assert classify_misalignment(fuse([est((0, 0, 0.2), 0.1)])).positive
    with pytest.raises(ConfigError):
        DetectionVerdict(True, threshold=0.0)


# ------------------------------------------------------------ correction


@given(st.builds(EulerMisalignment, *(st.floats(-5, 5),) * 3))
def test_correction_round_trip(dr):
    t = default_extrinsics()
    back = correct_transform(perturb_transform(t, dr), dr)
    assert np.max(np.abs(back.as_matrix() - t.as_matrix())) <= 1e-12


def test_zero_correction_is_identity():
    t = default_extrinsics()
    c = correct_transform(t, EulerMisalignment())
    assert np.array_equal(c.rotation, t.rotation) and np.array_equal(c.translation, t.translation)


def test_correction_residual_matches_axis_angle_oracle():
    dr, hat = EulerMisalignment(0.3, 0.2, 0.1), EulerMisalignment(0.25, 0.22, 0.08)
    t = RigidTransform.identity()
    c = correct_transform(perturb_transform(t, dr), hat)
    oracle = Rotation.from_rotvec(np.radians(dr.as_array())) * Rotation.from_rotvec(np.radians(hat.as_array())).inv()
    expected = math.degrees(oracle.magnitude())
    assert math.degrees(Rotation.from_matrix(c.rotation).magnitude()) == pytest.approx(expected, rel=1e-9)
    angle, diff = residual_misalignment(dr, hat)
    assert angle == pytest.approx(expected, rel=1e-9)
    assert np.allclose(diff, [-0.05, 0.02, -0.02])


def test_residual_examples():
    assert residual_misalignment(EulerMisalignment(1, 2, 3), EulerMisalignment(1, 2, 3))[0] == pytest.approx(0, abs=1e-12)
    assert residual_misalignment(EulerMisalignment(1, 0, 0), EulerMisalignment())[0] == pytest.approx(1.0)


def _fused_estimate(dr, noise, seed):
    scene = generate_scene(SceneConfig(n_points=10), substream(seed), K)
    frames = []
    for f in range(10):
        rng = substream(seed, f)
        pts = sample_frustum_points(500, K, 20, 500, rng)
        frames.append(estimate_frame(make_correspondences(scene.with_points(pts), K, dr, noise, rng), timestamp=0.5 * f))
    return fuse_window(frames)


def test_noiseless_correction_over_grid():
    for i, triple in enumerate(itertools.product(GRID[::4], repeat=3)):
        dr = EulerMisalignment(*triple)
        angle, _ = residual_misalignment(dr, _fused_estimate(dr, 0.0, i).dr)
        assert angle <= 1e-4


def test_noisy_correction_improves_over_grid():
    for i, triple in enumerate(itertools.product(GRID[::2], repeat=3)):
        dr = EulerMisalignment(*triple)
        injected = math.degrees(np.linalg.norm(dr.radians()))
        if injected < 0.1:
            continue
        t = default_extrinsics()
        corrected = correct_transform(perturb_transform(t, dr), _fused_estimate(dr, 2.0, i))
        residual = math.degrees(Rotation.from_matrix(corrected.rotation @ t.rotation.T).magnitude())
        assert residual < injected
