import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from misalign.errors import ConfigError
from misalign.geometry import (
    CameraIntrinsics,
    EulerMisalignment,
    RigidTransform,
    render_depth_image,
    rotation_from_misalignment,
)
from misalign.perturb import (
    GridSampler,
    PerturbationConfig,
    clamp_misalignment,
    grid_faults,
    grid_values,
    perturb_points,
    perturb_transform,
    sample_training_perturbation,
    snippet_fault,
    substream,
    within_envelope,
)
from misalign.scene import default_extrinsics

angle = st.floats(-5.0, 5.0, allow_nan=False)
misalignments = st.builds(EulerMisalignment, angle, angle, angle)


def test_clamp_example():
    assert clamp_misalignment((1.7, 0.2, -1.3), 1.0) == EulerMisalignment(1.0, 0.2, -1.0)


def test_vanishing_sigma_gives_zero():
    cfg = PerturbationConfig(mode="gaussian", sigma=1e-12)
    assert sample_training_perturbation(cfg, substream(1)).max_abs() < 1e-10


def test_clamped_gaussian_std_and_clamp():
    cfg = PerturbationConfig(mode="gaussian", sigma=0.5, clamp=1.0)
    rng = substream(3)
    draws = np.array([sample_training_perturbation(cfg, rng).as_array() for _ in range(100_000)])
    assert np.max(np.abs(draws)) <= cfg.clamp
    std = draws.std(axis=0)
    assert np.all((std >= 0.46) & (std <= 0.50))
    # analytic std of N(0, 0.25) clamped at +/-1 is about 0.4827
    assert np.allclose(std, 0.4827, atol=0.005)


def test_training_sampler_needs_gaussian_mode():
    with pytest.raises(ConfigError):
        sample_training_perturbation(PerturbationConfig(mode="grid"), substream(0))


def test_default_grid_has_21_values():
    values, sampler = grid_faults(PerturbationConfig())
    assert len(values) == 21 == len(set(values.tolist()))
    assert values[0] == -1.0 and values[-1] == 1.0
    assert 0.1 in values.tolist() and 0.0 in values.tolist()
    assert not np.any(np.signbit(values[values == 0]))
    assert isinstance(sampler, GridSampler)


def test_degenerate_grid():
    cfg = PerturbationConfig(grid_min=0.0, grid_max=0.0)
    assert grid_values(cfg).tolist() == [0.0]
    assert GridSampler(cfg).fault(3).dr == EulerMisalignment(0, 0, 0)


def test_grid_sampler_deterministic():
    cfg = PerturbationConfig(seed=7)
    a = [f.dr for f in GridSampler(cfg).faults(1000)]
    b = [f.dr for f in GridSampler(cfg).faults(1000)]
    assert a == b
    assert a != [f.dr for f in GridSampler(PerturbationConfig(seed=8)).faults(1000)]


def test_grid_sampler_order_independent():
    sampler = GridSampler(PerturbationConfig(seed=7))
    forward = [sampler.fault(i).dr for i in range(50)]
    backward = [sampler.fault(i).dr for i in reversed(range(50))][::-1]
    assert forward == backward


def test_grid_sampler_roughly_uniform():
    sampler = GridSampler(PerturbationConfig(seed=1))
    vals = np.array([f.dr.as_array() for f in sampler.faults(21_000)])
    counts = np.array([np.sum(np.isclose(vals, v)) for v in grid_values(PerturbationConfig())])
    assert counts.min() > 2500 and counts.max() < 3500


@pytest.mark.parametrize(
    "kw",
    [
        dict(mode="bogus"),
        dict(mode="gaussian", sigma=0.0),
        dict(clamp=0.0),
        dict(grid_step=0.0),
        dict(grid_step=0.3),
        dict(grid_min=1.0, grid_max=-1.0),
        dict(seed=-1),
        dict(seed=2**64),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        PerturbationConfig(**kw)


def test_snippet_fault_modes():
    fixed = PerturbationConfig(mode="fixed", fixed=(0.5, -0.2, 0.1))
    assert snippet_fault(fixed, 9).dr == EulerMisalignment(0.5, -0.2, 0.1)
    g = PerturbationConfig(mode="gaussian", seed=4)
    assert snippet_fault(g, 2).dr == snippet_fault(g, 2).dr
    assert snippet_fault(g, 2).dr.max_abs() <= g.clamp
    with pytest.raises(ConfigError):
        snippet_fault(PerturbationConfig(mode="fixed", fixed=(2.0, 0, 0)), 0)


def test_perturb_points_examples():
    pts = np.array([[1.0, 0.0, 0.0], [3.0, -2.0, 40.0]])
    assert np.array_equal(perturb_points(pts, EulerMisalignment()), pts)
    quarter = perturb_points(pts[:1], EulerMisalignment(0, 0, 90))
    assert np.allclose(quarter, [[0.0, 1.0, 0.0]], atol=1e-15)


@given(misalignments)
def test_perturb_points_inverse_and_isometry(dr):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-100, 100, size=(20, 3))
    moved = perturb_points(pts, dr)
    assert np.allclose(perturb_points(moved, -dr), pts, atol=1e-12)
    assert np.max(np.abs(np.linalg.norm(moved, axis=1) - np.linalg.norm(pts, axis=1))) <= 1e-9


@given(misalignments)
def test_perturb_transform_rotates_camera_output(dr):
    t = default_extrinsics()
    pts = np.random.default_rng(2).uniform(-50, 50, size=(10, 3))
    expected = t.apply(pts) @ rotation_from_misalignment(dr).T
    assert np.allclose(perturb_transform(t, dr).apply(pts), expected, atol=1e-12)


def test_perturb_transform_zero_is_identity():
    t = default_extrinsics()
    p = perturb_transform(t, EulerMisalignment())
    assert np.array_equal(p.rotation, t.rotation) and np.array_equal(p.translation, t.translation)


def test_two_injection_paths_render_identically():
    k = CameraIntrinsics.reference()
    t = default_extrinsics()
    dr = EulerMisalignment(0.4, -0.7, 0.9)
    rng = np.random.default_rng(3)
    # LiDAR frame: x forward, y left, z up
    lidar = np.column_stack([rng.uniform(20, 400, 3000), rng.uniform(-40, 40, 3000), rng.uniform(-3, 3, 3000)])
    a = render_depth_image(lidar, perturb_transform(t, dr), k)
    cam = perturb_points(t.apply(lidar), dr)
    b = render_depth_image(cam, RigidTransform.identity(), k)
    assert a.nonzero_count() > 100
    assert np.array_equal(a.values != 0, b.values != 0)
    assert np.allclose(a.values, b.values, rtol=1e-12)


def test_envelope():
    assert within_envelope(EulerMisalignment(5.0, -5.0, 0))
    assert not within_envelope(EulerMisalignment(5.01, 0, 0))


def test_substreams_are_independent_of_order():
    a = substream(5, 1, 2).random(3)
    substream(5, 9, 9).random(100)
    assert np.array_equal(a, substream(5, 1, 2).random(3))
    assert not np.array_equal(a, substream(5, 2, 1).random(3))


def test_exhaustive_mode_enumerates_every_triple():
    cfg = PerturbationConfig(mode="exhaustive")
    faults = [snippet_fault(cfg, i).dr for i in range(21**3)]
    assert len(set(faults)) == 21**3
    assert faults[0] == EulerMisalignment(-1.0, -1.0, -1.0)
    assert faults[1] == EulerMisalignment(-1.0, -1.0, -0.9)
    assert faults[-1] == EulerMisalignment(1.0, 1.0, 1.0)
    assert snippet_fault(cfg, 21**3).dr == faults[0]
