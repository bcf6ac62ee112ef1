import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from misalign.errors import DomainError, SubgradientAmbiguity
from misalign.geometry import EulerMisalignment
from misalign.objectives import (
    GRADIENT_FIELDS,
    FocalParams,
    LaplacianTerm,
    LossSample,
    MultiTaskWeights,
    analytic_gradients,
    exact_sample,
    focal_loss,
    laplace_nll_term,
    loss_2d,
    loss_3d,
    loss_miscal,
    random_sample,
    total_loss,
)


def fd_gradient(sample, name, weights=MultiTaskWeights(), focal=FocalParams(), h=1e-6):
    base = getattr(sample, name)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = sample.copy(), sample.copy()
        getattr(plus, name)[idx] += h
        getattr(minus, name)[idx] -= h
        grad[idx] = (total_loss(plus, weights, focal).total - total_loss(minus, weights, focal).total) / (2 * h)
    return grad


def max_rel_error(sample, weights=MultiTaskWeights(), focal=FocalParams()):
    g = analytic_gradients(sample, weights, focal, strict=True)
    worst = 0.0
    for name in GRADIENT_FIELDS:
        a, n = g[name], fd_gradient(sample, name, weights, focal)
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(np.abs(n), 1e-8))))
    return worst


# ------------------------------------------------------------ weights


def test_default_weights_golden():
    w = MultiTaskWeights()
    assert (w.W_o, w.W_c, w.W_s, w.W_o3d, w.W_s3d, w.W_d, w.W_phi, w.W_theta) == (1.0, 2.0, 0.1, 0.25, 1.0, 1.5, 0.1, 0.4)
    f = FocalParams()
    assert (f.alpha, f.gamma) == (0.25, 2.0)


def test_weights_and_focal_validation():
    with pytest.raises(DomainError):
        MultiTaskWeights(W_c=-1.0)
    with pytest.raises(DomainError):
        FocalParams(alpha=0.0)
    with pytest.raises(DomainError):
        FocalParams(gamma=-0.5)


# ------------------------------------------------------------ focal


def test_focal_perfect_prediction_is_zero():
    assert focal_loss(exact_sample()) == 0.0


def test_focal_single_pixel_value():
    s = exact_sample(n_pixels=1)
    s.probs[:] = 0.5
    assert focal_loss(s, FocalParams(0.25, 2.0), W_c=1.0) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-6)
    assert focal_loss(s, FocalParams(0.25, 2.0), W_c=1.0) == pytest.approx(0.043322, abs=1e-6)


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=30))
def test_focal_reduces_to_cross_entropy(probs):
    s = exact_sample(n_pixels=len(probs))
    s.probs[:] = probs
    ce = -np.mean(np.log(probs))
    assert focal_loss(s, FocalParams(1.0, 0.0), W_c=1.0) == pytest.approx(ce, rel=1e-12, abs=1e-12)


def test_focal_domain():
    s = exact_sample(n_pixels=2)
    s.probs[0] = 0.0
    with pytest.raises(DomainError):
        focal_loss(s)


def test_focal_gradient_limits():
    s = exact_sample(n_pixels=1)
    s.probs[:] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = analytic_gradients(s, MultiTaskWeights(W_c=1.0), FocalParams(0.25, 2.0))
        assert g["probs"][0] == 0.0
        s.probs[:] = 0.4
        g0 = analytic_gradients(s, MultiTaskWeights(W_c=1.0), FocalParams(0.25, 0.0))
    assert g0["probs"][0] == pytest.approx(-0.25 / 0.4)


# ------------------------------------------------------------ Laplacian terms


def test_laplace_examples():
    assert laplace_nll_term(LaplacianTerm(3.0, 3.0, 1.0)) == 0.0
    assert laplace_nll_term(LaplacianTerm(0.0, 1.0, 0.5)) == pytest.approx(2 + math.log(0.5))
    assert laplace_nll_term(LaplacianTerm(0.0, 1.0, 0.5)) == pytest.approx(1.306853, abs=1e-6)
    with pytest.raises(DomainError):
        laplace_nll_term(LaplacianTerm(0.0, 1.0, 0.0))


@given(st.floats(0.05, 10.0))
def test_laplace_optimal_diversity_is_residual(r):
    bs = np.linspace(r / 4, 4 * r, 20001)
    vals = [laplace_nll_term(LaplacianTerm(r, 0.0, b)) for b in bs]
    b_star = bs[int(np.argmin(vals))]
    assert b_star == pytest.approx(r, rel=1e-3)
    assert min(vals) == pytest.approx(1 + math.log(r), abs=1e-6)


# ------------------------------------------------------------ 2D / 3D


def one_object():
    return exact_sample(n_pixels=1, n_objects=1)


def test_2d_examples():
    assert loss_2d(exact_sample()) == 0.0
    s = one_object()
    s.offset2d[:] = s.offset2d_target + 1.0
    assert loss_2d(s, MultiTaskWeights(W_o=1.0, W_s=0.1)) == pytest.approx(2.0)


def test_2d_size_weight_linearity():
    s = random_sample(np.random.default_rng(0))
    base = loss_2d(s, MultiTaskWeights(W_o=0.0, W_s=0.1))
    assert loss_2d(s, MultiTaskWeights(W_o=0.0, W_s=0.2)) == pytest.approx(2 * base, rel=1e-12)
    total = loss_2d(s, MultiTaskWeights(W_o=1.0, W_s=0.1))
    doubled = loss_2d(s, MultiTaskWeights(W_o=1.0, W_s=0.2))
    assert doubled - total == pytest.approx(base, rel=1e-12)


def test_3d_examples():
    assert loss_3d(exact_sample()) == 0.0
    s = one_object()
    s.offset3d[:] = s.offset3d_target + 1.0  # 2 offsets * 1 * W_o3d
    s.range[:] = s.range_target + 2.0  # 2 * W_d
    s.orientation[:] = s.orientation_target - 0.5  # 0.5 * W_phi
    w = MultiTaskWeights()
    assert loss_3d(s, w) == pytest.approx(2 * 0.25 + 2 * 1.5 + 0.5 * 0.1)


def test_3d_weight_linearity():
    s = random_sample(np.random.default_rng(1))
    zero = dict(W_o3d=0.0, W_s3d=0.0, W_d=0.0, W_phi=0.0)
    for key in zero:
        one = loss_3d(s, MultiTaskWeights(**{**zero, key: 1.0}))
        three = loss_3d(s, MultiTaskWeights(**{**zero, key: 3.0}))
        assert three == pytest.approx(3 * one, rel=1e-12)
    parts = sum(loss_3d(s, MultiTaskWeights(**{**zero, key: getattr(MultiTaskWeights(), key)})) for key in zero)
    assert loss_3d(s) == pytest.approx(parts, rel=1e-12)


def test_regression_losses_average_over_objects():
    s = one_object()
    s.offset2d[:] = 1.0
    twice = exact_sample(n_pixels=1, n_objects=2)
    twice.offset2d[:] = 1.0
    assert loss_2d(twice) == pytest.approx(loss_2d(s))


# ------------------------------------------------------------ misalignment


def test_miscal_examples():
    z = EulerMisalignment()
    assert loss_miscal(z, z, (1, 1, 1), W_theta=0.7) == 0.0
    pred = EulerMisalignment(0.1, 0.2, 0.3)
    assert loss_miscal(pred, z, (1, 1, 1), W_theta=0.4) == pytest.approx(0.24)


def test_miscal_optimal_diversity_per_axis():
    resid = np.array([0.1, 0.2, 0.3])
    for axis in range(3):
        bs = np.linspace(0.01, 1.0, 9901)
        vals = []
        for b in bs:
            bb = np.ones(3)
            bb[axis] = b
            vals.append(loss_miscal(resid, np.zeros(3), bb))
        assert bs[int(np.argmin(vals))] == pytest.approx(resid[axis], abs=1e-4)


def test_miscal_domain():
    with pytest.raises(DomainError):
        loss_miscal(np.zeros(3), np.zeros(3), (1, 0, 1))


# ------------------------------------------------------------ total


def test_total_breakdown():
    assert total_loss(exact_sample()).total == 0.0
    s = random_sample(np.random.default_rng(2))
    b = total_loss(s)
    assert b.total == pytest.approx(b.class_ + b.two_d + b.three_d + b.miscal, abs=1e-12)
    no_miscal = total_loss(s, MultiTaskWeights(W_theta=0.0))
    assert no_miscal.total == pytest.approx(b.total - b.miscal, abs=1e-12)
    assert set(b.as_dict()) == {"class", "two_d", "three_d", "miscal", "total"}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_bounded_below_by_optimal_diversity(seed):
    s = random_sample(np.random.default_rng(seed))
    r = np.abs(s.offset2d - s.offset2d_target)
    lower = float(np.sum(1 + np.log(r)))
    assert loss_2d(s, MultiTaskWeights(W_o=1.0, W_s=0.0)) * s.n_objects >= lower - 1e-12
    r = np.abs(s.theta - s.theta_target)
    assert loss_miscal(s.theta, s.theta_target, s.theta_b, 1.0) >= float(np.sum(1 + np.log(r))) - 1e-12


def test_sample_validation():
    s = exact_sample()
    kw = {name: getattr(s, name) for name in s.__dataclass_fields__}
    kw["theta_b"] = np.array([1.0, 0.0, 1.0])
    with pytest.raises(DomainError):
        LossSample(**kw)


# ------------------------------------------------------------ gradients


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradients_match_central_differences(seed):
    assert max_rel_error(random_sample(np.random.default_rng(seed))) <= 1e-5


def test_gradients_with_gamma_zero_and_custom_weights():
    s = random_sample(np.random.default_rng(9))
    w = MultiTaskWeights(0.5, 1.0, 0.3, 0.7, 0.2, 0.9, 0.4, 1.1)
    assert max_rel_error(s, w, FocalParams(0.6, 0.0)) <= 1e-5


def test_diversity_gradient_vanishes_at_residual():
    s = random_sample(np.random.default_rng(4))
    s.theta_b[:] = np.abs(s.theta - s.theta_target)
    g = analytic_gradients(s, strict=True)
    assert np.allclose(g["theta_b"], 0.0, atol=1e-12)


def test_zero_residual_is_flagged():
    s = random_sample(np.random.default_rng(5))
    s.range[0] = s.range_target[0]
    with pytest.warns(UserWarning):
        g = analytic_gradients(s)
    assert g.ambiguous and g["range"][0] == 0.0
    with pytest.raises(SubgradientAmbiguity):
        analytic_gradients(s, strict=True)
