"""Reference implementations of the multi-task detection/misalignment losses.

All logarithms are natural. Class loss averages over pixels; the 2D and 3D
regression losses average over matched objects; the misalignment loss is a
single per-frame term. Laplacian regression terms have the form
``|pred - target| / b + log b``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import DomainError, SubgradientAmbiguity
from .geometry import EulerMisalignment


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise DomainError("alpha must be in (0, 1]")
        if self.gamma < 0:
            raise DomainError("gamma must be >= 0")


@dataclass(frozen=True)
class MultiTaskWeights:
    W_o: float = 1.0
    W_c: float = 2.0
    W_s: float = 0.1
    W_o3d: float = 0.25
    W_s3d: float = 1.0
    W_d: float = 1.5
    W_phi: float = 0.1
    W_theta: float = 0.4

    def __post_init__(self):
        if any(getattr(self, f.name) < 0 for f in fields(self)):
            raise DomainError("weights must be non-negative")


@dataclass(frozen=True)
class LaplacianTerm:
    prediction: float
    target: float
    diversity_b: float


def _arr(x, shape_tail=()):
    # copy so that predictions and targets never alias one caller array
    a = np.array(x, dtype=float)
    return a.reshape((-1,) + shape_tail) if shape_tail else a.reshape(-1)


@dataclass
class LossSample:
    """Predictions, targets and diversities for one frame.

    Per-object arrays have a leading object axis: offsets are (N, 2) as
    (x, y), 2D sizes (N, 2) as (w, h), 3D sizes (N, 3) as (w, l, h). ``theta``
    is (roll, pitch, yaw) in degrees. ``alpha`` defaults to the focal
    parameter when None.
    """

    probs: np.ndarray
    offset2d: np.ndarray
    offset2d_target: np.ndarray
    offset2d_b: np.ndarray
    size2d: np.ndarray
    size2d_target: np.ndarray
    size2d_b: np.ndarray
    offset3d: np.ndarray
    offset3d_target: np.ndarray
    offset3d_b: np.ndarray
    size3d: np.ndarray
    size3d_target: np.ndarray
    size3d_b: np.ndarray
    range: np.ndarray
    range_target: np.ndarray
    orientation: np.ndarray
    orientation_target: np.ndarray
    theta: np.ndarray
    theta_target: np.ndarray
    theta_b: np.ndarray
    alpha: np.ndarray | None = None

    def __post_init__(self):
        self.probs = _arr(self.probs)
        for name in ("offset2d", "size2d", "offset3d"):
            for suffix in ("", "_target", "_b"):
                setattr(self, name + suffix, _arr(getattr(self, name + suffix), (2,)))
        for suffix in ("", "_target", "_b"):
            setattr(self, "size3d" + suffix, _arr(getattr(self, "size3d" + suffix), (3,)))
        for name in ("range", "range_target", "orientation", "orientation_target"):
            setattr(self, name, _arr(getattr(self, name)))
        for name in ("theta", "theta_target", "theta_b"):
            setattr(self, name, _arr(getattr(self, name)).reshape(3))
        if self.alpha is not None:
            self.alpha = np.broadcast_to(_arr(self.alpha), self.probs.shape).astype(float)
        for name in ("offset2d_b", "size2d_b", "offset3d_b", "size3d_b", "theta_b"):
            if np.any(getattr(self, name) <= 0):
                raise DomainError(f"{name} must be > 0")

    @property
    def n_pixels(self) -> int:
        return len(self.probs)

    @property
    def n_objects(self) -> int:
        return len(self.offset2d)

    def copy(self) -> "LossSample":
        kw = {f.name: (None if getattr(self, f.name) is None else np.array(getattr(self, f.name))) for f in fields(self)}
        return LossSample(**kw)


# fields with a gradient, in a stable order
GRADIENT_FIELDS = (
    "probs",
    "offset2d",
    "offset2d_b",
    "size2d",
    "size2d_b",
    "offset3d",
    "offset3d_b",
    "size3d",
    "size3d_b",
    "range",
    "orientation",
    "theta",
    "theta_b",
)


@dataclass(frozen=True)
class LossBreakdown:
    class_: float
    two_d: float
    three_d: float
    miscal: float
    total: float

    def as_dict(self) -> dict:
        return {"class": self.class_, "two_d": self.two_d, "three_d": self.three_d, "miscal": self.miscal, "total": self.total}


def _alphas(sample: LossSample, params: FocalParams) -> np.ndarray:
    return np.full(sample.n_pixels, params.alpha) if sample.alpha is None else sample.alpha


def focal_loss(sample: LossSample, params: FocalParams = FocalParams(), W_c: float = 2.0) -> float:
    p = sample.probs
    if np.any(p <= 0) or np.any(p > 1):
        raise DomainError("probabilities must lie in (0, 1]")
    if sample.n_pixels == 0:
        return 0.0
    a = _alphas(sample, params)
    return float(-(W_c / sample.n_pixels) * np.sum(a * (1.0 - p) ** params.gamma * np.log(p)))


def laplace_nll_term(t: LaplacianTerm) -> float:
    if not t.diversity_b > 0:
        raise DomainError("diversity b must be > 0")
    return abs(t.prediction - t.target) / t.diversity_b + float(np.log(t.diversity_b))


def _laplace_sum(pred, target, b) -> float:
    return float(np.sum(np.abs(pred - target) / b + np.log(b)))


def loss_2d(sample: LossSample, weights: MultiTaskWeights = MultiTaskWeights()) -> float:
    n = sample.n_objects
    if n == 0:
        return 0.0
    s = weights.W_o * _laplace_sum(sample.offset2d, sample.offset2d_target, sample.offset2d_b)
    s += weights.W_s * _laplace_sum(sample.size2d, sample.size2d_target, sample.size2d_b)
    return s / n


def loss_3d(sample: LossSample, weights: MultiTaskWeights = MultiTaskWeights()) -> float:
    n = sample.n_objects
    if n == 0:
        return 0.0
    s = weights.W_o3d * _laplace_sum(sample.offset3d, sample.offset3d_target, sample.offset3d_b)
    s += weights.W_s3d * _laplace_sum(sample.size3d, sample.size3d_target, sample.size3d_b)
    s += weights.W_d * float(np.sum(np.abs(sample.range - sample.range_target)))
    s += weights.W_phi * float(np.sum(np.abs(sample.orientation - sample.orientation_target)))
    return s / n


def _triple(v) -> np.ndarray:
    if isinstance(v, EulerMisalignment):
        return v.as_array()
    return np.asarray(v, dtype=float).reshape(3)


def loss_miscal(pred, target, b, W_theta: float = 0.4) -> float:
    """W_theta * (sum_axes |theta - theta*| / b_axis + log(b_roll b_pitch b_yaw))."""
    pred, target, b = (_triple(v) for v in (pred, target, b))
    if np.any(b <= 0):
        raise DomainError("diversity b must be > 0")
    return W_theta * _laplace_sum(pred, target, b)


def total_loss(sample: LossSample, weights: MultiTaskWeights = MultiTaskWeights(), focal: FocalParams = FocalParams()) -> LossBreakdown:
    c = focal_loss(sample, focal, weights.W_c)
    l2 = loss_2d(sample, weights)
    l3 = loss_3d(sample, weights)
    m = loss_miscal(sample.theta, sample.theta_target, sample.theta_b, weights.W_theta)
    return LossBreakdown(c, l2, l3, m, c + l2 + l3 + m)


@dataclass
class LossGradients:
    """Partial derivatives of the total loss, one array per GRADIENT_FIELDS entry."""

    values: dict = field(default_factory=dict)
    ambiguous: bool = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


def _laplace_grads(pred, target, b, scale):
    r = pred - target
    d_pred = scale * np.sign(r) / b
    d_b = scale * (1.0 / b - np.abs(r) / b**2)
    return d_pred, d_b, bool(np.any(r == 0))


def analytic_gradients(
    sample: LossSample,
    weights: MultiTaskWeights = MultiTaskWeights(),
    focal: FocalParams = FocalParams(),
    strict: bool = False,
) -> LossGradients:
    """Closed-form gradient of ``total_loss`` w.r.t. predictions and diversities.

    The L1 subgradient at an exactly-zero residual is taken as 0 and the
    result is flagged ``ambiguous`` (or SubgradientAmbiguity is raised when
    ``strict``).
    """
    g: dict[str, np.ndarray] = {}
    ambiguous = False

    p = sample.probs
    if np.any(p <= 0) or np.any(p > 1):
        raise DomainError("probabilities must lie in (0, 1]")
    if sample.n_pixels:
        a = _alphas(sample, focal)
        gam = focal.gamma
        one_m = 1.0 - p
        with np.errstate(divide="ignore", invalid="ignore"):
            # gamma (1-p)^(gamma-1) log p -> 0 as p -> 1 for every gamma >= 0
            first = np.where(one_m > 0, gam * one_m ** (gam - 1.0) * np.log(p), 0.0) if gam > 0 else 0.0
        g["probs"] = -(weights.W_c / sample.n_pixels) * a * (one_m**gam / p - first)
    else:
        g["probs"] = np.zeros(0)

    n = sample.n_objects
    scale_obj = 1.0 / n if n else 0.0
    for name, w in (
        ("offset2d", weights.W_o),
        ("size2d", weights.W_s),
        ("offset3d", weights.W_o3d),
        ("size3d", weights.W_s3d),
    ):
        dp, db, amb = _laplace_grads(getattr(sample, name), getattr(sample, name + "_target"), getattr(sample, name + "_b"), w * scale_obj)
        g[name], g[name + "_b"] = dp, db
        ambiguous |= amb and n > 0
    for name, w in (("range", weights.W_d), ("orientation", weights.W_phi)):
        r = getattr(sample, name) - getattr(sample, name + "_target")
        g[name] = w * scale_obj * np.sign(r)
        ambiguous |= bool(np.any(r == 0))

    dp, db, amb = _laplace_grads(sample.theta, sample.theta_target, sample.theta_b, weights.W_theta)
    g["theta"], g["theta_b"] = dp, db
    ambiguous |= amb

    if ambiguous:
        if strict:
            raise SubgradientAmbiguity("an L1 residual is exactly zero")
        warnings.warn("L1 subgradient taken as 0 at an exactly-zero residual", stacklevel=2)
    return LossGradients(g, ambiguous)


def random_sample(rng: np.random.Generator, n_pixels: int = 16, n_objects: int = 3, b_margin: float = 0.2) -> LossSample:
    """Random sample with residuals bounded away from 0 and b away from |residual|.

    Both conditions keep every gradient coordinate away from zero and from
    the L1 kink, which is what a finite-difference check needs.
    """

    def resid(shape):
        return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 2.0, size=shape)

    def diversity(r):
        # b in [0.2 r, (1 - margin) r] or [r / (1 - margin), 5 r]
        low = rng.uniform(0.2, 1.0 - b_margin, size=r.shape)
        high = rng.uniform(1.0 / (1.0 - b_margin), 5.0, size=r.shape)
        return np.abs(r) * np.where(rng.random(r.shape) < 0.5, low, high)

    def triple(shape):
        target = rng.normal(size=shape)
        r = resid(shape)
        return target + r, target, diversity(r)

    o2, o2t, o2b = triple((n_objects, 2))
    s2, s2t, s2b = triple((n_objects, 2))
    o3, o3t, o3b = triple((n_objects, 2))
    s3, s3t, s3b = triple((n_objects, 3))
    th, tht, thb = triple((3,))
    rt = rng.uniform(200, 500, size=n_objects)
    ot = rng.uniform(-np.pi, np.pi, size=n_objects)
    return LossSample(
        probs=rng.uniform(0.05, 0.95, size=n_pixels),
        offset2d=o2, offset2d_target=o2t, offset2d_b=o2b,
        size2d=s2, size2d_target=s2t, size2d_b=s2b,
        offset3d=o3, offset3d_target=o3t, offset3d_b=o3b,
        size3d=s3, size3d_target=s3t, size3d_b=s3b,
        range=rt + resid(n_objects), range_target=rt,
        orientation=ot + resid(n_objects), orientation_target=ot,
        theta=th, theta_target=tht, theta_b=thb,
        alpha=rng.uniform(0.1, 1.0, size=n_pixels),
    )


def exact_sample(n_pixels: int = 4, n_objects: int = 2) -> LossSample:
    """All predictions equal targets, all diversities 1, all probabilities 1."""
    z2 = np.zeros((n_objects, 2))
    z3 = np.zeros((n_objects, 3))
    return LossSample(
        probs=np.ones(n_pixels),
        offset2d=z2, offset2d_target=z2, offset2d_b=np.ones_like(z2),
        size2d=z2 + 1, size2d_target=z2 + 1, size2d_b=np.ones_like(z2),
        offset3d=z2, offset3d_target=z2, offset3d_b=np.ones_like(z2),
        size3d=z3 + 1, size3d_target=z3 + 1, size3d_b=np.ones_like(z3),
        range=np.full(n_objects, 300.0), range_target=np.full(n_objects, 300.0),
        orientation=np.zeros(n_objects), orientation_target=np.zeros(n_objects),
        theta=np.zeros(3), theta_target=np.zeros(3), theta_b=np.ones(3),
    )
