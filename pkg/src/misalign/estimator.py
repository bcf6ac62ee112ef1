"""Closed-form misalignment recovery from ray correspondences.

Per pair the small-angle homography gives three linear equations in
theta = (roll, pitch, yaw) [rad]::

    [  0   z  -y ]           [ x' - x ]
    [ -z   0   x ] theta  =  [ y' - y ]
    [  y  -x   0 ]           [ z' - z ]

i.e. the homogeneous system A [theta, 1]^T = 0 with its last column moved to
the right-hand side. The target ray (x', y', z') arrives with z' = 1 and is
rescaled by |p|^2 / (p . p') so that its difference to the source ray is
orthogonal to the source ray, as theta x p is. Targets produced by the
small-angle matrix are left unchanged (z' keeps its un-renormalized value)
and are recovered exactly; targets from an exact rotation leave only the
second-order term of exp(skew(theta)) as model error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, EmptyInput, RankDeficient, TooFewCorrespondences
from .geometry import (
    EulerMisalignment,
    misalignment_from_rotation,
    rotation_from_misalignment,
    rotation_from_rotvec,
)
from .scene import CorrespondenceSet

log = logging.getLogger(__name__)

RANK_CONDITION_LIMIT = 1e8


@dataclass(frozen=True)
class EstimatorConfig:
    max_gn_iterations: int = 5
    convergence_tol: float = 1e-6  # degrees
    min_correspondences: int = 3
    condition_warn_threshold: float = 1e6
    sigma_floor: float = 1e-9  # degrees; keeps sigma > 0 on noiseless data

    def __post_init__(self):
        if self.max_gn_iterations < 0:
            raise ConfigError("max_gn_iterations must be >= 0")
        if not self.convergence_tol > 0:
            raise ConfigError("convergence_tol must be positive")
        if self.min_correspondences < 3:
            raise ConfigError("min_correspondences must be >= 3")
        if not self.sigma_floor > 0:
            raise ConfigError("sigma_floor must be positive")


@dataclass(frozen=True)
class LinearSystem:
    coefficients: np.ndarray  # (3n, 3)
    rhs: np.ndarray  # (3n,)

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    @property
    def n_pairs(self) -> int:
        return self.n_rows // 3

    def rows(self):
        return list(zip(map(tuple, self.coefficients), self.rhs))


@dataclass(frozen=True)
class MisalignmentEstimate:
    dr: EulerMisalignment
    sigma: np.ndarray  # per-axis degrees, (roll, pitch, yaw)
    timestamp: float = 0.0
    n_used: int = 0
    converged: bool = True
    iterations: int = 0
    condition_number: float = 1.0

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=float).reshape(3)
        sigma.flags.writeable = False
        object.__setattr__(self, "sigma", sigma)

    def at(self, timestamp: float) -> "MisalignmentEstimate":
        return replace(self, timestamp=float(timestamp))


def build_linear_system(cs: CorrespondenceSet) -> LinearSystem:
    if len(cs) == 0:
        raise EmptyInput("no correspondences")
    src = cs.source
    scale = np.einsum("ij,ij->i", src, src) / np.einsum("ij,ij->i", src, cs.target)
    tgt = cs.target * scale[:, None]
    x, y, z = src.T
    coeff = np.zeros((len(src), 3, 3))
    coeff[:, 0, 1], coeff[:, 0, 2] = z, -y
    coeff[:, 1, 0], coeff[:, 1, 2] = -z, x
    coeff[:, 2, 0], coeff[:, 2, 1] = y, -x
    coeff = coeff.reshape(-1, 3)
    rhs = (tgt - src).reshape(-1)
    return LinearSystem(coeff, rhs)


def _lstsq(sys: LinearSystem, cfg: EstimatorConfig):
    """Solution [rad], covariance [rad^2] and condition number of the normal matrix."""
    M, d = sys.coefficients, sys.rhs
    w, V = np.linalg.eigh(M.T @ M)
    cond = math.inf if w[0] <= w[-1] * 1e-300 else float(w[-1] / w[0])
    if not cond <= RANK_CONDITION_LIMIT:
        raise RankDeficient(f"normal matrix condition number {cond:.3g}", cond)
    if cond > cfg.condition_warn_threshold:
        log.warning("ill-conditioned misalignment system (cond %.3g)", cond)
    theta = V @ ((V.T @ (M.T @ d)) / w)
    resid = d - M @ theta
    # residuals are orthogonal to their source ray (both the scaled target
    # difference and theta x p are), so each pair carries 2 dof, not 3
    dof = max(2 * sys.n_pairs - 3, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * (V / w) @ V.T
    return theta, cov, cond


def _sigma_deg(cov: np.ndarray, cfg: EstimatorConfig) -> np.ndarray:
    return np.maximum(np.degrees(np.sqrt(np.clip(np.diag(cov), 0.0, None))), cfg.sigma_floor)


def solve_small_angle(sys: LinearSystem, cfg: EstimatorConfig | None = None, timestamp: float = 0.0) -> MisalignmentEstimate:
    cfg = cfg or EstimatorConfig()
    theta, cov, cond = _lstsq(sys, cfg)
    if sys.n_pairs < cfg.min_correspondences:
        raise TooFewCorrespondences(f"{sys.n_pairs} < {cfg.min_correspondences} correspondences")
    return MisalignmentEstimate(
        dr=EulerMisalignment.from_radians(theta),
        sigma=_sigma_deg(cov, cfg),
        timestamp=timestamp,
        n_used=sys.n_pairs,
        converged=True,
        iterations=0,
        condition_number=cond,
    )


def _derotate(cs: CorrespondenceSet, R: np.ndarray) -> CorrespondenceSet:
    t = cs.target @ R  # row-wise R^T t
    return CorrespondenceSet(cs.source, t / t[:, 2:3])


def refine_gauss_newton(
    cs: CorrespondenceSet, init: MisalignmentEstimate, cfg: EstimatorConfig | None = None
) -> MisalignmentEstimate:
    """Iterate the small-angle solve on targets de-rotated by the current estimate.

    Each increment is composed on the right of the running rotation, so the
    small-angle model only ever has to explain the (shrinking) remainder.
    Returns ``init`` untouched when ``max_gn_iterations`` is 0; an estimate
    that did not reach ``convergence_tol`` comes back with ``converged=False``.
    """
    cfg = cfg or EstimatorConfig()
    if cfg.max_gn_iterations == 0:
        return init
    R = rotation_from_misalignment(init.dr)
    converged = False
    it = 0
    cov = cond = None
    while it < cfg.max_gn_iterations:
        it += 1
        delta, cov, cond = _lstsq(build_linear_system(_derotate(cs, R)), cfg)
        R = R @ rotation_from_rotvec(delta)
        if np.max(np.abs(np.degrees(delta))) < cfg.convergence_tol:
            converged = True
            break
    if not converged:
        # covariance at the final iterate, not the one before the last step
        _, cov, cond = _lstsq(build_linear_system(_derotate(cs, R)), cfg)
    return MisalignmentEstimate(
        dr=misalignment_from_rotation(R),
        sigma=_sigma_deg(cov, cfg),
        timestamp=init.timestamp,
        n_used=len(cs),
        converged=converged,
        iterations=it,
        condition_number=cond,
    )


def estimate_frame(cs: CorrespondenceSet, cfg: EstimatorConfig | None = None, timestamp: float = 0.0) -> MisalignmentEstimate:
    """build -> solve -> refine for one frame's correspondences."""
    cfg = cfg or EstimatorConfig()
    first = solve_small_angle(build_linear_system(cs), cfg, timestamp)
    return refine_gauss_newton(cs, first, cfg)
