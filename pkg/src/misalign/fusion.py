"""Temporal fusion of per-frame estimates, detection verdicts and self-correction."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, NothingToFuse
from .estimator import MisalignmentEstimate
from .geometry import (
    EulerMisalignment,
    RigidTransform,
    rotation_angle_deg,
    rotation_from_misalignment,
)

WEIGHT_RULES = ("inverse-variance", "inverse-sigma")


@dataclass(frozen=True)
class FusedEstimate:
    dr: EulerMisalignment
    sigma: np.ndarray
    n_fused: int
    n_filtered: int = 0
    stale: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sigma", np.array(self.sigma, dtype=float).reshape(3))


@dataclass(frozen=True)
class DetectionVerdict:
    positive: bool
    threshold: float = 0.1

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigError("threshold must be positive")


class EstimateWindow:
    """Sliding window over time-ordered estimates.

    Pushing an estimate evicts every estimate more than ``span`` seconds older
    than the newest one. Single writer; ``snapshot()`` hands readers an
    immutable copy.
    """

    def __init__(self, span: float = 5.0, estimates: Iterable[MisalignmentEstimate] = ()):
        if not span > 0:
            raise ConfigError("window span must be positive")
        self.span = float(span)
        self._items: deque[MisalignmentEstimate] = deque()
        for e in estimates:
            self.push(e)

    def push(self, estimate: MisalignmentEstimate) -> None:
        if self._items and estimate.timestamp < self._items[-1].timestamp:
            raise ValueError("estimates must arrive in non-decreasing time order")
        self._items.append(estimate)
        newest = estimate.timestamp
        while newest - self._items[0].timestamp > self.span:
            self._items.popleft()

    def snapshot(self) -> tuple[MisalignmentEstimate, ...]:
        return tuple(self._items)

    @property
    def estimates(self) -> tuple[MisalignmentEstimate, ...]:
        return self.snapshot()

    def __len__(self) -> int:
        return len(self._items)


def filter_by_uncertainty(w, sigma_max: float = 0.3) -> list[MisalignmentEstimate]:
    """Estimates whose every per-axis sigma is <= sigma_max, in order."""
    items = w.snapshot() if isinstance(w, EstimateWindow) else w
    return [e for e in items if np.all(e.sigma <= sigma_max)]


def fuse(estimates: Sequence[MisalignmentEstimate], weight_rule: str = "inverse-variance", n_filtered: int = 0) -> FusedEstimate:
    """Per-axis weighted mean; the default 1/sigma^2 weights are minimum variance."""
    if not estimates:
        raise NothingToFuse("no estimates to fuse")
    if weight_rule not in WEIGHT_RULES:
        raise ConfigError(f"unknown weight rule {weight_rule!r}")
    if len(estimates) == 1:
        e = estimates[0]
        return FusedEstimate(e.dr, e.sigma.copy(), 1, n_filtered)
    values = np.array([e.dr.as_array() for e in estimates])
    sigmas = np.array([e.sigma for e in estimates])
    if weight_rule == "inverse-variance":
        w = 1.0 / sigmas**2
        fused_sigma = np.sqrt(1.0 / w.sum(axis=0))
    else:
        w = 1.0 / sigmas
        fused_sigma = np.sqrt((w**2 * sigmas**2).sum(axis=0)) / w.sum(axis=0)
    # the exact value never exceeds the smallest input; clip rounding
    fused_sigma = np.minimum(fused_sigma, sigmas.min(axis=0))
    mean = (w * values).sum(axis=0) / w.sum(axis=0)
    return FusedEstimate(EulerMisalignment.from_array(mean), fused_sigma, len(estimates), n_filtered)


def fuse_unweighted(estimates: Sequence[MisalignmentEstimate]) -> FusedEstimate:
    """Plain mean with no filtering (the 'without uncertainty' snippet mode)."""
    if not estimates:
        raise NothingToFuse("no estimates to fuse")
    values = np.array([e.dr.as_array() for e in estimates])
    sigmas = np.array([e.sigma for e in estimates])
    n = len(estimates)
    return FusedEstimate(
        EulerMisalignment.from_array(values.mean(axis=0)), np.sqrt((sigmas**2).sum(axis=0)) / n, n
    )


def fuse_window(w, sigma_max: float = 0.3, weight_rule: str = "inverse-variance") -> FusedEstimate:
    """Filter then fuse; raises NothingToFuse when nothing survives."""
    items = w.snapshot() if isinstance(w, EstimateWindow) else list(w)
    kept = filter_by_uncertainty(items, sigma_max)
    return fuse(kept, weight_rule, n_filtered=len(items) - len(kept))


class FusionTracker:
    """Sliding-window fusion that holds the last valid value when a window empties."""

    def __init__(self, span: float = 5.0, sigma_max: float = 0.3, weight_rule: str = "inverse-variance"):
        self.window = EstimateWindow(span)
        self.sigma_max = sigma_max
        self.weight_rule = weight_rule
        self.last: FusedEstimate | None = None

    def update(self, estimate: MisalignmentEstimate) -> FusedEstimate | None:
        """Fused value after ``estimate``; None until a first valid fusion exists."""
        self.window.push(estimate)
        try:
            self.last = fuse_window(self.window, self.sigma_max, self.weight_rule)
        except NothingToFuse:
            if self.last is None:
                return None
            prev = self.last
            self.last = FusedEstimate(prev.dr, prev.sigma, prev.n_fused, len(self.window), stale=True)
        return self.last


def classify_misalignment(f, threshold: float = 0.1) -> DetectionVerdict:
    """Positive iff the largest absolute axis exceeds ``threshold`` (strict)."""
    dr = f.dr if hasattr(f, "dr") else f
    return DetectionVerdict(dr.max_abs() > threshold, threshold)


def correct_transform(t: RigidTransform, f) -> RigidTransform:
    """Undo an estimated camera-frame fault: R(estimate)^-1 applied after ``t``."""
    dr = f.dr if hasattr(f, "dr") else f
    R = rotation_from_misalignment(dr)
    return RigidTransform(R.T, np.zeros(3)).compose(t)


def residual_misalignment(injected: EulerMisalignment, estimate: EulerMisalignment) -> tuple[float, np.ndarray]:
    """Geodesic angle (deg) of R(injected) R(estimate)^-1 and per-axis signed differences."""
    R = rotation_from_misalignment(injected) @ rotation_from_misalignment(estimate).T
    return rotation_angle_deg(R), estimate.as_array() - injected.as_array()
