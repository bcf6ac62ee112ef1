"""Fault injection: seeded misalignment samplers and their application."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .geometry import EulerMisalignment, RigidTransform, rotation_from_misalignment

MODES = ("gaussian", "grid", "exhaustive", "fixed")

# named purposes keep substreams of one (seed, snippet) pair independent
STREAM_FAULT = 0
STREAM_SCENE = 1
STREAM_FRAME = 2
STREAM_NOISE = 3
STREAM_DETECTION = 4


def substream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator keyed on (seed, *key).

    Philox keyed through SeedSequence: the stream for a snippet does not
    depend on which other snippets were drawn or in what order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class PerturbationConfig:
    mode: str = "grid"
    sigma: float = 0.5
    clamp: float = 1.0
    grid_min: float = -1.0
    grid_max: float = 1.0
    grid_step: float = 0.1
    fixed: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown perturbation mode {self.mode!r}")
        if self.mode == "gaussian" and not self.sigma > 0:
            raise ConfigError("sigma must be positive in gaussian mode")
        if not self.clamp > 0:
            raise ConfigError("clamp must be positive")
        if self.mode in ("grid", "exhaustive"):
            if not self.grid_step > 0:
                raise ConfigError("grid_step must be positive")
            if self.grid_max < self.grid_min:
                raise ConfigError("grid_max must be >= grid_min")
            n = (self.grid_max - self.grid_min) / self.grid_step
            if abs(n - round(n)) > 1e-9:
                raise ConfigError("grid range must be an integer multiple of grid_step")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "fixed", tuple(float(v) for v in self.fixed))


@dataclass(frozen=True)
class InjectedFault:
    id: int
    dr: EulerMisalignment


def clamp_misalignment(raw: Sequence[float], clamp: float) -> EulerMisalignment:
    return EulerMisalignment.from_array(np.clip(np.asarray(raw, dtype=float), -clamp, clamp))


def sample_training_perturbation(cfg: PerturbationConfig, rng: np.random.Generator) -> EulerMisalignment:
    """Per-axis N(0, sigma^2) draw clamped to +/- clamp (training augmentation)."""
    if cfg.mode != "gaussian":
        raise ConfigError("training perturbations need gaussian mode")
    return clamp_misalignment(rng.normal(0.0, cfg.sigma, size=3), cfg.clamp)


def grid_values(cfg: PerturbationConfig) -> np.ndarray:
    """Per-axis fault values grid_min, grid_min + step, ..., grid_max.

    Values are rounded to 12 decimals so that e.g. the 0.1 entry compares
    equal to the literal 0.1 used by detection thresholds.
    """
    n = int(round((cfg.grid_max - cfg.grid_min) / cfg.grid_step))
    values = np.round(cfg.grid_min + cfg.grid_step * np.arange(n + 1), 12)
    return values + 0.0  # drop negative zeros


@dataclass
class GridSampler:
    """Assigns one grid triple per snippet, keyed on (seed, snippet id)."""

    cfg: PerturbationConfig
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.cfg.mode != "grid":
            raise ConfigError("GridSampler needs grid mode")
        self.values = grid_values(self.cfg)

    def fault(self, snippet_id: int) -> InjectedFault:
        rng = substream(self.cfg.seed, snippet_id, STREAM_FAULT)
        idx = rng.integers(0, len(self.values), size=3)
        return InjectedFault(snippet_id, EulerMisalignment.from_array(self.values[idx]))

    def faults(self, n: int, start: int = 0) -> list[InjectedFault]:
        return [self.fault(i) for i in range(start, start + n)]


def grid_faults(cfg: PerturbationConfig) -> tuple[np.ndarray, GridSampler]:
    """Per-axis value set and a seeded per-snippet sampler over it."""
    sampler = GridSampler(cfg)
    return sampler.values, sampler


def exhaustive_fault(cfg: PerturbationConfig, snippet_id: int) -> InjectedFault:
    """Grid triple number ``snippet_id`` in (roll, pitch, yaw) lexicographic order, wrapping around."""
    values = grid_values(cfg)
    n = len(values)
    idx = snippet_id % n**3
    return InjectedFault(snippet_id, EulerMisalignment(values[idx // (n * n)], values[idx // n % n], values[idx % n]))


def snippet_fault(cfg: PerturbationConfig, snippet_id: int) -> InjectedFault:
    """Fault for one snippet under any mode; |components| <= clamp is enforced."""
    if cfg.mode == "grid":
        fault = GridSampler(cfg).fault(snippet_id)
    elif cfg.mode == "exhaustive":
        fault = exhaustive_fault(cfg, snippet_id)
    elif cfg.mode == "gaussian":
        rng = substream(cfg.seed, snippet_id, STREAM_FAULT)
        fault = InjectedFault(snippet_id, sample_training_perturbation(cfg, rng))
    else:
        fault = InjectedFault(snippet_id, EulerMisalignment.from_array(cfg.fixed))
    if fault.dr.max_abs() > cfg.clamp + 1e-12:
        raise ConfigError(f"fault {fault.dr} exceeds clamp {cfg.clamp}")
    return fault


def perturb_points(points_cam: np.ndarray, dr: EulerMisalignment) -> np.ndarray:
    """Rotate camera-frame points by the exact fault rotation."""
    return np.asarray(points_cam, dtype=float) @ rotation_from_misalignment(dr).T


def perturb_transform(t: RigidTransform, dr: EulerMisalignment) -> RigidTransform:
    """Extrinsics whose output is the original camera-frame output rotated by the fault.

    In column-vector form this is [R(dr) | 0] applied after ``t``; written
    with row vectors it is the right-multiplication T . [R | 0].
    """
    fault = RigidTransform(rotation_from_misalignment(dr), np.zeros(3))
    return fault.compose(t)


def within_envelope(dr: EulerMisalignment, limit: float = 5.0) -> bool:
    return dr.max_abs() <= limit and all(math.isfinite(v) for v in dr)
