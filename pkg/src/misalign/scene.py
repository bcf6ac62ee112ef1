"""Synthetic scenes standing in for recorded LiDAR/camera data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateScene
from .geometry import (
    CameraIntrinsics,
    EulerMisalignment,
    RigidTransform,
    normalize_points,
    project_points,
    rotation_from_misalignment,
)
from .metrics import BevBox

DEFAULT_BUCKETS = ((200.0, 300.0), (300.0, 400.0), (400.0, 500.0))


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 500
    range_min: float = 20.0
    range_max: float = 500.0
    n_boxes_per_bucket: int = 10
    buckets: tuple[tuple[float, float], ...] = DEFAULT_BUCKETS
    pixel_noise_sigma: float = 2.0
    seed: int = 0
    # vehicle centroid sits this far below the camera (camera y points down)
    box_height_offset: float = 1.5

    def __post_init__(self):
        buckets = tuple((float(a), float(b)) for a, b in self.buckets)
        object.__setattr__(self, "buckets", buckets)
        if self.n_points < 0 or self.n_boxes_per_bucket < 0:
            raise ConfigError("counts must be non-negative")
        if not 0 < self.range_min < self.range_max:
            raise ConfigError("need 0 < range_min < range_max")
        if self.pixel_noise_sigma < 0:
            raise ConfigError("pixel_noise_sigma must be >= 0")
        prev = -math.inf
        for lo, hi in buckets:
            if not lo < hi or lo < prev:
                raise ConfigError("buckets must be non-overlapping and ascending")
            prev = hi


@dataclass(frozen=True)
class SyntheticScene:
    points: np.ndarray  # (N, 3) camera frame
    boxes: tuple[BevBox, ...]
    box_buckets: np.ndarray  # bucket index per box
    box_confidence: np.ndarray  # detector base score per box
    truth_extrinsics: RigidTransform = field(default_factory=RigidTransform.identity)

    def with_points(self, points: np.ndarray) -> "SyntheticScene":
        return SyntheticScene(
            points, self.boxes, self.box_buckets, self.box_confidence, self.truth_extrinsics
        )


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired normalized rays: ``source`` from the image, ``target`` from the LiDAR projection.

    Both arrays are (N, 3) with the third component equal to 1.
    """

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.source, dtype=float))
        t = np.atleast_2d(np.asarray(self.target, dtype=float))
        if s.shape != t.shape or s.shape[1:] != (3,):
            raise ValueError("source and target must both be (N, 3)")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)

    def __len__(self) -> int:
        return len(self.source)

    def __getitem__(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.source[idx], self.target[idx])

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[Sequence[float], Sequence[float]]]) -> "CorrespondenceSet":
        src = np.array([p for p, _ in pairs], dtype=float).reshape(-1, 3)
        tgt = np.array([q for _, q in pairs], dtype=float).reshape(-1, 3)
        return cls(src, tgt)


def default_extrinsics() -> RigidTransform:
    """LiDAR (x fwd, y left, z up) to camera (x right, y down, z fwd), 0.5 m lever arm."""
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return RigidTransform(R, np.array([0.0, -0.3, -0.5]))


def sample_frustum_points(
    n: int, k: CameraIntrinsics, range_min: float, range_max: float, rng: np.random.Generator
) -> np.ndarray:
    """Points uniform by volume in the viewing frustum between two depths."""
    z = np.cbrt(rng.uniform(range_min**3, range_max**3, size=n))
    u = rng.uniform(0.0, k.width, size=n)
    v = rng.uniform(0.0, k.height, size=n)
    rays = normalize_points(np.column_stack([u, v]), k)
    pts = rays * z[:, None]
    # u, v in [0, W) x [0, H); the round trip can land a hair over the edge
    uv, _ = project_points(pts, k)
    return pts[k.contains(uv)]


def _place_boxes(cfg: SceneConfig, k: CameraIntrinsics, rng: np.random.Generator):
    half_fov = math.atan((k.width / 2.0) / k.fx)
    boxes, tags, conf = [], [], []
    for b, (lo, hi) in enumerate(cfg.buckets):
        for _ in range(cfg.n_boxes_per_bucket):
            r = rng.uniform(lo, hi)
            # keep the whole vehicle inside the horizontal field of view
            bearing = rng.uniform(-0.85 * half_fov, 0.85 * half_fov)
            boxes.append(
                BevBox(
                    cx=r * math.sin(bearing),
                    cy=r * math.cos(bearing),
                    length=rng.uniform(4.0, 16.0),
                    width=rng.uniform(2.0, 3.0),
                    yaw=rng.uniform(-math.pi, math.pi),
                )
            )
            tags.append(b)
            conf.append(rng.uniform(0.5, 1.0))
    return tuple(boxes), np.array(tags, dtype=int), np.array(conf)


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, k: CameraIntrinsics | None = None) -> SyntheticScene:
    """Frustum points plus range-bucketed vehicle boxes, all in the camera frame.

    BEV boxes use (cx, cy) = (camera x, camera z): lateral and forward.
    """
    k = k or CameraIntrinsics.reference()
    if cfg.n_points == 0 and cfg.n_boxes_per_bucket == 0:
        raise ConfigError("scene would be empty: no points and no boxes")
    if cfg.n_points == 0:
        raise ConfigError("scene needs at least one point")
    points = sample_frustum_points(cfg.n_points, k, cfg.range_min, cfg.range_max, rng)
    if len(points) == 0:
        raise ConfigError("empty frustum")
    boxes, tags, conf = _place_boxes(cfg, k, rng)
    return SyntheticScene(points, boxes, tags, conf, default_extrinsics())


def make_correspondences(
    scene: SyntheticScene,
    k: CameraIntrinsics,
    dr: EulerMisalignment,
    noise_sigma: float,
    rng: np.random.Generator,
) -> CorrespondenceSet:
    """Image/LiDAR ray pairs under an exact rotational fault plus pixel noise.

    Noise is added to the target pixel before normalization. Pairs whose
    target leaves the image (or goes behind the camera) are dropped; the
    survivors keep their values.
    """
    pts = np.asarray(scene.points, dtype=float)
    uv, z = project_points(pts, k)
    ok = (z > 0) & k.contains(uv)
    pts, uv = pts[ok], uv[ok]

    rotated = pts @ rotation_from_misalignment(dr).T
    uv2, z2 = project_points(rotated, k)
    # draw noise for every pair before masking so survivors are unaffected by drops
    if noise_sigma > 0:
        uv2 = uv2 + rng.normal(0.0, noise_sigma, size=uv2.shape)
    keep = (z2 > 0) & k.contains(uv2)
    if np.count_nonzero(keep) < 3:
        raise DegenerateScene(f"only {np.count_nonzero(keep)} correspondences survived")
    return CorrespondenceSet(normalize_points(uv[keep], k), normalize_points(uv2[keep], k))
