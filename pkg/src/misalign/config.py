"""Experiment configuration: JSON file sections mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .estimator import EstimatorConfig
from .fusion import WEIGHT_RULES
from .metrics import DetectionModel
from .perturb import PerturbationConfig
from .scene import DEFAULT_BUCKETS, SceneConfig

ENV_SEED = "MISALIGN_SEED"
ENV_OUT = "MISALIGN_OUT"


@dataclass(frozen=True)
class FusionConfig:
    window_s: float = 5.0
    sigma_max: float = 0.3
    detect_threshold: float = 0.1
    weight_rule: str = "inverse-variance"

    def __post_init__(self):
        if not (self.window_s > 0 and self.sigma_max > 0 and self.detect_threshold > 0):
            raise ConfigError("fusion window, sigma_max and detect_threshold must be positive")
        if self.weight_rule not in WEIGHT_RULES:
            raise ConfigError(f"weight_rule must be one of {WEIGHT_RULES}")


@dataclass(frozen=True)
class MetricsConfig:
    iou_min: float = 0.1
    buckets: tuple[tuple[float, float], ...] = DEFAULT_BUCKETS
    robust_scale: float = 0.75
    score_decay_m: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "buckets", tuple((float(a), float(b)) for a, b in self.buckets))
        if not 0 < self.iou_min <= 1:
            raise ConfigError("iou_min must be in (0, 1]")
        if not 0 <= self.robust_scale <= 1:
            raise ConfigError("robust_scale must be in [0, 1]")
        if not self.score_decay_m > 0:
            raise ConfigError("score_decay_m must be positive")

    def detection_model(self, box_height_offset: float) -> DetectionModel:
        return DetectionModel(self.robust_scale, self.score_decay_m, box_height_offset, self.iou_min)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output: str = "results"
    seed: int = 0
    n_snippets: int = 1000
    frames_per_snippet: int = 10
    snippet_seconds: float = 5.0
    # per-frame pixel noise is scene.pixel_noise_sigma * noise_spread**U(0, 1)
    noise_spread: float = 1.0
    retry_budget: int = 3
    jobs: int = 1

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.n_snippets < 0 or self.frames_per_snippet < 1:
            raise ConfigError("need n_snippets >= 0 and frames_per_snippet >= 1")
        if not self.snippet_seconds > 0:
            raise ConfigError("snippet_seconds must be positive")
        if self.noise_spread < 1:
            raise ConfigError("noise_spread must be >= 1")
        if self.retry_budget < 0 or self.jobs < 1:
            raise ConfigError("retry_budget must be >= 0 and jobs >= 1")
        # one seed drives every substream; the metrics buckets are authoritative
        object.__setattr__(self, "perturbation", replace(self.perturbation, seed=self.seed))
        object.__setattr__(self, "scene", replace(self.scene, seed=self.seed, buckets=self.metrics.buckets))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Top-level overrides plus the shorthand ``noise_px``."""
        kw = {k: v for k, v in kw.items() if v is not None}
        if "noise_px" in kw:
            kw["scene"] = replace(self.scene, pixel_noise_sigma=kw.pop("noise_px"))
        try:
            return replace(self, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


SECTIONS = {
    "scene": SceneConfig,
    "perturbation": PerturbationConfig,
    "estimator": EstimatorConfig,
    "fusion": FusionConfig,
    "metrics": MetricsConfig,
}


def _section(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"section for {cls.__name__} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    kw = dict(data)
    for key in ("buckets", "fixed"):
        if key in kw:
            kw[key] = tuple(tuple(b) if isinstance(b, list) else b for b in kw[key])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    kw = {}
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in data.items():
        if key in SECTIONS:
            kw[key] = _section(SECTIONS[key], value)
        elif key in top:
            kw[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None = None, env: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (defaults when ``path`` is None), then apply env overrides.

    Only the seed (``MISALIGN_SEED``) and output directory (``MISALIGN_OUT``)
    can be overridden from the environment.
    """
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = config_from_dict(data)
    over = {}
    if env.get(ENV_SEED):
        try:
            over["seed"] = int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer") from exc
    if env.get(ENV_OUT):
        over["output"] = env[ENV_OUT]
    return cfg.with_overrides(**over)
