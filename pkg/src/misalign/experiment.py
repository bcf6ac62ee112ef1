"""End-to-end verification sweep: inject, estimate, fuse, classify, correct, score."""

from __future__ import annotations

import csv
import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property, partial
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_from_dict
from .errors import (
    ConfigError,
    DegenerateScene,
    NothingToFuse,
    NumericalFailure,
    RankDeficient,
    TooFewCorrespondences,
)
from .estimator import MisalignmentEstimate, estimate_frame
from .fusion import (
    DetectionVerdict,
    FusedEstimate,
    FusionTracker,
    classify_misalignment,
    correct_transform,
    filter_by_uncertainty,
    fuse,
    fuse_unweighted,
    fuse_window,
)
from .geometry import AXES, CameraIntrinsics, EulerMisalignment, rotation_angle_deg
from .metrics import (
    VARIANTS,
    DetectionModel,
    MdaCounts,
    bucketed_detection_groups,
    error_sweep,
    max_f1,
    max_f1_grouped,
    mda_accumulate,
    precision_recall,
)
from .perturb import STREAM_FRAME, STREAM_NOISE, STREAM_SCENE, perturb_transform, snippet_fault, substream
from .scene import SyntheticScene, generate_scene, make_correspondences, sample_frustum_points

MODES = ("per_frame", "snippet_unweighted", "snippet_weighted")

_XYZ = [f"_{a}" for a in AXES]

SCHEMAS = {
    "mda.csv": ["mode", "tp", "tn", "fp", "fn", "precision", "recall", "mean_err_roll", "mean_err_pitch", "mean_err_yaw"],
    "error_sweep.csv": [
        "injected_axis",
        "injected_deg",
        "mean_abs_err_roll",
        "std_roll",
        "mean_abs_err_pitch",
        "std_pitch",
        "mean_abs_err_yaw",
        "std_yaw",
        "n",
    ],
    "bev_f1.csv": ["bucket_min_m", "bucket_max_m", "variant", "max_f1"],
    "frames.csv": ["snippet_id", "frame", "timestamp", "noise_px"]
    + ["injected" + s for s in _XYZ]
    + ["est" + s for s in _XYZ]
    + ["sigma" + s for s in _XYZ]
    + ["n_used", "iterations", "converged", "retries"],
    "snippets.csv": ["snippet_id"]
    + ["injected" + s for s in _XYZ]
    + ["fused" + s for s in _XYZ]
    + ["fused_sigma" + s for s in _XYZ]
    + ["n_fused", "n_filtered", "fallback"]
    + ["unweighted" + s for s in _XYZ]
    + ["verdict", "residual_deg"],
}
SUMMARY_KEYS = ["config", "seed", "n_snippets", "files", "mda", "versions"]
TRACE_COLUMNS = (
    ["frame", "timestamp", "noise_px"]
    + ["per_frame" + s for s in _XYZ]
    + ["sigma" + s for s in _XYZ]
    + ["kept"]
    + ["unweighted" + s for s in _XYZ]
    + ["weighted" + s for s in _XYZ]
    + ["weighted_n_fused", "weighted_stale"]
)
REPORT_FILES = tuple(SCHEMAS) + ("summary.json",)

_RETRYABLE = (DegenerateScene, RankDeficient, TooFewCorrespondences)


@dataclass(frozen=True)
class FrameRecord:
    estimate: MisalignmentEstimate
    noise_px: float
    retries: int = 0


@dataclass
class SnippetResult:
    snippet_id: int
    injected: EulerMisalignment
    frames: tuple[FrameRecord, ...]
    fused: FusedEstimate
    fallback: bool
    unweighted: FusedEstimate
    verdict: DetectionVerdict
    residual_deg: float
    scene: SyntheticScene = field(repr=False)
    model: DetectionModel = field(repr=False)
    elapsed_s: float = 0.0

    @cached_property
    def detection_groups(self) -> dict:
        """(variant, bucket index) -> (detections, ground truth); built on first use."""
        return bucketed_detection_groups(self.scene, self.injected, self.fused.dr, self.model)

    @property
    def estimates(self) -> list[MisalignmentEstimate]:
        return [f.estimate for f in self.frames]

    def bucket_f1(self, iou_min: float = 0.1) -> dict:
        """Max-F1 of this snippet alone per (variant, bucket index)."""
        return {key: max_f1(d, g, iou_min) for key, (d, g) in self.detection_groups.items()}


def frame_times(cfg: ExperimentConfig) -> np.ndarray:
    return np.arange(cfg.frames_per_snippet) * (cfg.snippet_seconds / cfg.frames_per_snippet)


def frame_noise(cfg: ExperimentConfig, snippet_id: int, frame: int) -> float:
    base = cfg.scene.pixel_noise_sigma
    if cfg.noise_spread == 1.0:
        return base
    u = substream(cfg.seed, snippet_id, STREAM_NOISE, frame).uniform()
    return float(base * cfg.noise_spread**u)


def estimate_snippet_frames(cfg: ExperimentConfig, snippet_id: int, injected: EulerMisalignment, scene, k=None):
    """Per-frame estimates for one snippet, retrying degenerate frames with fresh draws."""
    k = k or CameraIntrinsics.reference()
    out = []
    for f, t in enumerate(frame_times(cfg)):
        noise = frame_noise(cfg, snippet_id, f)
        for attempt in range(cfg.retry_budget + 1):
            rng = substream(cfg.seed, snippet_id, STREAM_FRAME, f, attempt)
            pts = sample_frustum_points(cfg.scene.n_points, k, cfg.scene.range_min, cfg.scene.range_max, rng)
            try:
                cs = make_correspondences(scene.with_points(pts), k, injected, noise, rng)
                est = estimate_frame(cs, cfg.estimator, float(t))
            except _RETRYABLE as exc:
                last = exc
                continue
            out.append(FrameRecord(est, noise, attempt))
            break
        else:
            raise NumericalFailure(
                f"snippet {snippet_id} frame {f}: {cfg.retry_budget + 1} attempts failed ({last})"
            )
    return out


def summarize_snippet(
    cfg: ExperimentConfig, snippet_id: int, injected: EulerMisalignment, frames: Sequence[FrameRecord], scene
) -> SnippetResult:
    """Fuse, classify, correct and score one snippet's per-frame estimates."""
    estimates = [f.estimate for f in frames]
    fc = cfg.fusion
    fallback = False
    try:
        fused = fuse_window(estimates, fc.sigma_max, fc.weight_rule)
    except NothingToFuse:
        # nothing passed the filter: fall back to weighting everything
        fused = replace(fuse(estimates, fc.weight_rule), n_filtered=len(estimates), stale=True)
        fallback = True
    unweighted = fuse_unweighted(estimates)
    verdict = classify_misalignment(fused, fc.detect_threshold)

    truth = scene.truth_extrinsics
    corrected = correct_transform(perturb_transform(truth, injected), fused)
    residual = rotation_angle_deg(corrected.rotation @ truth.rotation.T)

    model = cfg.metrics.detection_model(cfg.scene.box_height_offset)
    return SnippetResult(snippet_id, injected, tuple(frames), fused, fallback, unweighted, verdict, residual, scene, model)


def snippet_scene(cfg: ExperimentConfig, snippet_id: int, k=None):
    return generate_scene(cfg.scene, substream(cfg.seed, snippet_id, STREAM_SCENE), k)


def run_snippet(cfg: ExperimentConfig, snippet_id: int) -> SnippetResult:
    start = time.perf_counter()
    k = CameraIntrinsics.reference()
    injected = snippet_fault(cfg.perturbation, snippet_id).dr
    scene = snippet_scene(cfg, snippet_id, k)
    frames = estimate_snippet_frames(cfg, snippet_id, injected, scene, k)
    result = summarize_snippet(cfg, snippet_id, injected, frames, scene)
    result.elapsed_s = time.perf_counter() - start
    return result


def run_sweep(cfg: ExperimentConfig, snippet_ids: Iterable[int] | None = None) -> list[SnippetResult]:
    """Simulate every snippet; results come back sorted by snippet id.

    Each snippet draws from its own (seed, snippet id) substreams, so the
    output does not depend on ``cfg.jobs`` or on scheduling order.
    """
    ids = sorted(range(cfg.n_snippets) if snippet_ids is None else snippet_ids)
    work = partial(run_snippet, cfg)
    if cfg.jobs > 1 and len(ids) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(work, ids, chunksize=max(1, len(ids) // (4 * cfg.jobs))))
    else:
        results = [work(i) for i in ids]
    return sorted(results, key=lambda r: r.snippet_id)


# ------------------------------------------------------------------ reports


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v) + 0.0)
    return str(v)


def _write_csv(path: Path, header: list[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def mda_table(results: Sequence[SnippetResult], cfg: ExperimentConfig) -> list[tuple]:
    """One row per evaluation mode: counts, precision, recall, mean |error| per axis."""
    if not results:
        return []
    thr = cfg.fusion.detect_threshold
    rows = []
    for mode in MODES:
        counts = MdaCounts()
        errs = []
        for r in results:
            if mode == "per_frame":
                values = [e.dr for e in r.estimates]
            elif mode == "snippet_unweighted":
                values = [r.unweighted.dr]
            else:
                values = [r.fused.dr]
            for dr in values:
                counts = mda_accumulate(counts, classify_misalignment(dr, thr), r.injected, thr)
                errs.append(np.abs(dr.as_array() - r.injected.as_array()))
        precision, recall = precision_recall(counts)
        mean = np.mean(errs, axis=0)
        rows.append((mode, counts.tp, counts.tn, counts.fp, counts.fn, precision, recall, *mean))
    return rows


def error_sweep_table(results: Sequence[SnippetResult]) -> list[tuple]:
    pairs = [(r.injected, e.dr) for r in results for e in r.estimates]
    rows = []
    for row in error_sweep(pairs):
        cells = [v for pair in zip(row.mean_abs_err, row.std) for v in pair]
        rows.append((row.injected_axis, row.injected_deg, *cells, row.n))
    return rows


def bev_f1_table(results: Sequence[SnippetResult], cfg: ExperimentConfig) -> list[tuple]:
    """Max-F1 pooled over all snippets, per range bucket and variant."""
    if not results:
        return []
    rows = []
    for b, (lo, hi) in enumerate(cfg.metrics.buckets):
        for variant in VARIANTS:
            groups = [r.detection_groups[(variant, b)] for r in results if (variant, b) in r.detection_groups]
            rows.append((lo, hi, variant, max_f1_grouped(groups, cfg.metrics.iou_min)))
    return rows


def frame_rows(results: Sequence[SnippetResult]):
    for r in results:
        inj = r.injected.as_array()
        for f, rec in enumerate(r.frames):
            e = rec.estimate
            yield (
                r.snippet_id, f, e.timestamp, rec.noise_px, *inj, *e.dr.as_array(), *e.sigma,
                e.n_used, e.iterations, e.converged, rec.retries,
            )


def snippet_rows(results: Sequence[SnippetResult]):
    for r in results:
        yield (
            r.snippet_id, *r.injected.as_array(), *r.fused.dr.as_array(), *r.fused.sigma,
            r.fused.n_fused, r.fused.n_filtered, r.fallback, *r.unweighted.dr.as_array(),
            r.verdict.positive, r.residual_deg,
        )


def versions() -> dict:
    return {"misalign": __version__, "numpy": np.__version__, "python": platform.python_version()}


def report(results: Sequence[SnippetResult], cfg: ExperimentConfig, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Write every report file into ``out_dir`` (default ``cfg.output``).

    Timing is deliberately left out so that reruns are byte-identical.
    """
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: r.snippet_id)
    mda = mda_table(results, cfg)
    tables = {
        "mda.csv": mda,
        "error_sweep.csv": error_sweep_table(results),
        "bev_f1.csv": bev_f1_table(results, cfg),
        "frames.csv": frame_rows(results),
        "snippets.csv": snippet_rows(results),
    }
    paths = {}
    for name, rows in tables.items():
        paths[name] = out / name
        _write_csv(paths[name], SCHEMAS[name], rows)
    summary = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "n_snippets": len(results),
        "files": sorted(REPORT_FILES),
        "mda": {row[0]: {"precision": row[5], "recall": row[6]} for row in mda},
        "versions": versions(),
    }
    paths["summary.json"] = out / "summary.json"
    paths["summary.json"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths


# --------------------------------------------------------------- re-scoring


def _read_csv(path: Path, expected: list[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != expected:
            raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def load_results(results_dir: str | Path, cfg: ExperimentConfig) -> list[SnippetResult]:
    """Rebuild snippet results from frames.csv; scenes are regenerated from the seed."""
    rows = _read_csv(Path(results_dir) / "frames.csv", SCHEMAS["frames.csv"])
    by_snippet: dict[int, list[dict]] = {}
    for row in rows:
        by_snippet.setdefault(int(row["snippet_id"]), []).append(row)
    k = CameraIntrinsics.reference()
    results = []
    for sid in sorted(by_snippet):
        frames = []
        for row in sorted(by_snippet[sid], key=lambda r: int(r["frame"])):
            est = MisalignmentEstimate(
                dr=EulerMisalignment(*(float(row["est" + s]) for s in _XYZ)),
                sigma=[float(row["sigma" + s]) for s in _XYZ],
                timestamp=float(row["timestamp"]),
                n_used=int(row["n_used"]),
                converged=bool(int(row["converged"])),
                iterations=int(row["iterations"]),
            )
            frames.append(FrameRecord(est, float(row["noise_px"]), int(row["retries"])))
        first = by_snippet[sid][0]
        injected = EulerMisalignment(*(float(first["injected" + s]) for s in _XYZ))
        results.append(summarize_snippet(cfg, sid, injected, frames, snippet_scene(cfg, sid, k)))
    return results


def load_summary_config(results_dir: str | Path) -> ExperimentConfig:
    path = Path(results_dir) / "summary.json"
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data["config"])


def evaluate(results_dir: str | Path, out_dir: str | Path | None = None, cfg: ExperimentConfig | None = None) -> dict[str, Path]:
    """Re-score an existing sweep, optionally with new fusion/metrics settings.

    The scene and fault settings always come from the sweep's own summary
    so that regenerated scenes match the stored frames.
    """
    base = load_summary_config(results_dir)
    if cfg is not None:
        base = replace(base, fusion=cfg.fusion, metrics=replace(cfg.metrics, buckets=base.metrics.buckets))
    results = load_results(results_dir, base)
    return report(results, base, out_dir if out_dir is not None else results_dir)


# ------------------------------------------------------------------ demo


def fusion_trace(cfg: ExperimentConfig, snippet_id: int = 0) -> list[tuple]:
    """Per-frame rows: estimate, filter decision, running value of each fusion mode."""
    k = CameraIntrinsics.reference()
    injected = snippet_fault(cfg.perturbation, snippet_id).dr
    frames = estimate_snippet_frames(cfg, snippet_id, injected, snippet_scene(cfg, snippet_id, k), k)
    fc = cfg.fusion
    tracker = FusionTracker(fc.window_s, fc.sigma_max, fc.weight_rule)
    rows = []
    for f, rec in enumerate(frames):
        e = rec.estimate
        kept = bool(filter_by_uncertainty([e], fc.sigma_max))
        weighted = tracker.update(e)
        unweighted = fuse_unweighted(tracker.window.snapshot())
        w_cells = (*weighted.dr.as_array(), weighted.n_fused, weighted.stale) if weighted else (None,) * 5
        rows.append(
            (f, e.timestamp, rec.noise_px, *e.dr.as_array(), *e.sigma, kept, *unweighted.dr.as_array(), *w_cells)
        )
    return rows


def demo_fusion(cfg: ExperimentConfig, out_path: str | Path | None = None, snippet_id: int = 0) -> Path:
    path = Path(out_path) if out_path is not None else Path(cfg.output) / "fusion_trace.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(path, TRACE_COLUMNS, fusion_trace(cfg, snippet_id))
    return path
