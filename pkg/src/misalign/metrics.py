"""Verification metrics: detection accuracy, estimation error, BEV max-F1."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import (
    AXES,
    EulerMisalignment,
    rotation_from_misalignment,
    rotation_from_rotvec,
    rotvec_from_rotation,
)

COLLINEAR_TOL = 1e-9


@dataclass
class MdaCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def is_misaligned(dr: EulerMisalignment, threshold: float = 0.1) -> bool:
    """Max-axis rule, strict inequality."""
    return dr.max_abs() > threshold


def mda_accumulate(counts: MdaCounts, verdict, injected: EulerMisalignment, threshold: float = 0.1) -> MdaCounts:
    """Return ``counts`` with the cell for (predicted, injected) incremented."""
    predicted = verdict.positive
    actual = is_misaligned(injected, threshold)
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    if predicted and actual:
        tp += 1
    elif predicted:
        fp += 1
    elif actual:
        fn += 1
    else:
        tn += 1
    return MdaCounts(tp, tn, fp, fn)


def precision_recall(counts: MdaCounts) -> tuple[float | None, float | None]:
    """(precision, recall); an entry is None when its denominator is zero."""
    p_den = counts.tp + counts.fp
    r_den = counts.tp + counts.fn
    precision = counts.tp / p_den if p_den else None
    recall = counts.tp / r_den if r_den else None
    return precision, recall


@dataclass(frozen=True)
class ErrorSweepRow:
    injected_axis: str
    injected_deg: float
    mean_abs_err: tuple[float, float, float]
    std: tuple[float, float, float]
    n: int


def error_sweep(results: Iterable[tuple[EulerMisalignment, EulerMisalignment]]) -> list[ErrorSweepRow]:
    """Group (injected, estimate) pairs by the injected value on each axis.

    For every axis and every distinct injected value on it, report the mean
    absolute error and population std of the error magnitude on all three
    axes. Rows are ordered by axis then injected value.
    """
    groups: dict[tuple[int, float], list[np.ndarray]] = defaultdict(list)
    for injected, estimate in results:
        inj = injected.as_array()
        err = np.abs(estimate.as_array() - inj)
        for a in range(3):
            groups[(a, round(float(inj[a]), 9))].append(err)
    rows = []
    for (a, value) in sorted(groups):
        errs = np.array(groups[(a, value)])
        rows.append(
            ErrorSweepRow(
                AXES[a],
                value + 0.0,
                tuple(float(v) for v in errs.mean(axis=0)),
                tuple(float(v) for v in errs.std(axis=0)),
                len(errs),
            )
        )
    return rows


# ---------------------------------------------------------------- BEV boxes


@dataclass(frozen=True)
class BevBox:
    """Ground-plane rectangle; (cx, cy) are lateral / forward meters."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box extents must be positive")

    def corners(self) -> np.ndarray:
        """Counter-clockwise corners, (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    @property
    def area(self) -> float:
        return self.length * self.width

    @property
    def radius(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)


@dataclass(frozen=True)
class Detection:
    box: BevBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be in [0, 1]")


def _clip(subject: list, clip: np.ndarray) -> list:
    """Sutherland-Hodgman clipping of a polygon by a convex CCW polygon."""
    out = subject
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        norm = math.hypot(ex, ey)

        def side(p):
            return (ex * (p[1] - ay) - ey * (p[0] - ax)) / norm

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= -COLLINEAR_TOL:
                if sp < -COLLINEAR_TOL:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= -COLLINEAR_TOL:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _polygon_area(poly: list) -> float:
    if len(poly) < 3:
        return 0.0
    a = 0.0
    for i in range(len(poly)):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % len(poly)]
        a += x1 * y2 - x2 * y1
    return abs(a) / 2.0


def bev_iou(a: BevBox, b: BevBox) -> float:
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > a.radius + b.radius:
        return 0.0
    inter = _polygon_area(_clip([tuple(p) for p in a.corners()], b.corners()))
    union = a.area + b.area - inter
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------- max-F1


def _sort_key(d: Detection):
    b = d.box
    return (-d.score, b.cx, b.cy, b.length, b.width, b.yaw)


def _greedy_match_flags(dets: Sequence[Detection], gts: Sequence[BevBox], iou_min: float) -> list[tuple[float, bool]]:
    """(score, matched) per detection in descending score order.

    Greedy matching never revisits earlier decisions, so the matches among
    detections above any threshold are a prefix of this sequence.
    """
    matched_gt = [False] * len(gts)
    flags = []
    for d in sorted(dets, key=_sort_key):
        best, best_iou = -1, iou_min
        for j, g in enumerate(gts):
            if matched_gt[j]:
                continue
            iou = bev_iou(d.box, g)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            matched_gt[best] = True
        flags.append((d.score, best >= 0))
    return flags


def max_f1_grouped(groups: Iterable[tuple[Sequence[Detection], Sequence[BevBox]]], iou_min: float = 0.1) -> float:
    """Max-F1 over a pooled threshold sweep; matching happens within each group.

    Used to pool many frames/snippets into one dataset-level number.
    Conventions: no ground truth and no detections -> 1.0; detections
    without ground truth -> 0.0.
    """
    flags: list[tuple[float, bool]] = []
    n_gt = 0
    for dets, gts in groups:
        n_gt += len(gts)
        flags.extend(_greedy_match_flags(dets, gts, iou_min))
    if n_gt == 0:
        return 1.0 if not flags else 0.0
    if not flags:
        return 0.0
    scores = np.array([s for s, _ in flags])
    hits = np.array([m for _, m in flags], dtype=float)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    kept = np.arange(1, len(hits) + 1)
    # a threshold equal to a score keeps every detection with that score
    last_of_tie = np.r_[scores[1:] != scores[:-1], True]
    tp, kept = tp[last_of_tie], kept[last_of_tie]
    precision = tp / kept
    recall = tp / n_gt
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tp > 0, 2 * precision * recall / (precision + recall), 0.0)
    return float(f1.max())


def max_f1(dets: Sequence[Detection], gts: Sequence[BevBox], iou_min: float = 0.1) -> float:
    return max_f1_grouped([(dets, gts)], iou_min)


# ---------------------------------------------------- detection surrogate

VARIANTS = ("baseline", "uncorrected", "corrected")


@dataclass(frozen=True)
class DetectionModel:
    """Geometric stand-in for a detector under extrinsic misalignment.

    A detection is the ground-truth box carried through the residual
    rotation (camera frame) and read back in BEV. ``robust_scale`` shrinks
    the residual rotation for the misalignment-trained model when no
    correction is applied; ``score_decay_m`` sets how fast confidence drops
    with displacement.
    """

    robust_scale: float = 0.75
    score_decay_m: float = 5.0
    box_height_offset: float = 1.5
    iou_min: float = 0.1


def displaced_box(box: BevBox, R: np.ndarray, height_offset: float = 1.5) -> BevBox:
    """Box centroid and heading carried through rotation ``R`` (camera frame)."""
    c = R @ np.array([box.cx, height_offset, box.cy])
    heading = R @ np.array([math.cos(box.yaw), 0.0, math.sin(box.yaw)])
    return BevBox(float(c[0]), float(c[2]), box.length, box.width, math.atan2(heading[2], heading[0]))


def scaled_rotation(residual: np.ndarray, scale: float) -> np.ndarray:
    return rotation_from_rotvec(scale * rotvec_from_rotation(residual))


def simulate_detections(
    boxes: Sequence[BevBox], confidence: Sequence[float], R_residual: np.ndarray, model: DetectionModel
) -> list[Detection]:
    if not len(boxes):
        return []
    # displaced_box, vectorized over the group
    cx = np.array([b.cx for b in boxes])
    cy = np.array([b.cy for b in boxes])
    yaw = np.array([b.yaw for b in boxes])
    centers = np.column_stack([cx, np.full_like(cx, model.box_height_offset), cy]) @ R_residual.T
    headings = np.column_stack([np.cos(yaw), np.zeros_like(yaw), np.sin(yaw)]) @ R_residual.T
    new_yaw = np.arctan2(headings[:, 2], headings[:, 0])
    shift = np.hypot(centers[:, 0] - cx, centers[:, 2] - cy)
    scores = np.asarray(confidence, dtype=float) * np.exp(-shift / model.score_decay_m)
    return [
        Detection(BevBox(float(c[0]), float(c[2]), b.length, b.width, float(y)), float(s))
        for b, c, y, s in zip(boxes, centers, new_yaw, scores)
    ]


def residual_rotations(injected: EulerMisalignment, estimate: EulerMisalignment | None, model: DetectionModel) -> dict:
    """Residual camera-frame rotation seen by each evaluated variant."""
    R_inj = rotation_from_misalignment(injected)
    out = {
        "baseline": R_inj,
        "uncorrected": scaled_rotation(R_inj, model.robust_scale),
    }
    if estimate is not None:
        out["corrected"] = R_inj @ rotation_from_misalignment(estimate).T
    return out


def bucketed_detection_groups(scene, injected: EulerMisalignment, estimate: EulerMisalignment | None, model: DetectionModel | None = None):
    """Per (variant, bucket) list of (detections, ground truth) for pooling."""
    model = model or DetectionModel()
    rotations = residual_rotations(injected, estimate, model)
    n_buckets = int(scene.box_buckets.max()) + 1 if len(scene.boxes) else 0
    groups = {}
    for variant, R in rotations.items():
        for b in range(n_buckets):
            idx = np.flatnonzero(scene.box_buckets == b)
            gts = [scene.boxes[i] for i in idx]
            dets = simulate_detections(gts, scene.box_confidence[idx], R, model)
            groups[(variant, b)] = (dets, gts)
    return groups


def bucketed_detection_eval(scene, injected: EulerMisalignment, estimate: EulerMisalignment | None = None, model: DetectionModel | None = None) -> dict:
    """Max-F1 per (variant, bucket index) for one scene.

    ``estimate`` is the fused misalignment used for correction; without it
    only the baseline and uncorrected variants are produced.
    """
    model = model or DetectionModel()
    groups = bucketed_detection_groups(scene, injected, estimate, model)
    return {key: max_f1(dets, gts, model.iou_min) for key, (dets, gts) in groups.items()}
