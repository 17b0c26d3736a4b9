"""Detection evaluation: greedy matching, precision-recall curves, and
average precision under 3D or bird's-eye-view IoU.

Defaults follow the KITTI protocol: per-class IoU thresholds 0.7 (Car) and
0.5 (Cyclist, Pedestrian); the indoor-protocol mode applies 0.25 to every
class. AP integrates the precision envelope continuously by default, with an
11-point interpolated mode for protocol parity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom3d
from .errors import DegenerateBox, ValidationError
from .geom3d import Box3D

KITTI_THRESHOLDS = {"Car": 0.7, "Cyclist": 0.5, "Pedestrian": 0.5}
SUNRGBD_THRESHOLD = 0.25
DEFAULT_THRESHOLD = 0.5

# Official KITTI difficulty rules: (min 2D box height px, max occlusion,
# max truncation). Kept in config, not code, since deployments may retune.
DIFFICULTY_RULES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: dict(KITTI_THRESHOLDS))
    default_threshold: float = DEFAULT_THRESHOLD
    metric: str = "3d"                  # "3d" | "bev"
    difficulty: str | None = None       # None = all
    interpolation: str = "continuous"   # "continuous" | "11point"
    mode: str = "kitti"                 # "kitti" | "sunrgbd"
    difficulty_rules: dict = field(default_factory=lambda: dict(DIFFICULTY_RULES))

    def __post_init__(self):
        if self.metric not in ("3d", "bev"):
            raise ValidationError(f"unknown metric {self.metric!r}")
        if self.interpolation not in ("continuous", "11point"):
            raise ValidationError(
                f"unknown interpolation {self.interpolation!r}")
        if self.mode not in ("kitti", "sunrgbd"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        for t in list(self.iou_thresholds.values()) + [self.default_threshold]:
            if not 0.0 < t <= 1.0:
                raise ValidationError(f"IoU threshold {t} outside (0, 1]")

    def threshold_for(self, class_name: str) -> float:
        if self.mode == "sunrgbd":
            return SUNRGBD_THRESHOLD
        return self.iou_thresholds.get(class_name, self.default_threshold)

    def iou_fn(self):
        return geom3d.iou3d if self.metric == "3d" else geom3d.iou_bev


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float


@dataclass
class EvalRecord:
    """One scored prediction with its match outcome."""
    score: float
    is_tp: bool
    frame: str = ""
    index: int = 0


def match_detections(preds, gts, iou_fn, threshold: float):
    """Greedy matching of score-ordered predictions against ground truth.

    ``preds`` is a list of (score, Box3D) already restricted to one class
    and one frame; ``gts`` a list of Box3D. Each prediction, in descending
    score order, claims the highest-IoU unmatched ground truth with
    IoU >= threshold; each ground truth is matched at most once. A
    prediction whose corners do not form a valid box (a model can emit
    anything) matches nothing and counts as a false positive.

    Returns (records, n_unmatched_gt) where records follow the score order.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
    matched = [False] * len(gts)
    records = []
    for i in order:
        score, box = preds[i]
        try:
            geom3d.param_from_corners(box)
        except DegenerateBox:
            records.append(EvalRecord(score, False, index=i))
            continue
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            iou = iou_fn(box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            matched[best_j] = True
            records.append(EvalRecord(score, True, index=i))
        else:
            records.append(EvalRecord(score, False, index=i))
    return records, matched.count(False)


def pr_curve(records, total_gt: int, interpolation: str = "continuous") -> PRCurve:
    """Cumulative TP/FP sweep over score-ordered match records.

    AP is the area under the precision envelope (precision at each recall
    taken as the maximum precision at any recall >= it); the 11-point mode
    averages the envelope at recalls 0, 0.1, ..., 1.
    """
    records = sorted(records, key=lambda r: (-r.score, r.frame, r.index))
    if total_gt <= 0 or not records:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0)
    tp = np.cumsum([1.0 if r.is_tp else 0.0 for r in records])
    fp = np.cumsum([0.0 if r.is_tp else 1.0 for r in records])
    recall = tp / total_gt
    precision = tp / (tp + fp)
    # Precision envelope: monotone nonincreasing in recall.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "11point":
        pts = []
        for r in np.linspace(0.0, 1.0, 11):
            idx = int(np.searchsorted(recall, r - 1e-12))
            pts.append(float(env[idx]) if idx < len(env) else 0.0)
        ap = float(np.mean(pts))
    else:
        # Continuous area under the envelope over recall.
        prev_r = 0.0
        ap = 0.0
        for r, p in zip(recall, env):
            ap += (r - prev_r) * p
            prev_r = r
        ap = float(ap)
    return PRCurve(recall, precision, ap)


def evaluate(predictions, gt_frames, config: EvalConfig):
    """Per-class AP table.

    ``predictions`` is a list of ``kitti_io.Prediction``; ``gt_frames`` maps
    frame id -> list of ground-truth Box3D (camera frame) or Label3D.
    Returns {class_name: PRCurve}.
    """
    by_class_frame_preds = {}
    classes = set()
    for p in predictions:
        key = (p.detection.class_name, p.frame)
        by_class_frame_preds.setdefault(key, []).append((p.score, p.box))
        classes.add(p.detection.class_name)

    by_class_frame_gts = {}
    gt_counts = {}
    for frame, gts in gt_frames.items():
        for gt in gts:
            box = gt.to_box3d() if hasattr(gt, "to_box3d") else gt
            if config.difficulty is not None and hasattr(gt, "truncation"):
                if not difficulty_match(gt, config):
                    continue
            cls = box.class_id
            classes.add(cls)
            by_class_frame_gts.setdefault((cls, frame), []).append(box)
            gt_counts[cls] = gt_counts.get(cls, 0) + 1

    iou_fn = config.iou_fn()
    results = {}
    for cls in sorted(classes):
        records = []
        threshold = config.threshold_for(cls)
        frames = ({f for c, f in by_class_frame_preds if c == cls}
                  | {f for c, f in by_class_frame_gts if c == cls})
        for frame in sorted(frames):
            preds = by_class_frame_preds.get((cls, frame), [])
            gts = by_class_frame_gts.get((cls, frame), [])
            recs, _ = match_detections(preds, gts, iou_fn, threshold)
            for r in recs:
                r.frame = frame
            records.extend(recs)
        results[cls] = pr_curve(records, gt_counts.get(cls, 0),
                                config.interpolation)
    return results


def difficulty_match(label, config: EvalConfig) -> bool:
    """Whether a label falls inside the configured difficulty bucket."""
    min_h, max_occ, max_trunc = config.difficulty_rules[config.difficulty]
    height = label.bbox[3] - label.bbox[1]
    return (height >= min_h and label.occlusion <= max_occ
            and label.truncation <= max_trunc)


def format_table(results: dict, config: EvalConfig) -> str:
    """Aligned text table plus machine-readable CSV rows."""
    lines = [f"{'class':<16} {'difficulty':<10} {'metric':<6} {'AP':>8}"]
    rows = []
    diff = config.difficulty or "all"
    for cls in sorted(results):
        ap = results[cls].ap
        lines.append(f"{cls:<16} {diff:<10} {config.metric:<6} {ap:8.4f}")
        rows.append(f"{cls},{diff},{config.metric},{ap:.6f}")
    return "\n".join(lines) + "\n\n" + "\n".join(rows) + "\n"
