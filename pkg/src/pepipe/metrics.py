"""Detection evaluation: IoU, greedy matching, AP, F1, average IoU, sweeps.

Detections are per-image lists of :class:`~pepipe.boxes.Detection`; ground
truth is per-image lists of rectangles.  AP integrates the monotone
precision envelope over recall at every distinct confidence cutoff
(all-point interpolation), so tied confidences enter the curve together.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .boxes import area, check_rect
from .errors import InputError

DEFAULT_THRESHOLDS = tuple(round(0.1 * i, 2) for i in range(1, 10))


def iou(a, b):
    """Intersection area over union area of two rectangles."""
    check_rect(a)
    check_rect(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area(a) + area(b) - inter)


def confidence_order(detections):
    """Indices by descending confidence; equal confidences keep input order."""
    return sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))


@dataclass
class MatchResult:
    is_tp: list  # per detection, input order
    gt_index: list  # matched GT index or None
    match_iou: list  # IoU with the matched GT or None
    gt_matched: list  # per GT

    @property
    def tp(self):
        return sum(self.is_tp)

    @property
    def fp(self):
        return len(self.is_tp) - self.tp

    @property
    def fn(self):
        return len(self.gt_matched) - sum(self.gt_matched)


def match_detections(detections, gt_boxes, iou_threshold):
    """Greedy one-to-one matching in descending confidence.

    Each detection takes the unmatched GT with the highest IoU (lowest index on
    ties); it is a true positive when that IoU reaches ``iou_threshold``.
    """
    n = len(detections)
    is_tp, gt_index, match_iou = [False] * n, [None] * n, [None] * n
    matched = [False] * len(gt_boxes)
    for i in confidence_order(detections):
        best, best_j = -1.0, None
        for j, g in enumerate(gt_boxes):
            if matched[j]:
                continue
            v = iou(detections[i].box, g)
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= iou_threshold:
            matched[best_j] = True
            is_tp[i], gt_index[i], match_iou[i] = True, best_j, best
    return MatchResult(is_tp, gt_index, match_iou, matched)


def _total_gt(gt_per_image):
    total = sum(len(g) for g in gt_per_image)
    if total == 0:
        raise InputError("evaluation needs at least one ground-truth box")
    return total


class PRCurve(NamedTuple):
    confidence: np.ndarray  # cutoff values, descending
    precision: np.ndarray
    recall: np.ndarray


def precision_recall_curve(detections_per_image, gt_per_image, iou_threshold):
    """Precision/recall at each distinct confidence cutoff."""
    if len(detections_per_image) != len(gt_per_image):
        raise InputError("detections and ground truth cover different image counts")
    total = _total_gt(gt_per_image)
    flat = []
    for img, (dets, gts) in enumerate(zip(detections_per_image, gt_per_image)):
        result = match_detections(dets, gts, iou_threshold)
        for k, d in enumerate(dets):
            flat.append((-d.confidence, img, k, result.is_tp[k]))
    flat.sort(key=lambda r: r[:3])
    if not flat:
        return PRCurve(np.zeros(0), np.zeros(0), np.zeros(0))
    conf = np.array([-r[0] for r in flat])
    tp = np.cumsum([r[3] for r in flat])
    n = np.arange(1, len(flat) + 1)
    # last index of every tie group
    last = np.append(conf[1:] != conf[:-1], True)
    return PRCurve(conf[last], tp[last] / n[last], tp[last] / total)


def average_precision(detections_per_image, gt_per_image, iou_threshold):
    curve = precision_recall_curve(detections_per_image, gt_per_image, iou_threshold)
    if curve.recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], curve.recall]))
    return float(np.sum(steps * envelope))


def _above(detections_per_image, conf_threshold):
    return [[d for d in dets if d.confidence >= conf_threshold] for dets in detections_per_image]


def f1_at(detections_per_image, gt_per_image, iou_threshold, conf_threshold=0.25):
    """(precision, recall, F1) after thresholding on confidence."""
    total = _total_gt(gt_per_image)
    tp = fp = 0
    for dets, gts in zip(_above(detections_per_image, conf_threshold), gt_per_image):
        r = match_detections(dets, gts, iou_threshold)
        tp += r.tp
        fp += r.fp
    if tp == 0:
        return 0.0, 0.0, 0.0
    p = tp / (tp + fp)
    r = tp / total
    return p, r, 2 * p * r / (p + r)


class AvgIoU(NamedTuple):
    value: float
    empty: bool


def avg_iou(detections_per_image, gt_per_image, conf_threshold=0.25):
    """Mean best-IoU of above-threshold detections against their image's GT."""
    vals = []
    for dets, gts in zip(_above(detections_per_image, conf_threshold), gt_per_image):
        for d in dets:
            vals.append(max((iou(d.box, g) for g in gts), default=0.0))
    if not vals:
        return AvgIoU(0.0, True)
    return AvgIoU(float(np.mean(vals)), False)


@dataclass
class ThresholdMetrics:
    iou_threshold: float
    ap: float
    f1: float
    avg_iou: float
    precision: float
    recall: float


@dataclass
class MetricsReport:
    records: list
    pr_curves: dict = field(default_factory=dict)  # threshold -> PRCurve
    conf_threshold: float = 0.25

    def record(self, iou_threshold):
        for r in self.records:
            if abs(r.iou_threshold - iou_threshold) < 1e-9:
                return r
        raise KeyError(iou_threshold)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "ap", "f1", "avg_iou", "precision", "recall"])
            for r in self.records:
                w.writerow([f"{r.iou_threshold:.2f}"] + [f"{v:.6f}" for v in
                           (r.ap, r.f1, r.avg_iou, r.precision, r.recall)])

    def write_pr_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "confidence", "precision", "recall"])
            for thr, c in self.pr_curves.items():
                for conf, p, r in zip(c.confidence, c.precision, c.recall):
                    w.writerow([f"{thr:.2f}", f"{conf:.6f}", f"{p:.6f}", f"{r:.6f}"])

    def plot(self, path):
        """Line plot of AP, F1 and average IoU against the IoU threshold."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        x = [r.iou_threshold for r in self.records]
        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        ax.plot(x, [r.ap for r in self.records], "o-", label="AP")
        ax.plot(x, [r.f1 for r in self.records], "s-", label="F1")
        ax.plot(x, [r.avg_iou for r in self.records], "^-", label="avg IoU")
        ax.set_xlabel("IoU threshold")
        ax.set_ylim(0, 1.02)
        ax.set_xticks(x)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def threshold_sweep(detections_per_image, gt_per_image, thresholds=DEFAULT_THRESHOLDS, conf_threshold=0.25):
    thresholds = list(thresholds)
    if any(not 0 < t < 1 for t in thresholds) or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise InputError("IoU thresholds must be strictly increasing inside (0, 1)")
    mean_iou = avg_iou(detections_per_image, gt_per_image, conf_threshold).value
    records, curves = [], {}
    for thr in thresholds:
        curves[thr] = precision_recall_curve(detections_per_image, gt_per_image, thr)
        ap = average_precision(detections_per_image, gt_per_image, thr)
        p, r, f1 = f1_at(detections_per_image, gt_per_image, thr, conf_threshold)
        records.append(ThresholdMetrics(thr, ap, f1, mean_iou, p, r))
    return MetricsReport(records, curves, conf_threshold)


def select_checkpoint(log):
    """Iteration with the highest validation AP; the earliest wins ties.

    ``log`` holds records with ``iteration`` and ``val_ap50`` attributes;
    entries whose ``val_ap50`` is None are ignored.
    """
    scored = [r for r in log if getattr(r, "val_ap50", None) is not None]
    if not scored:
        raise InputError("iteration log has no validation AP entries")
    best = scored[0]
    for r in scored[1:]:
        if r.val_ap50 > best.val_ap50:
            best = r
    return best.iteration


def write_report_files(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "metrics.csv")
    report.write_pr_csv(out_dir / "pr_curves.csv")
    report.plot(out_dir / "metrics.png")
