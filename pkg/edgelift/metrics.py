#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
Class-wise 3D detection scoring.

Headline numbers are recall-style: a ground-truth object counts as detected
at IoU threshold t if the prediction greedily matched to it overlaps it by at
least t. Spatial position accuracy (SPA) is a normalized center error:

    spa = 1 - min(1, |c_pred - c_gt| / (|dims_gt| / 2))

and mSPA@t is the fraction of ground-truth objects whose matched prediction
has spa >= t. Precision and mean matched IoU are reported alongside.
"""

import csv
import io
import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box3D, Detection3D, iou3d

logger: logging.Logger = logging.getLogger(__name__)

AVERAGE: str = "average"
CSV_HEADER: Tuple[str, ...] = ("class", "metric", "threshold", "value")

GroundTruth = Tuple[str, Box3D]


class RecordParseError(ValueError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class MetricsConfig:
    iou_thresholds: Tuple[float, ...] = (0.25, 0.5)
    spa_threshold: float = 0.70
    classes: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "iou_thresholds", tuple(sorted(self.iou_thresholds)))
        object.__setattr__(self, "classes", tuple(self.classes))
        for tau in self.iou_thresholds + (self.spa_threshold,):
            if not 0 < tau <= 1:
                raise ValueError(f"Thresholds must be in (0, 1] (got {tau}).")


@dataclass
class MetricsReport:
    classes: List[str]
    iou_thresholds: Tuple[float, ...]
    spa_threshold: float
    recall: Dict[float, Dict[str, float]] = field(default_factory=dict)
    precision: Dict[float, Dict[str, float]] = field(default_factory=dict)
    mspa: Dict[str, float] = field(default_factory=dict)
    mean_iou: Dict[str, float] = field(default_factory=dict)
    num_gt: Dict[str, int] = field(default_factory=dict)
    num_pred: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def empty(
        cls, classes: Sequence[str], cfg: Optional[MetricsConfig] = None
    ) -> "MetricsReport":
        cfg = cfg or MetricsConfig()
        report = cls(
            classes=list(classes),
            iou_thresholds=cfg.iou_thresholds,
            spa_threshold=cfg.spa_threshold,
        )
        for tau in cfg.iou_thresholds:
            report.recall[tau] = {c: 0.0 for c in classes}
            report.precision[tau] = {c: 0.0 for c in classes}
        report.mspa = {c: 0.0 for c in classes}
        report.mean_iou = {c: 0.0 for c in classes}
        report.num_gt = {c: 0 for c in classes}
        report.num_pred = {c: 0 for c in classes}
        return report

    def scored_classes(self) -> List[str]:
        return [c for c in self.classes if self.num_gt.get(c, 0) > 0]

    def _average(self, values: Dict[str, float], classes: List[str]) -> float:
        if not classes:
            return 0.0
        return float(np.mean([values[c] for c in classes]))

    def average_recall(self, tau: float) -> float:
        return self._average(self.recall[tau], self.scored_classes())

    def average_mspa(self) -> float:
        return self._average(self.mspa, self.scored_classes())

    def average_mean_iou(self) -> float:
        return self._average(self.mean_iou, self.scored_classes())

    def average_precision(self, tau: float) -> float:
        classes = [c for c in self.classes if self.num_pred.get(c, 0) > 0]
        return self._average(self.precision[tau], classes)

    def rows(self) -> List[Tuple[str, Optional[float], Dict[str, float], float]]:
        """
        (metric, threshold, per-class values, average) in table order.
        """
        out = []
        for tau in self.iou_thresholds:
            out.append(("recall", tau, self.recall[tau], self.average_recall(tau)))
        out.append(("mspa", self.spa_threshold, self.mspa, self.average_mspa()))
        out.append(("mean_iou", None, self.mean_iou, self.average_mean_iou()))
        for tau in self.iou_thresholds:
            out.append(
                ("precision", tau, self.precision[tau], self.average_precision(tau))
            )
        return out


def spa(pred: Box3D, gt: Box3D) -> float:
    half_diag = float(np.linalg.norm(gt.dims)) / 2
    err = float(np.linalg.norm(pred.center - gt.center))
    return 1.0 - min(1.0, err / half_diag)


def _split_by_class(
    preds: Sequence[Detection3D], gts: Sequence[GroundTruth]
) -> Tuple[Dict[str, List[Detection3D]], Dict[str, List[Box3D]]]:
    preds_by_class: Dict[str, List[Detection3D]] = defaultdict(list)
    gts_by_class: Dict[str, List[Box3D]] = defaultdict(list)
    for det in preds:
        preds_by_class[det.class_id].append(det)
    for class_id, box in gts:
        gts_by_class[class_id].append(box)
    return preds_by_class, gts_by_class


def _resolve_classes(
    cfg: MetricsConfig,
    preds_by_class: Dict[str, List[Detection3D]],
    gts_by_class: Dict[str, List[Box3D]],
) -> List[str]:
    if cfg.classes:
        return list(cfg.classes)
    return sorted(set(preds_by_class) | set(gts_by_class))


def _greedy_gt_matches(
    preds: Sequence[Detection3D], gts: Sequence[Box3D]
) -> List[Optional[int]]:
    # Index of the prediction matched to each ground truth.
    gt_match: List[Optional[int]] = [None] * len(gts)
    if not preds or not gts:
        return gt_match
    overlaps = np.array([[iou3d(p.box, g) for g in gts] for p in preds])
    taken = np.zeros(len(gts), dtype=bool)
    for i in sorted(range(len(preds)), key=lambda i: -preds[i].confidence):
        candidates = np.where(taken, -1.0, overlaps[i])
        j = int(np.argmax(candidates))
        if candidates[j] > 0:
            taken[j] = True
            gt_match[j] = i
    return gt_match


def match_and_score(
    preds: Sequence[Detection3D],
    gts: Sequence[GroundTruth],
    cfg: Optional[MetricsConfig] = None,
) -> MetricsReport:
    cfg = cfg or MetricsConfig()
    preds_by_class, gts_by_class = _split_by_class(preds, gts)
    classes = _resolve_classes(cfg, preds_by_class, gts_by_class)
    report = MetricsReport.empty(classes, cfg)

    for class_id in classes:
        class_preds = preds_by_class.get(class_id, [])
        class_gts = gts_by_class.get(class_id, [])
        n_gt, n_pred = len(class_gts), len(class_preds)
        report.num_gt[class_id] = n_gt
        report.num_pred[class_id] = n_pred

        gt_match = _greedy_gt_matches(class_preds, class_gts)
        ious = [
            iou3d(class_preds[i].box, gt) if i is not None else 0.0
            for i, gt in zip(gt_match, class_gts)
        ]
        spa_hits = sum(
            1
            for i, gt in zip(gt_match, class_gts)
            if i is not None and spa(class_preds[i].box, gt) >= cfg.spa_threshold
        )
        for tau in cfg.iou_thresholds:
            hits = sum(1 for iou in ious if iou >= tau)
            report.recall[tau][class_id] = hits / n_gt if n_gt else 0.0
            report.precision[tau][class_id] = hits / n_pred if n_pred else 0.0
        report.mspa[class_id] = spa_hits / n_gt if n_gt else 0.0
        report.mean_iou[class_id] = sum(ious) / n_gt if n_gt else 0.0
    return report


def average_reports(
    reports: Sequence[MetricsReport], cfg: Optional[MetricsConfig] = None
) -> MetricsReport:
    """
    Average per-class rates over several reports.

    A class contributes a report's recall/mSPA/IoU only where that report has
    ground truth for it, and its precision only where it has predictions.
    Counts are summed.
    """
    cfg = cfg or MetricsConfig()
    if cfg.classes:
        classes = list(cfg.classes)
    else:
        classes = sorted({c for r in reports for c in r.classes})
    out = MetricsReport.empty(classes, cfg)
    for class_id in classes:
        with_gt = [r for r in reports if r.num_gt.get(class_id, 0) > 0]
        with_pred = [r for r in reports if r.num_pred.get(class_id, 0) > 0]
        out.num_gt[class_id] = sum(r.num_gt.get(class_id, 0) for r in reports)
        out.num_pred[class_id] = sum(r.num_pred.get(class_id, 0) for r in reports)
        if with_gt:
            for tau in cfg.iou_thresholds:
                out.recall[tau][class_id] = float(
                    np.mean([r.recall[tau][class_id] for r in with_gt])
                )
            out.mspa[class_id] = float(np.mean([r.mspa[class_id] for r in with_gt]))
            out.mean_iou[class_id] = float(
                np.mean([r.mean_iou[class_id] for r in with_gt])
            )
        if with_pred:
            for tau in cfg.iou_thresholds:
                out.precision[tau][class_id] = float(
                    np.mean([r.precision[tau][class_id] for r in with_pred])
                )
    return out


def exhaustive_match(
    preds: Sequence[Detection3D], gts: Sequence[Box3D]
) -> List[float]:
    """
    Brute-force assignment maximizing the sum of matched IoUs.

    Only meant as a reference for small instances.

    Returns:
        The matched IoU of each ground truth (0.0 if unmatched).
    """
    if not preds or not gts:
        return [0.0] * len(gts)
    overlaps = np.array([[iou3d(p.box, g) for g in gts] for p in preds])
    best_sum, best = -1.0, [0.0] * len(gts)
    slots: List[Optional[int]] = list(range(len(preds))) + [None] * len(gts)
    for perm in itertools.permutations(slots, len(gts)):
        ious = [overlaps[i, j] if i is not None else 0.0 for j, i in enumerate(perm)]
        total = float(sum(ious))
        if total > best_sum + 1e-12:
            best_sum, best = total, [float(v) for v in ious]
    return best


def compare_with_oracle(
    preds: Sequence[Detection3D],
    gts: Sequence[GroundTruth],
    cfg: Optional[MetricsConfig] = None,
) -> bool:
    """
    Check that the greedy matcher detects as many ground-truth objects at
    every threshold as the optimal assignment does. Disagreements are logged.
    """
    cfg = cfg or MetricsConfig()
    preds_by_class, gts_by_class = _split_by_class(preds, gts)
    agree = True
    for class_id in sorted(set(preds_by_class) | set(gts_by_class)):
        class_preds = preds_by_class.get(class_id, [])
        class_gts = gts_by_class.get(class_id, [])
        gt_match = _greedy_gt_matches(class_preds, class_gts)
        greedy = [
            iou3d(class_preds[i].box, gt) if i is not None else 0.0
            for i, gt in zip(gt_match, class_gts)
        ]
        optimal = exhaustive_match(class_preds, class_gts)
        for tau in cfg.iou_thresholds:
            n_greedy = sum(1 for v in greedy if v >= tau)
            n_optimal = sum(1 for v in optimal if v >= tau)
            if n_greedy != n_optimal:
                logger.warning(
                    f"Greedy matching detects {n_greedy} {class_id} objects at "
                    f"IoU {tau} but the optimal assignment detects {n_optimal} "
                    f"(matched IoU sum {sum(greedy):.4f} vs {sum(optimal):.4f})."
                )
                agree = False
    return agree


def _format_threshold(tau: Optional[float]) -> str:
    return "" if tau is None else repr(float(tau))


def _markdown_label(metric: str, tau: Optional[float]) -> str:
    if tau is None:
        return metric
    return f"{metric}@{tau:g}"


def report_table(report: MetricsReport, fmt: str = "markdown") -> str:
    """
    Render a report.

    Args:
        report: The report to render.
        fmt: ``"csv"`` for the long ``class,metric,threshold,value`` format,
            ``"markdown"`` for a table with one row per metric and one column
            per class followed by the average.

    Returns:
        The rendered text.
    """
    if fmt == "csv":
        return _report_csv(report)
    elif fmt == "markdown":
        return _report_markdown(report)
    raise ValueError(f"Unsupported table format {fmt!r} (expected csv or markdown).")


def _report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    if not report.classes:
        return buf.getvalue()
    for metric, tau, values, average in report.rows():
        for class_id in report.classes:
            writer.writerow(
                [
                    class_id,
                    metric,
                    _format_threshold(tau),
                    repr(float(values[class_id])),
                ]
            )
        writer.writerow([AVERAGE, metric, _format_threshold(tau), repr(float(average))])
    for class_id in report.classes:
        writer.writerow([class_id, "num_gt", "", str(report.num_gt[class_id])])
        writer.writerow([class_id, "num_pred", "", str(report.num_pred[class_id])])
    return buf.getvalue()


def _report_markdown(report: MetricsReport) -> str:
    header = ["metric"] + list(report.classes) + [AVERAGE]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join(["---"] * len(header)) + "|",
    ]
    if not report.classes:
        return "\n".join(lines) + "\n"
    for metric, tau, values, average in report.rows():
        cells = [_markdown_label(metric, tau)]
        cells += [f"{values[c]:.3f}" for c in report.classes]
        cells.append(f"{average:.3f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> MetricsReport:
    """
    Rebuild a report from :func:`report_table` csv output.
    """
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise RecordParseError(1, f"expected header {','.join(CSV_HEADER)}")
    classes: List[str] = []
    thresholds: List[float] = []
    spa_threshold: Optional[float] = None
    values: Dict[Tuple[str, Optional[float]], Dict[str, float]] = defaultdict(dict)
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise RecordParseError(lineno, f"expected 4 fields, got {len(row)}")
        class_id, metric, tau_text, value_text = row
        try:
            tau = float(tau_text) if tau_text else None
            value = float(value_text)
        except ValueError as e:
            raise RecordParseError(lineno, str(e)) from e
        if class_id == AVERAGE:
            continue
        if class_id not in classes:
            classes.append(class_id)
        if metric == "recall" and tau not in thresholds:
            thresholds.append(tau)
        if metric == "mspa":
            spa_threshold = tau
        values[(metric, tau)][class_id] = value
    if classes and spa_threshold is None:
        raise RecordParseError(len(rows), "no mspa rows")
    cfg = MetricsConfig(
        iou_thresholds=tuple(thresholds) or MetricsConfig().iou_thresholds,
        spa_threshold=spa_threshold or MetricsConfig().spa_threshold,
        classes=tuple(classes),
    )
    report = MetricsReport.empty(classes, cfg)
    for tau in cfg.iou_thresholds:
        report.recall[tau].update(values[("recall", tau)])
        report.precision[tau].update(values[("precision", tau)])
    report.mspa.update(values[("mspa", cfg.spa_threshold)])
    report.mean_iou.update(values[("mean_iou", None)])
    report.num_gt.update({c: int(v) for c, v in values[("num_gt", None)].items()})
    report.num_pred.update({c: int(v) for c, v in values[("num_pred", None)].items()})
    return report

