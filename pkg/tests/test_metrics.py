#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

import math
import unittest
from typing import List, Tuple

import numpy as np

from edgelift.geometry import Box3D, Detection3D
from edgelift.metrics import (
    average_reports,
    compare_with_oracle,
    exhaustive_match,
    match_and_score,
    MetricsConfig,
    parse_report_csv,
    RecordParseError,
    report_table,
    spa,
)


def _box(x: float, y: float = 0.0, size: float = 1.0, yaw: float = 0.0) -> Box3D:
    return Box3D(
        center=np.array([x, y, size / 2]), dims=np.full(3, size), yaw=yaw
    )


def _pred(box: Box3D, class_id: str = "box", confidence: float = 0.9) -> Detection3D:
    return Detection3D(box=box, class_id=class_id, confidence=confidence)


class SpaTest(unittest.TestCase):
    def test_spa(self) -> None:
        gt = _box(0.0)
        self.assertEqual(spa(gt, gt), 1.0)
        half_diag = math.sqrt(3) / 2
        self.assertAlmostEqual(spa(_box(half_diag / 2), gt), 0.5)
        self.assertEqual(spa(_box(5.0), gt), 0.0)


class MatchAndScoreTest(unittest.TestCase):
    def test_perfect(self) -> None:
        gts = [("box", _box(0.0)), ("chair", _box(3.0))]
        preds = [_pred(b, c) for c, b in gts]
        report = match_and_score(preds, gts)
        for tau in report.iou_thresholds:
            self.assertEqual(report.recall[tau], {"box": 1.0, "chair": 1.0})
            self.assertEqual(report.precision[tau], {"box": 1.0, "chair": 1.0})
        self.assertEqual(report.mspa, {"box": 1.0, "chair": 1.0})
        self.assertAlmostEqual(report.average_mean_iou(), 1.0)

    def test_empty_predictions(self) -> None:
        report = match_and_score([], [("box", _box(0.0))])
        self.assertEqual(report.recall[0.25]["box"], 0.0)
        self.assertEqual(report.mean_iou["box"], 0.0)
        self.assertEqual(report.num_pred["box"], 0)

    def test_false_positive_only_hurts_precision(self) -> None:
        gts = [("box", _box(0.0))]
        preds = [_pred(_box(0.0)), _pred(_box(5.0), confidence=0.5)]
        report = match_and_score(preds, gts)
        self.assertEqual(report.recall[0.5]["box"], 1.0)
        self.assertEqual(report.precision[0.5]["box"], 0.5)

    def test_class_gated(self) -> None:
        report = match_and_score([_pred(_box(0.0), "chair")], [("box", _box(0.0))])
        self.assertEqual(report.recall[0.25]["box"], 0.0)
        self.assertEqual(report.precision[0.25]["chair"], 0.0)
        self.assertEqual(report.scored_classes(), ["box"])

    def test_thresholds(self) -> None:
        # IoU 1/3
        report = match_and_score([_pred(_box(0.5))], [("box", _box(0.0))])
        self.assertEqual(report.recall[0.25]["box"], 1.0)
        self.assertEqual(report.recall[0.5]["box"], 0.0)
        self.assertAlmostEqual(report.mean_iou["box"], 1 / 3)

    def test_confidence_order(self) -> None:
        # The confident prediction claims the ground truth first.
        gts = [("box", _box(0.0))]
        preds = [_pred(_box(0.5), confidence=0.4), _pred(_box(0.1), confidence=0.9)]
        report = match_and_score(preds, gts)
        self.assertGreater(report.mean_iou["box"], 0.8)

    def test_fixed_classes(self) -> None:
        cfg = MetricsConfig(classes=("bag", "box"))
        report = match_and_score([], [("box", _box(0.0))], cfg)
        self.assertEqual(report.classes, ["bag", "box"])
        self.assertEqual(report.num_gt["bag"], 0)

    def test_config_validation(self) -> None:
        with self.assertRaises(ValueError):
            MetricsConfig(iou_thresholds=(0.0,))
        with self.assertRaises(ValueError):
            MetricsConfig(spa_threshold=1.5)
        cfg = MetricsConfig(iou_thresholds=(0.5, 0.25))
        self.assertEqual(cfg.iou_thresholds, (0.25, 0.5))


class AverageTest(unittest.TestCase):
    def test_average_skips_classes_without_gt(self) -> None:
        hit = match_and_score([_pred(_box(0.0))], [("box", _box(0.0))])
        miss = match_and_score([], [("box", _box(0.0))])
        nothing = match_and_score([], [])
        cfg = MetricsConfig(classes=("box",))
        avg = average_reports([hit, miss, nothing], cfg)
        self.assertEqual(avg.recall[0.25]["box"], 0.5)
        self.assertEqual(avg.precision[0.25]["box"], 1.0)
        self.assertEqual(avg.num_gt["box"], 2)
        self.assertEqual(avg.num_pred["box"], 1)


def _random_instance(
    rng: np.random.Generator,
) -> Tuple[List[Detection3D], List[Tuple[str, Box3D]]]:
    gts = []
    preds = []
    for class_id in ("box", "chair"):
        for _ in range(int(rng.integers(0, 4))):
            gt = Box3D(
                center=np.append(rng.uniform(-2.0, 2.0, size=2), 0.4),
                dims=rng.uniform(0.3, 1.0, size=3),
                yaw=float(rng.uniform(-math.pi, math.pi)),
            )
            gts.append((class_id, gt))
        for _ in range(int(rng.integers(0, 4))):
            if gts and rng.random() < 0.7:
                _, anchor = gts[int(rng.integers(0, len(gts)))]
                center = anchor.center + rng.normal(0, 0.1, size=3)
                dims = anchor.dims * rng.uniform(0.8, 1.2, size=3)
                yaw = anchor.yaw + float(rng.normal(0, 0.2))
            else:
                center = np.append(rng.uniform(-2.0, 2.0, size=2), 0.4)
                dims = rng.uniform(0.3, 1.0, size=3)
                yaw = float(rng.uniform(-math.pi, math.pi))
            preds.append(
                Detection3D(
                    box=Box3D(center=center, dims=dims, yaw=yaw),
                    class_id=class_id,
                    confidence=float(rng.uniform(0.1, 1.0)),
                )
            )
    return preds, gts


class OracleTest(unittest.TestCase):
    def test_exhaustive_small(self) -> None:
        gts = [_box(0.0), _box(0.6)]
        preds = [_pred(_box(0.3), confidence=0.9), _pred(_box(0.6), confidence=0.1)]
        ious = exhaustive_match(preds, gts)
        # The exact prediction takes the right-hand box.
        self.assertAlmostEqual(sum(ious), 0.7 / 1.3 + 1.0)

    def test_greedy_agrees_with_optimal(self) -> None:
        rng = np.random.default_rng(42)
        agree = 0
        for _ in range(500):
            preds, gts = _random_instance(rng)
            agree += compare_with_oracle(preds, gts)
        self.assertGreaterEqual(agree / 500, 0.95)


class TableTest(unittest.TestCase):
    def setUp(self) -> None:
        gts = [("box", _box(0.0)), ("chair", _box(3.0)), ("chair", _box(6.0))]
        preds = [_pred(_box(0.5)), _pred(_box(3.0), "chair")]
        self.report = match_and_score(preds, gts)

    def test_csv_roundtrip(self) -> None:
        text = report_table(self.report, fmt="csv")
        self.assertTrue(text.startswith("class,metric,threshold,value\n"))
        parsed = parse_report_csv(text)
        self.assertEqual(parsed.classes, self.report.classes)
        self.assertEqual(parsed.recall, self.report.recall)
        self.assertEqual(parsed.precision, self.report.precision)
        self.assertEqual(parsed.mspa, self.report.mspa)
        self.assertEqual(parsed.mean_iou, self.report.mean_iou)
        self.assertEqual(parsed.num_gt, self.report.num_gt)
        self.assertEqual(report_table(parsed, fmt="csv"), text)

    def test_markdown(self) -> None:
        text = report_table(self.report)
        lines = text.splitlines()
        self.assertEqual(lines[0], "| metric | box | chair | average |")
        self.assertIn("| recall@0.25 | 1.000 | 0.500 | 0.750 |", lines)

    def test_empty_report_has_header_only(self) -> None:
        empty = match_and_score([], [])
        self.assertEqual(
            report_table(empty, fmt="csv"), "class,metric,threshold,value\n"
        )
        self.assertEqual(len(report_table(empty).splitlines()), 2)

    def test_unknown_format(self) -> None:
        with self.assertRaises(ValueError):
            report_table(self.report, fmt="html")

    def test_parse_errors_carry_line_numbers(self) -> None:
        text = report_table(self.report, fmt="csv")
        lines = text.splitlines()
        lines[3] = "box,recall,0.25,not-a-number"
        with self.assertRaises(RecordParseError) as ctx:
            parse_report_csv("\n".join(lines))
        self.assertEqual(ctx.exception.line, 4)
        with self.assertRaises(RecordParseError) as ctx:
            parse_report_csv("wrong,header\n")
        self.assertEqual(ctx.exception.line, 1)
