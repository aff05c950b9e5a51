#!/usr/bin/env python3
# Copyright (c) Meta Platforms, Inc. and affiliates.
# All rights reserved.
#
# This source code is licensed under the BSD-style license found in the
# LICENSE file in the root directory of this source tree.

"""
Command-line front end.

    edgelift run    --config experiment.yaml --out results/
    edgelift serve  --bind 127.0.0.1:7700 --backend oracle
    edgelift bench  --frames 200 --budget-ms 33
    edgelift eval   results/timelines/hybrid/parallel_speed1.jsonl
"""

import argparse
import asyncio
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple

from .artifacts import ArtifactWriter, sync_read_text
from .backend import url_to_backend
from .config import (
    BIND_ADDR_ENV_VAR,
    ConfigError,
    DEFAULT_BIND_ADDR,
    dump_yaml,
    env_override,
    LIFT_BUDGET_MS_ENV_VAR,
    load_yaml,
    load_yaml_file,
    parse_addr,
    SERVER_ADDR_ENV_VAR,
)
from .depthlift import FilterConfig, LiftMethod
from .edgenet import EdgeServer, TransportError
from .metrics import (
    MetricsConfig,
    MetricsReport,
    RecordParseError,
    report_table,
)
from .pipeline import (
    DepthSource,
    detection_to_dict,
    DetectorEndpoint,
    evaluate_run,
    latency_breakdown,
    PipelineConfig,
    RemoteEndpoint,
    run_scenario,
    TimelineRecord,
    Variant,
)
from .profiler import bench_lift, DEFAULT_LIFT_BUDGET_MS, report_budget
from .simkit import (
    acceptance_scene,
    LatencySpec,
    NoiseSpec,
    Scenario,
    Scene,
    TrajectorySpec,
)
from .version import __version__

logger: logging.Logger = logging.getLogger(__name__)

EXIT_OK: int = 0
EXIT_CONFIG_ERROR: int = 1
EXIT_RUNTIME_ERROR: int = 2
EXIT_BUDGET_FAILURE: int = 3

_DEFAULT_SCENARIOS: Tuple[Scenario, ...] = (
    Scenario.PARALLEL,
    Scenario.AWAY_CLOSE,
    Scenario.CIRCLING,
)
_DEFAULT_SPEEDS: Tuple[float, ...] = (0.5, 1.0, 2.0)

_PIPELINE_KEYS = {
    "compensation",
    "fusion",
    "fps",
    "duration",
    "max_inflight",
    "lift_cost_ms",
    "skip_truncated",
    "depth_source",
    "method",
    "latency_ms",
    "jitter_ms",
    "compute_ms",
    "noise",
    "filter",
    "match_dist_max",
    "stale_after",
    "reject_stale",
}
_TRAJECTORY_KEYS = {
    "range",
    "radius",
    "duration",
    "start_distance",
    "bearing",
    "approach",
    "track_target",
    "sweep",
    "eye_height",
    "tilt",
}


def _check_keys(section: str, d: Dict[str, Any], allowed: Sequence[str]) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"Unknown {section} keys: {', '.join(unknown)}.")


def _enum_value(enum_cls: Any, value: Any, what: str) -> Any:
    try:
        return enum_cls(value)
    except ValueError as e:
        choices = ", ".join(m.value for m in enum_cls)
        raise ConfigError(f"Invalid {what} {value!r} (expected {choices}).") from e


@dataclass
class ExperimentSpec:
    """
    A grid of scenario/speed cells run for one or more pipeline variants.

    Attributes:
        scene: Scene file. None selects the packaged acceptance scene.
        scenarios: Mobility patterns.
        speeds: Camera speeds in m/s.
        variants: Pipeline variants to run for every cell.
        seed: Seed shared by every cell, so variants see identical noise.
        output_dir: Where reports, tables and dumps are written.
        pipeline: Overrides of the pipeline defaults.
        trajectory: Overrides of the trajectory defaults.
        metrics: ``iou_thresholds`` and ``spa_threshold`` overrides.
    """

    scene: Optional[str] = None
    scenarios: Tuple[Scenario, ...] = _DEFAULT_SCENARIOS
    speeds: Tuple[float, ...] = _DEFAULT_SPEEDS
    variants: Tuple[Variant, ...] = (Variant.HYBRID,)
    seed: int = 42
    output_dir: str = "edgelift-out"
    pipeline: Dict[str, Any] = field(default_factory=dict)
    trajectory: Dict[str, Any] = field(default_factory=dict)
    metrics: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.scenarios = tuple(
            s if isinstance(s, Scenario) else _enum_value(Scenario, s, "scenario")
            for s in self.scenarios
        )
        self.variants = tuple(
            v if isinstance(v, Variant) else _enum_value(Variant, v, "variant")
            for v in self.variants
        )
        try:
            self.speeds = tuple(float(s) for s in self.speeds)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid speeds {self.speeds!r}.") from e
        if not self.scenarios or not self.speeds or not self.variants:
            raise ConfigError("The experiment grid is empty.")
        if any(not s > 0 for s in self.speeds):
            raise ConfigError(f"Speeds must be positive (got {self.speeds}).")
        _check_keys("pipeline", self.pipeline, _PIPELINE_KEYS)
        _check_keys("trajectory", self.trajectory, _TRAJECTORY_KEYS)
        _check_keys("metrics", self.metrics, ("iou_thresholds", "spa_threshold"))

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentSpec":
        if not isinstance(d, dict):
            raise ConfigError("An experiment spec must be a mapping.")
        _check_keys("experiment", d, [f.name for f in dataclasses.fields(cls)])
        return cls(**d)

    @classmethod
    def from_yaml(cls, yaml_str: str) -> "ExperimentSpec":
        return cls.from_dict(load_yaml(yaml_str) or {})

    @classmethod
    def from_file(cls, path: str) -> "ExperimentSpec":
        return cls.from_dict(load_yaml_file(path) or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scene": self.scene,
            "scenarios": [s.value for s in self.scenarios],
            "speeds": list(self.speeds),
            "variants": [v.value for v in self.variants],
            "seed": self.seed,
            "output_dir": self.output_dir,
            "pipeline": dict(self.pipeline),
            "trajectory": dict(self.trajectory),
            "metrics": dict(self.metrics),
        }

    def to_yaml(self) -> str:
        return dump_yaml(self.to_dict())

    def load_scene(self) -> Scene:
        return acceptance_scene() if self.scene is None else Scene.from_file(self.scene)

    def metrics_config(self, scene: Scene) -> MetricsConfig:
        try:
            return MetricsConfig(
                classes=tuple(sorted({o.class_id for o in scene.objects})),
                **{
                    k: tuple(v) if k == "iou_thresholds" else float(v)
                    for k, v in self.metrics.items()
                },
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid metrics settings: {e}") from e

    def pipeline_config(self, variant: Variant) -> PipelineConfig:
        p = dict(self.pipeline)
        kwargs: Dict[str, Any] = {"variant": variant, "seed": self.seed}
        for key in (
            "compensation",
            "fusion",
            "fps",
            "duration",
            "max_inflight",
            "skip_truncated",
            "match_dist_max",
            "stale_after",
            "reject_stale",
        ):
            if key in p:
                kwargs[key] = p[key]
        if "lift_cost_ms" in p:
            kwargs["lift_cost_s"] = float(p["lift_cost_ms"]) / 1000
        if "depth_source" in p:
            kwargs["depth_source"] = _enum_value(
                DepthSource, p["depth_source"], "depth_source"
            )
        if "method" in p:
            kwargs["method"] = _enum_value(LiftMethod, p["method"], "method")
        try:
            if "noise" in p:
                noise = p["noise"]
                kwargs["noise"] = (
                    NoiseSpec.zero() if noise == "zero" else NoiseSpec(**noise)
                )
            if "filter" in p:
                kwargs["filter"] = FilterConfig(**p["filter"])
            latency_keys = {"latency_ms", "jitter_ms", "compute_ms"} & set(p)
            if latency_keys:
                base = PipelineConfig(variant=variant).resolved_latency()
                kwargs["latency"] = LatencySpec(
                    fixed=float(p.get("latency_ms", base.fixed * 1000)) / 1000,
                    jitter=float(p.get("jitter_ms", base.jitter * 1000)) / 1000,
                    model_compute=float(
                        p.get("compute_ms", base.model_compute * 1000)
                    )
                    / 1000,
                )
            return PipelineConfig(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid pipeline settings: {e}") from e

    def trajectory_spec(self, scenario: Scenario, speed: float) -> TrajectorySpec:
        try:
            return TrajectorySpec(scenario=scenario, speed=speed, **self.trajectory)
        except TypeError as e:
            raise ConfigError(f"Invalid trajectory settings: {e}") from e


@dataclass(frozen=True)
class GridCell:
    variant: Variant
    scenario: Scenario
    speed: float

    @property
    def name(self) -> str:
        return f"{self.scenario.value}_speed{self.speed:g}"


@dataclass
class CellResult:
    cell: GridCell
    report: MetricsReport
    record: TimelineRecord
    elapsed: float


class _GridReporter:
    _CELL_LOG_TEMPLATE: ClassVar[str] = (
        "{variant:>12} {scenario:>12} {speed:>8} {recall:>12} {mean_iou:>10} "
        "{e2e:>12} {elapsed:>10}"
    )

    def __init__(self, headline_tau: float) -> None:
        self.headline_tau = headline_tau
        self._header: str = self._CELL_LOG_TEMPLATE.format(
            variant="Variant",
            scenario="Scenario",
            speed="Speed",
            recall=f"Recall@{headline_tau:g}",
            mean_iou="Mean IoU",
            e2e="E2E (ms)",
            elapsed="Wall (s)",
        )

    def print_header(self) -> None:
        logger.info(self._header)
        logger.info("-" * len(self._header))

    def report(self, result: CellResult) -> None:
        e2e = latency_breakdown(result.record)["end_to_end"]
        logger.info(
            self._CELL_LOG_TEMPLATE.format(
                variant=result.cell.variant.value,
                scenario=result.cell.scenario.value,
                speed=f"{result.cell.speed:g}",
                recall=f"{result.report.average_recall(self.headline_tau):.3f}",
                mean_iou=f"{result.report.average_mean_iou():.3f}",
                e2e=f"{e2e.mean * 1000:.1f}",
                elapsed=f"{result.elapsed:.2f}",
            )
        )


def run_cell(
    spec: ExperimentSpec,
    scene: Scene,
    cell: GridCell,
    server_addr: Optional[Tuple[str, int]] = None,
) -> CellResult:
    begin = time.monotonic()
    cfg = spec.pipeline_config(cell.variant)
    endpoint: Optional[DetectorEndpoint] = None
    if server_addr is not None and cell.variant == Variant.HYBRID:
        endpoint = RemoteEndpoint(*server_addr)
    try:
        record = run_scenario(
            scene, spec.trajectory_spec(cell.scenario, cell.speed), cfg, endpoint
        )
    finally:
        if endpoint is not None:
            endpoint.close()
    record.header["variant"] = cell.variant.value
    report = evaluate_run(record, scene, spec.metrics_config(scene))
    return CellResult(
        cell=cell, report=report, record=record, elapsed=time.monotonic() - begin
    )


def run_grid(
    spec: ExperimentSpec,
    workers: int = 1,
    server_addr: Optional[Tuple[str, int]] = None,
) -> List[CellResult]:
    """
    Run every cell of the grid. Cells are independent and may run in
    parallel; results come back in grid order.
    """
    scene = spec.load_scene()
    cells = [
        GridCell(variant, scenario, speed)
        for variant in spec.variants
        for scenario in spec.scenarios
        for speed in spec.speeds
    ]
    reporter = _GridReporter(spec.metrics_config(scene).iou_thresholds[0])
    reporter.print_header()
    if workers <= 1:
        results = []
        for cell in cells:
            results.append(run_cell(spec, scene, cell, server_addr))
            reporter.report(results[-1])
        return results
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [
            executor.submit(run_cell, spec, scene, cell, server_addr)
            for cell in cells
        ]
        results = [f.result() for f in futures]
    for result in results:
        reporter.report(result)
    return results


def combined_table(results: List[CellResult], spec: ExperimentSpec) -> str:
    """
    One markdown table per scenario: a row per variant, a column per class,
    each cell holding the headline recall at every speed as ``a/b/c``.
    """
    if not results:
        return ""
    tau = results[0].report.iou_thresholds[0]
    classes = results[0].report.classes
    by_cell = {
        (r.cell.variant, r.cell.scenario, r.cell.speed): r.report for r in results
    }
    speeds = "/".join(f"{s:g}" for s in spec.speeds)
    lines = []
    for scenario in spec.scenarios:
        lines.append(f"## {scenario.value} (recall@{tau:g}, speed {speeds} m/s)")
        lines.append("")
        header = ["variant"] + list(classes) + ["average"]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join(["---"] * len(header)) + "|")
        for variant in spec.variants:
            reports = [by_cell[(variant, scenario, s)] for s in spec.speeds]
            cells = [variant.value]
            for class_id in classes:
                cells.append(
                    "/".join(
                        f"{r.recall[tau][class_id]:.3f}"
                        if r.num_gt.get(class_id, 0)
                        else "-"
                        for r in reports
                    )
                )
            cells.append("/".join(f"{r.average_recall(tau):.3f}" for r in reports))
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def grid_artifacts(
    results: List[CellResult], spec: ExperimentSpec, timelines: bool = False
) -> Dict[str, str]:
    files: Dict[str, str] = {"experiment.yaml": spec.to_yaml()}
    for r in results:
        prefix = f"{r.cell.variant.value}/{r.cell.name}"
        files[f"reports/{prefix}.csv"] = report_table(r.report, fmt="csv")
        last = r.record.ticks[-1].detections if r.record.ticks else []
        files[f"detections/{prefix}.yaml"] = dump_yaml(
            [detection_to_dict(d) for d in last]
        )
        if timelines:
            files[f"timelines/{prefix}.jsonl"] = r.record.to_jsonl()
    files["table.md"] = combined_table(results, spec)
    return files


def _parse_list(text: str, cast: Any) -> Tuple[Any, ...]:
    try:
        return tuple(cast(x.strip()) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"Invalid list {text!r}: {e}") from e


def cmd_run(args: argparse.Namespace) -> int:
    spec = ExperimentSpec.from_file(args.config) if args.config else ExperimentSpec()
    overrides: Dict[str, Any] = {}
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant is not None:
        overrides["variants"] = (
            (Variant.HYBRID, Variant.MONOLITHIC_EDGE_3D)
            if args.variant == "both"
            else (Variant(args.variant),)
        )
    if args.scenarios is not None:
        overrides["scenarios"] = _parse_list(args.scenarios, str)
    if args.speeds is not None:
        overrides["speeds"] = _parse_list(args.speeds, float)
    pipeline = dict(spec.pipeline)
    if args.latency_ms is not None:
        pipeline["latency_ms"] = args.latency_ms
    if args.no_compensation:
        pipeline["compensation"] = False
    if args.no_fusion:
        pipeline["fusion"] = False
    overrides["pipeline"] = pipeline
    spec = dataclasses.replace(spec, **overrides)

    os.makedirs(spec.output_dir, exist_ok=True)
    if not os.access(spec.output_dir, os.W_OK):
        raise ConfigError(f"Output directory {spec.output_dir} is not writable.")

    server_addr = None
    if args.server is not None:
        server_addr = parse_addr(args.server)

    results = run_grid(spec, workers=args.workers, server_addr=server_addr)
    writer = ArtifactWriter(spec.output_dir)
    writer.sync_write_many(grid_artifacts(results, spec, timelines=args.timelines))
    logger.info(f"Wrote {len(results)} cell reports to {spec.output_dir}.")
    return EXIT_OK


async def _serve(
    server: EdgeServer, host: str, port: int, shutdown_after: Optional[float]
) -> None:
    await server.start(host, port)
    try:
        if shutdown_after is None:
            await server.serve_forever()
        else:
            await asyncio.sleep(shutdown_after)
    finally:
        await server.close()


def cmd_serve(args: argparse.Namespace) -> int:
    host, port = parse_addr(args.bind)
    latency = LatencySpec(
        fixed=0.0,
        jitter=args.jitter_ms / 1000,
        model_compute=args.compute_ms / 1000,
    )
    server = EdgeServer(url_to_backend(args.backend), latency=latency, seed=args.seed)
    try:
        asyncio.run(_serve(server, host, port, args.shutdown_after))
    except KeyboardInterrupt:
        logger.info("Interrupted, shutting down.")
    except OSError as e:
        logger.error(f"Failed to serve on {host}:{port}: {e}")
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    if args.frames < 1:
        raise ConfigError(f"--frames must be >= 1 (got {args.frames}).")
    result = bench_lift(
        n_frames=args.frames,
        seed=args.seed if args.seed is not None else 42,
        method=LiftMethod(args.method),
    )
    if not report_budget(result, args.budget_ms):
        return EXIT_BUDGET_FAILURE
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if not os.path.exists(args.record):
        raise ConfigError(f"Record file {args.record} does not exist.")
    record = TimelineRecord.from_jsonl(sync_read_text(args.record))
    if args.scene is not None:
        scene = Scene.from_file(args.scene)
    elif record.header.get("scene", "acceptance") == "acceptance":
        scene = acceptance_scene()
    else:
        raise ConfigError(
            f"Record was made with scene {record.header['scene']!r}; pass --scene."
        )
    cfg = MetricsConfig(classes=tuple(sorted({o.class_id for o in scene.objects})))
    report = evaluate_run(record, scene, cfg)
    table = report_table(report, fmt=args.format)
    if args.out:
        ArtifactWriter(os.path.dirname(os.path.abspath(args.out))).sync_write(
            os.path.basename(args.out), table
        )
    else:
        sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgelift",
        description="Edge-assisted 2D detection with on-device 3D lifting.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging verbosity (default: INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment grid")
    run.add_argument("--config", help="experiment spec YAML file")
    run.add_argument("--out", help="output directory (overrides the experiment file)")
    run.add_argument("--seed", type=int, help="experiment seed (default: 42)")
    run.add_argument(
        "--variant",
        choices=[v.value for v in Variant] + ["both"],
        help="pipeline variant(s) to run",
    )
    run.add_argument("--scenarios", help="comma-separated scenario names")
    run.add_argument("--speeds", help="comma-separated speeds in m/s")
    run.add_argument(
        "--latency-ms", type=float, help="fixed one-way network latency in ms"
    )
    run.add_argument(
        "--no-compensation", action="store_true", help="disable motion compensation"
    )
    run.add_argument(
        "--no-fusion", action="store_true", help="use last-write-wins instead of fusion"
    )
    run.add_argument(
        "--server",
        nargs="?",
        const=os.environ.get(SERVER_ADDR_ENV_VAR, DEFAULT_BIND_ADDR),
        help=(
            "send 2D detect requests to an edge server at HOST:PORT "
            f"(bare flag: ${SERVER_ADDR_ENV_VAR} or {DEFAULT_BIND_ADDR})"
        ),
    )
    run.add_argument(
        "--workers", type=int, default=1, help="grid cells run in parallel"
    )
    run.add_argument(
        "--timelines", action="store_true", help="also dump per-cell timelines"
    )
    run.set_defaults(func=cmd_run)

    serve = sub.add_parser("serve", help="serve a 2D detector over TCP")
    serve.add_argument(
        "--bind",
        default=env_override(BIND_ADDR_ENV_VAR, str, DEFAULT_BIND_ADDR),
        help=f"HOST:PORT to listen on (default: ${BIND_ADDR_ENV_VAR} or "
        f"{DEFAULT_BIND_ADDR})",
    )
    serve.add_argument(
        "--backend", default="oracle", help="detector backend url (default: oracle)"
    )
    serve.add_argument(
        "--compute-ms", type=float, default=13.0, help="emulated model compute time"
    )
    serve.add_argument(
        "--jitter-ms", type=float, default=0.0, help="compute time jitter"
    )
    serve.add_argument("--seed", type=int, default=0, help="jitter seed")
    serve.add_argument(
        "--shutdown-after", type=float, help="stop after this many seconds"
    )
    serve.set_defaults(func=cmd_serve)

    bench = sub.add_parser("bench", help="time the lift stage")
    bench.add_argument("--frames", type=int, default=100, help="frames to lift")
    bench.add_argument(
        "--budget-ms",
        type=float,
        default=env_override(LIFT_BUDGET_MS_ENV_VAR, float, DEFAULT_LIFT_BUDGET_MS),
        help="p95 per-frame budget; exceeding it exits with status 3",
    )
    bench.add_argument(
        "--method",
        choices=[m.value for m in LiftMethod],
        default=LiftMethod.MIN_AREA_RECT.value,
    )
    bench.add_argument("--seed", type=int, help="render seed (default: 42)")
    bench.set_defaults(func=cmd_bench)

    ev = sub.add_parser("eval", help="re-score a timeline dump")
    ev.add_argument("record", help="timeline JSONL file")
    ev.add_argument("--scene", help="scene YAML file used for the run")
    ev.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    ev.add_argument("--out", help="write the table here instead of stdout")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level))
    try:
        return args.func(args)
    except RecordParseError as e:
        logger.error(f"Malformed record: {e}")
        return EXIT_CONFIG_ERROR
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except (TransportError, OSError, RuntimeError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME_ERROR
    except ValueError as e:
        logger.error(f"Invalid value: {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
