"""Experiment harness: trains/evaluates configurations and emits result
tables as CSV plus plot-data series.
"""
from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .ledger import FlopsLedger
from .scenesim import SweepSelection, accumulate, cast_sweep, random_scene
from .trainer import SegModel, Sample, TrainConfig, build_dataset, evaluate, train
from .voxelize import dynamic_voxelize, hard_voxelize

log = logging.getLogger(__name__)

EXPERIMENT_KINDS = ("method-compare", "t-sweep", "voxelization-compare",
                    "latency-breakdown", "sampling-compare")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    base: TrainConfig
    sweep_values: tuple = ()
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")


@dataclass
class ResultRow:
    label: str
    miou: float
    gflops: float
    latency_ms: float
    aux_ops: float = 0.0
    breakdown: str = ""   # "layer=ms;layer=ms" when per-layer data exists
    failed: bool = False


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    @property
    def any_failed(self) -> bool:
        return any(r.failed for r in self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label", "miou", "gflops", "latency_ms", "aux_ops",
                        "breakdown", "failed"])
            for r in self.rows:
                w.writerow([r.label, repr(r.miou), repr(r.gflops),
                            repr(r.latency_ms), repr(r.aux_ops), r.breakdown,
                            int(r.failed)])

    @staticmethod
    def from_csv(path) -> "ResultTable":
        table = ResultTable()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            next(reader)
            for row in reader:
                table.rows.append(ResultRow(
                    label=row[0], miou=float(row[1]), gflops=float(row[2]),
                    latency_ms=float(row[3]), aux_ops=float(row[4]),
                    breakdown=row[5], failed=bool(int(row[6]))))
        return table


def _eval_row(label: str, cfg: TrainConfig, dataset=None) -> ResultRow:
    reports, model = train(cfg, dataset=dataset)
    _, val_set = dataset if dataset is not None else build_dataset(cfg)
    rep = evaluate(model, val_set)
    aux = _mean_aux(model, val_set)
    breakdown = _stage_latency(model, val_set)
    return ResultRow(label=label, miou=rep.val_miou,
                     gflops=rep.mean_flops / 1e9,
                     latency_ms=rep.mean_latency_ms, aux_ops=aux,
                     breakdown=";".join(f"{k}={v * 1e3:.3f}"
                                        for k, v in breakdown.items()))


def _mean_aux(model: SegModel, val_set) -> float:
    totals = []
    for s in val_set:
        ledger = FlopsLedger()
        model.forward(s.tensor, "infer", None, ledger)
        totals.append(ledger.total_aux)
    return float(np.mean(totals)) if totals else 0.0


def _stage_latency(model: SegModel, val_set, repeats: int = 3) -> dict[str, float]:
    """Mean per-stage wall-clock (seconds) over the eval set."""
    acc: dict[str, list] = {}
    for s in val_set:
        for _ in range(repeats):
            _, out = model.forward(s.tensor, "infer", None, FlopsLedger())
            for k, v in out.metrics.latency_per_stage.items():
                acc.setdefault(k, []).append(v)
    return {k: float(statistics.median(v)) for k, v in acc.items()}


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    table = ResultTable()
    handlers = {
        "method-compare": _run_method_compare,
        "t-sweep": _run_t_sweep,
        "voxelization-compare": _run_voxelization_compare,
        "latency-breakdown": _run_latency_breakdown,
        "sampling-compare": _run_sampling_compare,
    }
    handlers[spec.kind](spec, table)
    if spec.out_dir is not None:
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "results.csv")
        _write_plot_data(out / "plotdata.csv", spec, table)
    return table


def _guarded(table: ResultTable, label: str, fn) -> None:
    try:
        table.rows.append(fn())
    except Exception as exc:  # noqa: BLE001 - partial tables are the contract
        log.error("sub-run %s failed: %s", label, exc)
        table.rows.append(ResultRow(label=label, miou=float("nan"),
                                    gflops=float("nan"), latency_ms=float("nan"),
                                    failed=True))


def _run_method_compare(spec: ExperimentSpec, table: ResultTable) -> None:
    for method in ("none", "mbp", "ssp", "gsp"):
        cfg = replace(spec.base, prune_kind=method)
        _guarded(table, method, lambda c=cfg, m=method: _eval_row(m, c))


def _run_t_sweep(spec: ExperimentSpec, table: ResultTable) -> None:
    values = spec.sweep_values or (1.0, 0.9, 0.7, 0.5, 0.3, 0.1)
    kind = spec.base.prune_kind if spec.base.prune_kind != "none" else "gsp"
    for t in values:
        targets = (t, t, t, 1.0)
        cfg = replace(spec.base, prune_kind=kind, targets=targets)
        _guarded(table, f"t={t}", lambda c=cfg, tv=t: _eval_row(f"t={tv}", c))


def _run_sampling_compare(spec: ExperimentSpec, table: ResultTable) -> None:
    for sampling in ("even", "uneven"):
        cfg = replace(spec.base, sampling=sampling)
        _guarded(table, sampling, lambda c=cfg, s=sampling: _eval_row(s, c))


def _run_voxelization_compare(spec: ExperimentSpec, table: ResultTable) -> None:
    cfg = spec.base
    clouds = []
    for i in range(4):
        scene = random_scene(cfg.seed * 100_000 + i, cfg.sweeps, cfg.scene)
        sweeps = [cast_sweep(scene, k) for k in range(cfg.sweeps)]
        sel = SweepSelection(mode="even", window=cfg.sweeps)
        clouds.append(accumulate(sweeps, sel, bounds=scene.extent))
    grid = cfg.grid()

    def timed(fn):
        times = []
        for _ in range(2):  # warmup
            fn(clouds[0])
        for cloud in clouds:
            t0 = time.perf_counter()
            fn(cloud)
            times.append((time.perf_counter() - t0) * 1e3)
        return float(statistics.median(times))

    def run(label, fn):
        lat = timed(fn)
        return ResultRow(label=label, miou=float("nan"), gflops=0.0,
                         latency_ms=lat)

    _guarded(table, "hard", lambda: run(
        "hard", lambda c: hard_voxelize(c, grid, cfg.max_points_per_voxel, cfg.seed)))
    _guarded(table, "dynamic", lambda: run(
        "dynamic", lambda c: dynamic_voxelize(c, grid)))


def _run_latency_breakdown(spec: ExperimentSpec, table: ResultTable) -> None:
    base_cfg = replace(spec.base, prune_kind="none")
    gsp_cfg = replace(spec.base, prune_kind="gsp")
    dataset = build_dataset(base_cfg)
    _guarded(table, "baseline", lambda: _eval_row("baseline", base_cfg, dataset))
    _guarded(table, "gsp", lambda: _eval_row("gsp", gsp_cfg, dataset))


def _write_plot_data(path, spec: ExperimentSpec, table: ResultTable) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["series", "x", "y"])
        for i, row in enumerate(table.rows):
            x = row.label.split("=")[-1]
            try:
                x = float(x)
            except ValueError:
                x = float(i)
            if not row.failed:
                w.writerow(["miou", repr(x), repr(row.miou)])
                w.writerow(["gflops", repr(x), repr(row.gflops)])
                w.writerow(["latency_ms", repr(x), repr(row.latency_ms)])
