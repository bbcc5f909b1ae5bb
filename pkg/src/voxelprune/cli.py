"""Command-line entry point: generate / train / eval / bench / inspect."""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import ExperimentSpec, run_experiment
from .config import ConfigError, load_config, write_config
from .scenesim import load_cloud, save_cloud
from .sparsenet import load_checkpoint
from .trainer import (TrainConfig, build_dataset, evaluate, load_model,
                      save_model, train, write_epoch_csv)

USAGE_EXIT = 2
RUNTIME_EXIT = 1


def _load_cfg(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg, _ = load_config(args.config)
    else:
        cfg = TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_generate(args) -> int:
    if args.scenes < 1:
        print("error: --scenes must be >= 1", file=sys.stderr)
        return USAGE_EXIT
    cfg = _load_cfg(args)
    cfg = replace(cfg, n_scenes=args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = build_dataset(cfg)
    from .scenesim import (AccumulatedCloud, SweepSelection, accumulate,
                           cast_sweep, random_scene)
    for i, sample in enumerate(train_set + val_set):
        scene = random_scene(sample.scene_seed, cfg.sweeps, cfg.scene)
        sweeps = [cast_sweep(scene, k) for k in range(cfg.sweeps)]
        sel = SweepSelection(mode=cfg.sampling, window=cfg.sweeps,
                             seed=sample.scene_seed)
        cloud = accumulate(sweeps, sel, bounds=scene.extent)
        save_cloud(out / f"scene_{i:04d}.cloud", cloud)
        np.savetxt(out / f"scene_{i:04d}.labels.csv", sample.labels,
                   fmt="%d", delimiter=",")
    write_config(out / "dataset.cfg", cfg)
    print(f"wrote {len(train_set) + len(val_set)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, model = train(cfg)
    write_epoch_csv(out / "epochs.csv", reports, n_layers=len(cfg.targets))
    with open(out / "rates_per_layer.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "layer", "actual_rate"])
        for r in reports:
            for j, rate in enumerate(r.activation_rates):
                w.writerow([r.epoch, j + 1, repr(rate)])
    save_model(out / "checkpoint.vp", model)
    print(f"final val mIoU {reports[-1].val_miou:.4f}; "
          f"checkpoint at {out / 'checkpoint.vp'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model = load_model(args.checkpoint, cfg)
    _, val_set = build_dataset(cfg)
    rep = evaluate(model, val_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["val_miou", "mean_flops", "mean_latency_ms",
                    *[f"rate_layer{i + 1}" for i in range(len(rep.activation_rates))]])
        w.writerow([repr(rep.val_miou), repr(rep.mean_flops),
                    repr(rep.mean_latency_ms),
                    *[repr(r) for r in rep.activation_rates]])
    print(f"val mIoU {rep.val_miou:.4f}  GFLOPs {rep.mean_flops / 1e9:.3f}")
    return 0


def cmd_bench(args) -> int:
    cfg, bench_opts = load_config(args.config)
    kind = bench_opts.get("kind")
    if kind is None:
        print("error: config needs a [bench] section with a 'kind' key",
              file=sys.stderr)
        return USAGE_EXIT
    sweep_values = bench_opts.get("t_values") or bench_opts.get("sweep_values") or ()
    spec = ExperimentSpec(kind=kind, base=cfg, sweep_values=tuple(sweep_values),
                          out_dir=args.out)
    table = run_experiment(spec)
    print(f"wrote {len(table.rows)} rows to {Path(args.out) / 'results.csv'}")
    return RUNTIME_EXIT if table.any_failed else 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        params, extra = load_checkpoint(args.checkpoint)
        for name in sorted(params):
            print(f"{name}  shape={params[name].shape}  dtype={params[name].dtype}")
        for name in sorted(extra):
            print(f"[extra] {name} = {extra[name]}")
        return 0
    if args.cloud:
        cloud = load_cloud(args.cloud)
        pts = cloud.points
        print(f"points: {len(pts)}")
        print(f"source_sweep_count: {cloud.source_sweep_count}")
        if len(pts):
            print(f"x range: [{pts[:, 0].min():.3f}, {pts[:, 0].max():.3f}]")
            print(f"y range: [{pts[:, 1].min():.3f}, {pts[:, 1].max():.3f}]")
            print(f"z range: [{pts[:, 2].min():.3f}, {pts[:, 2].max():.3f}]")
            print(f"delta_t range: [{int(pts[:, 3].min())}, {int(pts[:, 3].max())}]")
        return 0
    print("error: inspect needs --checkpoint or --cloud", file=sys.stderr)
    return USAGE_EXIT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxelprune",
                                description="Sparse voxel encoder with learned "
                                            "spatial pruning on synthetic scenes")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset to disk")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="run an experiment spec")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)

    i = sub.add_parser("inspect", help="dump checkpoint or cloud file stats")
    i.add_argument("--checkpoint")
    i.add_argument("--cloud")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_EXIT
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
