"""End-to-end training of the sparse encoder plus a BEV segmentation head
on synthetic scenes, with activation-rate tracking per epoch.
"""
from __future__ import annotations

import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import pruning as pr
from .autodiff import SGD, Tape, Var
from .ledger import FlopsLedger
from .scenesim import (BevGridSpec, SceneParams, SweepSelection, accumulate,
                       bev_labels, cast_sweep, random_scene)
from .sparsenet import (EncoderConfig, SparseEncoder, load_checkpoint,
                        restore_params, save_checkpoint)
from .voxelize import SparseVoxelTensor, VoxelGridSpec, dynamic_voxelize, hard_voxelize


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    sweeps: int = 10
    prune_kind: str = "none"           # none | mbp | ssp | gsp
    targets: tuple[float, ...] = (0.5, 0.5, 0.5, 1.0)
    reg_weight: float = 1.0
    reg_warmup_epochs: int = 0         # linearly ramp reg_weight in over these epochs
    lr: float = 0.05
    classifier_lr_scale: float = 100.0  # relative step size for pruning classifiers
    momentum: float = 0.9
    epochs: int = 36
    batch_size: int = 1
    seed: int = 0
    sampling: str = "even"             # even | uneven
    n_scenes: int = 24
    val_fraction: float = 0.2
    widths: tuple[int, ...] = (16, 32, 64, 128)
    voxelizer: str = "dynamic"         # dynamic | hard
    max_points_per_voxel: int = 8
    scene: SceneParams = field(default_factory=SceneParams)
    voxel_size: float = 0.25
    grid_dims: tuple[int, int, int] = (128, 128, 16)

    def __post_init__(self):
        if self.prune_kind not in ("none", "mbp", "ssp", "gsp"):
            raise ValueError(f"unknown pruning kind {self.prune_kind!r}")
        if self.sampling not in ("even", "uneven"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if not all(0.0 < t <= 1.0 for t in self.targets):
            raise ValueError("targets must lie in (0, 1]")
        if self.reg_weight < 0 or self.epochs < 1:
            raise ValueError("reg_weight must be >= 0 and epochs >= 1")

    def grid(self) -> VoxelGridSpec:
        # ego-centric: the grid is anchored at the current sensor position
        nx, ny, _ = self.grid_dims
        zmin, _ = self.scene.extent[4], self.scene.extent[5]
        half_x = nx * self.voxel_size / 2.0
        half_y = ny * self.voxel_size / 2.0
        return VoxelGridSpec(origin=(-half_x, -half_y, zmin - self.scene.sensor_height),
                             voxel_size=(self.voxel_size,) * 3,
                             grid_dims=self.grid_dims)

    def bev_grid(self, sensor_xy=(0.0, 0.0)) -> BevGridSpec:
        """World-frame BEV grid matching the ego-centric voxel grid."""
        nx, ny, _ = self.grid_dims
        if nx % 16 or ny % 16:
            raise ValueError("grid x/y dims must be divisible by 16")
        half_x = nx * self.voxel_size / 2.0
        half_y = ny * self.voxel_size / 2.0
        return BevGridSpec(origin=(sensor_xy[0] - half_x, sensor_xy[1] - half_y),
                           cell_size=self.voxel_size * 16,
                           dims=(nx // 16, ny // 16))

    def encoder_config(self) -> EncoderConfig:
        kinds = tuple(self.prune_kind if t < 1.0 else "none" for t in self.targets)
        if self.prune_kind == "none":
            kinds = ("none",) * len(self.targets)
        return EncoderConfig(widths=self.widths, prune_kinds=kinds,
                             targets=self.targets,
                             dt_scale=float(max(self.sweeps, 1)))


@dataclass
class EpochReport:
    epoch: int
    mean_task_loss: float
    mean_reg_loss: float
    activation_rates: tuple[float, ...]
    val_miou: float
    mean_flops: float
    mean_latency_ms: float

    CSV_FIELDS = ("epoch", "mean_task_loss", "mean_reg_loss", "activation_rates",
                  "val_miou", "mean_flops", "mean_latency_ms")


# ---------------------------------------------------------------------------
# model = encoder + segmentation head


class SegModel:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.encoder = SparseEncoder(cfg.encoder_config(), in_channels=4,
                                     seed=cfg.seed)
        rng = np.random.default_rng([cfg.seed, 0x5E6])
        c = cfg.widths[-1]
        self.head_w = Var(rng.normal(0.0, (2.0 / c) ** 0.5, size=(c, 2)), "head_w")
        self.head_b = Var(np.zeros(2), "head_b")
        # logits used for BEV cells that end up with no active voxel
        self.empty_logits = Var(np.zeros(2), "empty_logits")

    def param_dict(self) -> dict[str, Var]:
        params = self.encoder.param_dict()
        params.update({"head_w": self.head_w, "head_b": self.head_b,
                       "empty_logits": self.empty_logits})
        return params

    def params(self) -> list[Var]:
        return list(self.param_dict().values())

    def forward(self, sample: SparseVoxelTensor, mode: str, tape: Optional[Tape],
                ledger: Optional[FlopsLedger] = None,
                noise: Optional[pr.GumbelNoiseSource] = None):
        out = self.encoder.forward(sample, mode, tape, ledger, noise)
        bev = out.bev
        h, w = bev.dims[0], bev.dims[1]
        cell_idx = bev.coords[:, 0] * w + bev.coords[:, 1]
        occ_logits = ad.linear(tape, bev.features, self.head_w, self.head_b)
        logits = ad.compose_rows(tape, cell_idx, occ_logits, self.empty_logits,
                                 h * w)
        return logits, out


def seg_loss(tape: Optional[Tape], bev_logits: Var, labels: np.ndarray) -> Var:
    """Mean two-class cross-entropy over all BEV cells."""
    flat = labels.reshape(-1)
    if bev_logits.value.shape[0] != flat.shape[0]:
        raise ValueError("logits and labels cover different grids")
    if flat.size == 0:
        raise ValueError("no labeled cells; bad grid configuration")
    return ad.softmax_xent(tape, bev_logits, flat)


def miou(pred: np.ndarray, labels: np.ndarray, n_classes: int = 2) -> float:
    ious = []
    for c in range(n_classes):
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = int(((pred != c) & (labels == c)).sum())
        denom = tp + fp + fn
        ious.append(1.0 if denom == 0 else tp / denom)
    return float(np.mean(ious))


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Sample:
    tensor: SparseVoxelTensor
    labels: np.ndarray
    scene_seed: int


def _build_sample(cfg: TrainConfig, scene_seed: int) -> Sample:
    spec = random_scene(scene_seed, cfg.sweeps, cfg.scene)
    sweeps = [cast_sweep(spec, i) for i in range(cfg.sweeps)]
    sel = SweepSelection(mode=cfg.sampling, window=cfg.sweeps, seed=scene_seed)
    cloud = accumulate(sweeps, sel)  # sensor frame; voxelize drops out-of-grid
    grid = cfg.grid()
    if cfg.voxelizer == "dynamic":
        tensor = dynamic_voxelize(cloud, grid)
    else:
        tensor = hard_voxelize(cloud, grid, cfg.max_points_per_voxel,
                               seed=scene_seed)
    sensor_xy = spec.trajectory[0].translation[:2]
    labels = bev_labels(spec, cfg.bev_grid(sensor_xy))
    return Sample(tensor=tensor, labels=labels, scene_seed=scene_seed)


def build_dataset(cfg: TrainConfig) -> tuple[list[Sample], list[Sample]]:
    """Generate scenes; the last val_fraction of seeds form the validation
    split. VOXELPRUNE_THREADS caps the generation worker threads."""
    seeds = [cfg.seed * 100_000 + i for i in range(cfg.n_scenes)]
    threads = int(os.environ.get("VOXELPRUNE_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(lambda s: _build_sample(cfg, s), seeds))
    else:
        samples = [_build_sample(cfg, s) for s in seeds]
    n_val = max(1, int(round(cfg.val_fraction * cfg.n_scenes)))
    return samples[:-n_val], samples[-n_val:]


# ---------------------------------------------------------------------------
# training loop


def _reg_terms(cfg: TrainConfig, decisions) -> tuple[list, list]:
    decs, targets = [], []
    kinds = cfg.encoder_config().prune_kinds
    for dec, kind, t in zip(decisions, kinds, cfg.targets):
        if kind in ("ssp", "gsp"):
            decs.append(dec)
            targets.append(t)
    return decs, targets


def train_step(model: SegModel, sample: Sample, opt: SGD, noise_rng,
               reg_weight: Optional[float] = None) -> tuple[float, float, list]:
    cfg = model.cfg
    if reg_weight is None:
        reg_weight = cfg.reg_weight
    tape = Tape()
    ledger = FlopsLedger()
    noise = pr.GumbelNoiseSource(noise_rng)
    logits, out = model.forward(sample.tensor, "train", tape, ledger, noise)
    task = seg_loss(tape, logits, sample.labels)
    decs, targets = _reg_terms(cfg, out.decisions)
    reg = pr.sparse_reg_loss(decs, targets, tape) if decs else Var(np.asarray(0.0))
    loss = ad.add(tape, task, ad.scale(tape, reg, reg_weight)) if decs else task
    if not np.isfinite(loss.value):
        layer = _first_nonfinite_layer(model, sample)
        raise TrainingDiverged(f"non-finite loss; first bad layer: {layer}")
    opt.zero_grad()
    tape.backward(loss)
    opt.step()
    return float(task.value), float(reg.value), [d.actual_rate for d in out.decisions]


def _first_nonfinite_layer(model: SegModel, sample: Sample) -> str:
    """Replay the forward pass stage by stage to locate the first NaN/inf."""
    from .sparsenet import sparse_conv_forward
    enc = model.encoder
    ledger = FlopsLedger()
    cur = enc._normalize(sample.tensor, None)
    cur = sparse_conv_forward(enc.stem, cur, None, ledger)
    if not np.isfinite(cur.feature_array).all():
        return "stem"
    for i, st in enumerate(enc.stages):
        for key in ("conv_a", "conv_b", "down"):
            cur = sparse_conv_forward(st[key], cur, None, ledger)
            if not np.isfinite(cur.feature_array).all():
                return st[key].name
    return "head"


def train(cfg: TrainConfig, dataset=None) -> tuple[list[EpochReport], SegModel]:
    """Full training run; deterministic for a fixed config."""
    if dataset is None:
        dataset = build_dataset(cfg)
    train_set, val_set = dataset
    model = SegModel(cfg)
    named = model.param_dict()
    params = list(named.values())
    scales = [cfg.classifier_lr_scale if "prune" in name else 1.0
              for name in named]
    opt = SGD(params, lr=cfg.lr, momentum=cfg.momentum, lr_scales=scales)
    reports = []
    n_layers = len(cfg.targets)
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng([cfg.seed, 0x0DD, epoch])
        order = order_rng.permutation(len(train_set))
        task_losses, reg_losses = [], []
        rate_sums = np.zeros(n_layers)
        rate_counts = np.zeros(n_layers)
        if cfg.reg_warmup_epochs > 0:
            reg_w = cfg.reg_weight * min(1.0, (epoch + 1) / cfg.reg_warmup_epochs)
        else:
            reg_w = cfg.reg_weight
        for step, idx in enumerate(order):
            noise_rng = np.random.default_rng([cfg.seed, 0x6B, epoch, step])
            t_loss, r_loss, rates = train_step(model, train_set[idx], opt,
                                               noise_rng, reg_weight=reg_w)
            task_losses.append(t_loss)
            reg_losses.append(r_loss)
            for j, r in enumerate(rates[:n_layers]):
                rate_sums[j] += r
                rate_counts[j] += 1
        val = evaluate(model, val_set, warmup=0)
        rates = tuple(float(rate_sums[j] / max(rate_counts[j], 1))
                      for j in range(n_layers))
        reports.append(EpochReport(
            epoch=epoch,
            mean_task_loss=float(np.mean(task_losses)),
            mean_reg_loss=float(np.mean(reg_losses)),
            activation_rates=rates,
            val_miou=val.val_miou,
            mean_flops=val.mean_flops,
            mean_latency_ms=val.mean_latency_ms,
        ))
    return reports, model


def evaluate(model: SegModel, dataset: list[Sample], warmup: int = 5) -> EpochReport:
    """Inference pass over a dataset: mIoU, mean FLOPs, median latency."""
    for _ in range(warmup):
        if dataset:
            model.forward(dataset[0].tensor, "infer", None, FlopsLedger())
    mious, flops, times = [], [], []
    rates = None
    for sample in dataset:
        ledger = FlopsLedger()
        t0 = time.perf_counter()
        logits, out = model.forward(sample.tensor, "infer", None, ledger)
        times.append((time.perf_counter() - t0) * 1e3)
        pred = logits.value.argmax(axis=1).reshape(sample.labels.shape)
        mious.append(miou(pred, sample.labels))
        flops.append(ledger.total_flops)
        r = np.array(out.metrics.activation_rates, dtype=float)
        rates = r if rates is None else rates + r
    n = max(len(dataset), 1)
    return EpochReport(
        epoch=-1,
        mean_task_loss=float("nan"),
        mean_reg_loss=float("nan"),
        activation_rates=tuple((rates / n).tolist()) if rates is not None else (),
        val_miou=float(np.mean(mious)) if mious else float("nan"),
        mean_flops=float(np.mean(flops)) if flops else 0.0,
        mean_latency_ms=float(statistics.median(times)) if times else 0.0,
    )


# ---------------------------------------------------------------------------
# persistence helpers


def save_model(path, model: SegModel) -> None:
    save_checkpoint(path, model.param_dict(),
                    extra={"targets": np.array(model.cfg.targets),
                           "widths": np.array(model.cfg.widths)})


def load_model(path, cfg: TrainConfig) -> SegModel:
    arrays, _ = load_checkpoint(path)
    model = SegModel(cfg)
    restore_params(model.param_dict(), arrays)
    return model


def write_epoch_csv(path, reports: list[EpochReport], n_layers: int) -> None:
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        rate_cols = [f"rate_layer{i + 1}" for i in range(n_layers)]
        w.writerow(["epoch", "mean_task_loss", "mean_reg_loss", *rate_cols,
                    "val_miou", "mean_flops", "mean_latency_ms"])
        for r in reports:
            rates = list(r.activation_rates) + [float("nan")] * (n_layers - len(r.activation_rates))
            w.writerow([r.epoch, repr(r.mean_task_loss), repr(r.mean_reg_loss),
                        *[repr(x) for x in rates[:n_layers]],
                        repr(r.val_miou), repr(r.mean_flops),
                        repr(r.mean_latency_ms)])
