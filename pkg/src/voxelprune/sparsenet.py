"""Sparse 3D convolutional encoder with exact FLOPs accounting.

Submanifold convs keep the active set fixed; stride-2 convs coarsen it.
Gradients flow through the shared autodiff tape. Each encoder stage runs
two submanifold convs, an optional pruning layer, and a downsample; after
the last stage the z axis collapses by max into a BEV feature map.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import pruning as pr
from .autodiff import Tape, Var
from .ledger import FlopsLedger
from .voxelize import SparseVoxelTensor, _linear_index

CHECKPOINT_VERSION = "voxelprune-checkpoint v1"


# ---------------------------------------------------------------------------
# convolution layers


@dataclass
class SparseConvLayer:
    name: str
    weight: Var  # (kvol, c_in, c_out)
    bias: Var    # (c_out,)
    kernel_size: int
    mode: str    # "subm" | "down"

    @property
    def c_in(self) -> int:
        return self.weight.value.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.value.shape[2]


def make_conv(name: str, c_in: int, c_out: int, kernel_size: int, mode: str,
              rng: np.random.Generator, dtype=np.float64) -> SparseConvLayer:
    if kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd")
    kvol = kernel_size ** 3
    # He-style init with fan-in discounted to the typical active-neighbor
    # count of a surface-like sparse tensor
    est_active = max(1, int(round(kvol * 0.4)))
    scale = math.sqrt(2.0 / (est_active * c_in))
    w = rng.normal(0.0, scale, size=(kvol, c_in, c_out)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return SparseConvLayer(name, Var(w, f"{name}_w"), Var(b, f"{name}_b"),
                           kernel_size, mode)


def kernel_offsets(kernel_size: int) -> np.ndarray:
    r = kernel_size // 2
    return np.array(list(itertools.product(range(-r, r + 1), repeat=3)),
                    dtype=np.int64)


def _lookup(sorted_lin: np.ndarray, order: np.ndarray, targets: np.ndarray):
    pos = np.searchsorted(sorted_lin, targets)
    pos = np.minimum(pos, len(sorted_lin) - 1) if len(sorted_lin) else pos
    found = np.zeros(len(targets), dtype=bool)
    if len(sorted_lin):
        found = sorted_lin[pos] == targets
    return order[pos[found]] if len(sorted_lin) else np.empty(0, dtype=np.int64), found


def build_pairs(in_coords: np.ndarray, in_dims, out_coords: np.ndarray,
                kernel_size: int, scale: int):
    """(kernel index, out rows, in rows) triplets for every active pair.

    scale=1 gathers at out+offset (submanifold); scale=2 at 2*out+offset.
    """
    offsets = kernel_offsets(kernel_size)
    dims = np.asarray(in_dims)
    if len(in_coords) == 0 or len(out_coords) == 0:
        return []
    # dense row-lookup table over the grid, padded by the kernel radius so
    # every out-of-range neighbor lands on a -1 cell instead of needing a
    # bounds check; queries become one integer add and one gather
    r = kernel_size // 2
    dims_p = dims + 2 * r
    table = np.full(int(np.prod(dims_p)), -1, dtype=np.int64)
    table[_linear_index(in_coords + r, dims_p)] = np.arange(len(in_coords))
    n_out = len(out_coords)
    strides_p = np.array([dims_p[1] * dims_p[2], dims_p[2], 1], dtype=np.int64)
    base = _linear_index(out_coords * scale + r, dims_p)
    hit = table[(offsets @ strides_p)[:, None] + base[None, :]].ravel()
    found = hit >= 0
    in_idx = hit[found]
    flat = np.flatnonzero(found)
    k_all = flat // n_out          # ascending: offset-major layout
    oi_all = flat % n_out
    bounds = np.searchsorted(k_all, np.arange(len(offsets) + 1))
    return [(k, oi_all[bounds[k]:bounds[k + 1]], in_idx[bounds[k]:bounds[k + 1]])
            for k in range(len(offsets)) if bounds[k + 1] > bounds[k]]


def downsample_coords(coords: np.ndarray, dims) -> tuple[np.ndarray, tuple]:
    out_dims = tuple((d + 1) // 2 for d in dims)
    if len(coords) == 0:
        return coords.copy(), out_dims
    parents = coords // 2
    lin = _linear_index(parents, out_dims)
    _, first = np.unique(lin, return_index=True)
    return parents[np.sort(first)], out_dims


def sparse_conv_forward(layer: SparseConvLayer, x: SparseVoxelTensor,
                        tape: Optional[Tape], ledger: FlopsLedger,
                        pairs=None) -> SparseVoxelTensor:
    if x.channel_count != layer.c_in:
        raise ValueError(f"{layer.name}: expected {layer.c_in} channels, "
                         f"got {x.channel_count}")
    feats = x.features if isinstance(x.features, Var) else Var(np.asarray(x.features))
    if layer.mode == "subm":
        out_coords, out_dims, out_stride = x.coords, x.dims, x.stride
        scale = 1
    elif layer.mode == "down":
        out_coords, out_dims = downsample_coords(x.coords, x.dims)
        out_stride = x.stride * 2
        scale = 2
    else:
        raise ValueError(f"unknown conv mode {layer.mode!r}")
    if pairs is None:
        pairs = build_pairs(x.coords, x.dims, out_coords, layer.kernel_size, scale)
    n_out = len(out_coords)
    dtype = feats.value.dtype
    w = layer.weight
    out_val = np.tile(layer.bias.value.astype(dtype), (n_out, 1))
    n_pairs = 0
    # per kernel offset each output row occurs at most once, so plain
    # fancy-index accumulation is exact (no duplicate indices)
    for k, oi, ii in pairs:
        out_val[oi] += feats.value[ii] @ w.value[k]
        n_pairs += len(oi)
    ledger.charge_conv(layer.name, n_pairs, layer.c_in, layer.c_out)
    out = Var(out_val)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            if feats.grad is None:
                feats.grad = np.zeros_like(feats.value)
            if w.grad is None:
                w.grad = np.zeros_like(w.value)
            # each input row also occurs at most once per offset
            for k, oi, ii in pairs:
                gp = g[oi]
                feats.grad[ii] += gp @ w.value[k].T
                w.grad[k] += feats.value[ii].T @ gp
            ad.accum(layer.bias, g.sum(axis=0))
        tape.record(f"conv:{layer.name}", bwd)
    return SparseVoxelTensor(coords=out_coords, features=out, stride=out_stride,
                             dims=out_dims)


# ---------------------------------------------------------------------------
# encoder


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    prune_kinds: tuple[str, ...] = ("none", "none", "none", "none")
    targets: tuple[float, ...] = (0.5, 0.5, 0.5, 1.0)
    kernel_size: int = 3
    ssp_threshold: float = 0.5
    dt_scale: float = 40.0

    def __post_init__(self):
        if not (len(self.widths) == len(self.prune_kinds) == len(self.targets)):
            raise ValueError("widths, prune_kinds and targets must align")
        for k in self.prune_kinds:
            if k not in ("none", "mbp", "ssp", "gsp"):
                raise ValueError(f"unknown pruning kind {k!r}")
        for t in self.targets:
            if not (0.0 < t <= 1.0):
                raise ValueError("targets must lie in (0, 1]")


@dataclass
class RunMetrics:
    flops_per_layer: dict = field(default_factory=dict)
    aux_per_layer: dict = field(default_factory=dict)
    latency_per_stage: dict = field(default_factory=dict)
    activation_rates: list = field(default_factory=list)
    sites_per_stage: dict = field(default_factory=dict)
    total_flops: int = 0
    total_aux: int = 0
    wall_clock: float = 0.0
    accuracy: Optional[float] = None


@dataclass
class EncoderOutput:
    bev: SparseVoxelTensor          # coords (U, 3) with z = 0, final stride
    metrics: RunMetrics
    decisions: list


class SparseEncoder:
    """Four-stage submanifold encoder with pruning hooks before each
    downsample."""

    def __init__(self, cfg: EncoderConfig, in_channels: int = 4, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xE0C])
        k = cfg.kernel_size
        w = cfg.widths
        self.stem = make_conv("stem", in_channels, w[0], k, "subm", rng)
        self.stages = []
        for i in range(len(w)):
            w_next = w[i + 1] if i + 1 < len(w) else w[i]
            stage = {
                "conv_a": make_conv(f"s{i + 1}a", w[i], w[i], k, "subm", rng),
                "conv_b": make_conv(f"s{i + 1}b", w[i], w[i], k, "subm", rng),
                "down": make_conv(f"s{i + 1}down", w[i], w_next, k, "down", rng),
                "classifier": None,
            }
            kind = cfg.prune_kinds[i]
            if kind in ("ssp", "gsp") and cfg.targets[i] < 1.0:
                stage["classifier"] = pr.PruningClassifier.zero_init(w[i])
            self.stages.append(stage)

    # -- parameters -------------------------------------------------------

    def param_dict(self) -> dict[str, Var]:
        params = {"stem_w": self.stem.weight, "stem_b": self.stem.bias}
        for i, st in enumerate(self.stages):
            for key in ("conv_a", "conv_b", "down"):
                layer = st[key]
                params[f"{layer.name}_w"] = layer.weight
                params[f"{layer.name}_b"] = layer.bias
            if st["classifier"] is not None:
                params[f"s{i + 1}prune_w"] = st["classifier"].weight
                params[f"s{i + 1}prune_b"] = st["classifier"].bias
        return params

    def params(self) -> list[Var]:
        return list(self.param_dict().values())

    # -- forward ----------------------------------------------------------

    def _normalize(self, x: SparseVoxelTensor, tape: Optional[Tape]) -> SparseVoxelTensor:
        # fixed affine rescale of the raw voxel features; not a learned layer
        feats = x.feature_array
        dims = np.asarray(x.dims, dtype=np.float64)
        norm = feats.astype(np.float64, copy=True)
        if len(norm):
            origin = np.asarray(x.metadata.get("grid_origin", (0.0, 0.0, 0.0)))
            vs = np.asarray(x.metadata.get("grid_voxel", (1.0, 1.0, 1.0)))
            units = (feats[:, :3] - origin) / vs  # meters -> voxel units
            norm[:, :3] = units / dims - 0.5
            norm[:, 3] = feats[:, 3] / self.cfg.dt_scale
        return SparseVoxelTensor(coords=x.coords, features=Var(norm),
                                 stride=x.stride, dims=x.dims,
                                 metadata=dict(x.metadata))

    def forward(self, x: SparseVoxelTensor, mode: str, tape: Optional[Tape],
                ledger: Optional[FlopsLedger] = None,
                noise: Optional[pr.GumbelNoiseSource] = None) -> EncoderOutput:
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        if x.stride != 1:
            raise ValueError("encoder expects a stride-1 tensor")
        ledger = ledger if ledger is not None else FlopsLedger()
        metrics = RunMetrics()
        t_total = time.perf_counter()

        cur = self._normalize(x, tape)
        t0 = time.perf_counter()
        cur = sparse_conv_forward(self.stem, cur, tape, ledger)
        cur = SparseVoxelTensor(cur.coords, ad.relu(tape, cur.features),
                                cur.stride, cur.dims)
        metrics.latency_per_stage["stem"] = time.perf_counter() - t0

        decisions = []
        for i, st in enumerate(self.stages):
            stage_name = f"stage{i + 1}"
            kind = self.cfg.prune_kinds[i]
            target = self.cfg.targets[i]
            active = kind != "none" and target < 1.0
            t0 = time.perf_counter()
            metrics.sites_per_stage[stage_name] = cur.num_active

            bypass = None
            if active and kind == "mbp":
                work, dec = pr.mbp_forward(cur, target, tape, ledger,
                                           layer=f"s{i + 1}prune")
                drop_idx = np.flatnonzero(dec.keep_mask == 0)
                feats = cur.features if isinstance(cur.features, Var) else Var(np.asarray(cur.features))
                bypass = (cur.coords[drop_idx],
                          ad.gather_rows(tape, feats, drop_idx))
                decisions.append(dec)
            else:
                work = cur

            # both submanifold convs share the active set, so the index
            # pairs are built once and reused
            subm_pairs = build_pairs(work.coords, work.dims, work.coords,
                                     self.cfg.kernel_size, 1)
            for key in ("conv_a", "conv_b"):
                work = sparse_conv_forward(st[key], work, tape, ledger,
                                           pairs=subm_pairs)
                work = SparseVoxelTensor(work.coords, ad.relu(tape, work.features),
                                         work.stride, work.dims)

            if bypass is not None:
                coords = np.concatenate([work.coords, bypass[0]], axis=0)
                feats = ad.concat_rows(tape, work.features, bypass[1])
                work = SparseVoxelTensor(coords, feats, work.stride, work.dims)

            if active and kind == "ssp":
                work, dec = pr.ssp_forward(work, st["classifier"], mode,
                                           self.cfg.ssp_threshold, tape, ledger,
                                           layer=f"s{i + 1}prune")
                decisions.append(dec)
            elif active and kind == "gsp":
                gnoise = noise if (mode == "train" and noise is not None) else \
                    pr.GumbelNoiseSource(np.random.default_rng(0), enabled=False)
                work, dec = pr.gsp_forward(work, st["classifier"], gnoise, mode,
                                           tape, ledger, layer=f"s{i + 1}prune")
                decisions.append(dec)
            elif not active:
                decisions.append(pr.PruneDecision(
                    keep_mask=np.ones(work.num_active, dtype=np.int8),
                    soft_probs=np.ones(work.num_active),
                    actual_rate=1.0, kind="none"))

            cur = sparse_conv_forward(st["down"], work, tape, ledger)
            cur = SparseVoxelTensor(cur.coords, ad.relu(tape, cur.features),
                                    cur.stride, cur.dims)
            metrics.latency_per_stage[stage_name] = time.perf_counter() - t0

        # collapse z by max into BEV columns
        t0 = time.perf_counter()
        feats = cur.features if isinstance(cur.features, Var) else Var(np.asarray(cur.features))
        col = cur.coords[:, 0] * cur.dims[1] + cur.coords[:, 1]
        uniq, bev_feats = ad.column_max(tape, feats, col)
        bev_coords = np.zeros((len(uniq), 3), dtype=np.int64)
        bev_coords[:, 0] = uniq // cur.dims[1]
        bev_coords[:, 1] = uniq % cur.dims[1]
        bev = SparseVoxelTensor(coords=bev_coords, features=bev_feats,
                                stride=cur.stride,
                                dims=(cur.dims[0], cur.dims[1], 1))
        metrics.latency_per_stage["bev_collapse"] = time.perf_counter() - t0

        metrics.flops_per_layer = ledger.flops_by_layer()
        metrics.aux_per_layer = ledger.aux_by_layer()
        metrics.total_flops = ledger.total_flops
        metrics.total_aux = ledger.total_aux
        metrics.activation_rates = [d.actual_rate for d in decisions]
        metrics.wall_clock = time.perf_counter() - t_total
        return EncoderOutput(bev=bev, metrics=metrics, decisions=decisions)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, Var], extra: Optional[dict] = None) -> None:
    arrays = {f"param/{k}": v.value for k, v in params.items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    if extra:
        for k, v in extra.items():
            arrays[f"extra/{k}"] = np.asarray(v)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        version = str(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        params = {k[len("param/"):]: data[k] for k in data.files
                  if k.startswith("param/")}
        extra = {k[len("extra/"):]: data[k] for k in data.files
                 if k.startswith("extra/")}
    return params, extra


def restore_params(params: dict[str, Var], arrays: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    for k, var in params.items():
        if var.value.shape != arrays[k].shape:
            raise ValueError(f"shape mismatch for {k}")
        var.value = arrays[k].copy()
