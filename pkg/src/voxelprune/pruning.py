"""Three interchangeable spatial pruning layers.

MBP ranks voxels by feature magnitude and lets the low half bypass the stage
convolutions. SSP learns a keep probability and scales features with it
during training, thresholding at inference. GSP samples a hard binary keep
decision through Gumbel noise and propagates gradients straight through the
soft relaxation, so training and inference see the same data distribution.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .ledger import FlopsLedger
from .voxelize import SparseVoxelTensor

log = logging.getLogger(__name__)

# counts GSP calls that pruned every voxel (not an error)
EMPTY_PRUNE_WARNINGS = {"count": 0}


@dataclass
class PruningClassifier:
    """Two-way linear classifier over voxel features."""

    weight: Var  # (C, 2)
    bias: Var    # (2,)

    @staticmethod
    def zero_init(channels: int, dtype=np.float64) -> "PruningClassifier":
        # zero init makes the initial keep probability exactly 0.5 everywhere
        return PruningClassifier(weight=Var(np.zeros((channels, 2), dtype=dtype), "prune_w"),
                                 bias=Var(np.zeros(2, dtype=dtype), "prune_b"))

    def logits(self, tape: Optional[Tape], feats: Var) -> Var:
        return ad.linear(tape, feats, self.weight, self.bias)


@dataclass
class GumbelNoiseSource:
    """Seeded uniform noise mapped to Gumbel(0, 1); clamped to stay finite."""

    rng: np.random.Generator
    eps_min: float = 1e-9
    enabled: bool = True

    def draw(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.enabled:
            z = np.zeros(n)
            return z, z.copy()
        u = self.rng.random((2, n))
        u = np.clip(u, self.eps_min, 1.0 - self.eps_min)
        g = -np.log(-np.log(u))
        return g[0], g[1]


@dataclass
class PruneDecision:
    keep_mask: np.ndarray           # (N,) {0,1}
    soft_probs: np.ndarray          # (N,) p or p_hat values
    actual_rate: float
    kind: str
    q_var: Optional[Var] = None     # regularizer input: p for ssp, z for gsp
    keep_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def _select(tensor: SparseVoxelTensor, feats_var: Var, keep_idx: np.ndarray,
            tape: Optional[Tape]) -> tuple[SparseVoxelTensor, Var]:
    kept = ad.gather_rows(tape, feats_var, keep_idx)
    out = SparseVoxelTensor(coords=tensor.coords[keep_idx], features=kept,
                            stride=tensor.stride, dims=tensor.dims)
    return out, kept


def _as_var(tensor: SparseVoxelTensor) -> Var:
    f = tensor.features
    return f if isinstance(f, Var) else Var(np.asarray(f))


def mbp_forward(x: SparseVoxelTensor, keep_fraction: float,
                tape: Optional[Tape], ledger: FlopsLedger,
                layer: str = "mbp") -> tuple[SparseVoxelTensor, PruneDecision]:
    """Keep the top ceil(keep_fraction * N) voxels by feature L2 norm.

    Ties break toward the lower voxel coordinate (lexicographic). The sort
    is charged to the auxiliary column, never to FLOPs. No parameters, no
    gradient through the mask.
    """
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must be in (0, 1]")
    n = x.num_active
    if n == 0:
        return x, PruneDecision(keep_mask=np.empty(0, dtype=np.int8),
                                soft_probs=np.empty(0),
                                actual_rate=keep_fraction, kind="mbp")
    feats_var = _as_var(x)
    norms = np.linalg.norm(feats_var.value, axis=1)
    c = x.coords
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], -norms))
    ledger.charge_aux(layer, "sort", int(n * max(1, math.ceil(math.log2(max(n, 2))))))
    n_keep = math.ceil(keep_fraction * n)
    keep_idx = np.sort(order[:n_keep])
    mask = np.zeros(n, dtype=np.int8)
    mask[keep_idx] = 1
    out, _ = _select(x, feats_var, keep_idx, tape)
    ledger.charge_aux(layer, "gather", int(n_keep * x.channel_count))
    dec = PruneDecision(keep_mask=mask, soft_probs=norms,
                        actual_rate=float(mask.mean()), kind="mbp",
                        keep_idx=keep_idx)
    return out, dec


def ssp_forward(x: SparseVoxelTensor, classifier: PruningClassifier, mode: str,
                threshold: float, tape: Optional[Tape], ledger: FlopsLedger,
                layer: str = "ssp") -> tuple[SparseVoxelTensor, PruneDecision]:
    """Softmax spatial pruning.

    train: every voxel is kept, its feature scaled by the keep probability.
    infer: voxels with p >= threshold are kept unscaled (index selection).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    n = x.num_active
    if n == 0:
        return x, PruneDecision(keep_mask=np.empty(0, dtype=np.int8),
                                soft_probs=np.empty(0), actual_rate=1.0, kind="ssp")
    feats_var = _as_var(x)
    logits = classifier.logits(tape, feats_var)
    ledger.charge_conv(layer, n, x.channel_count, 2)
    p = ad.keep_prob(tape, logits)
    if mode == "train":
        scaled = ad.row_scale(tape, feats_var, p)
        out = SparseVoxelTensor(coords=x.coords, features=scaled,
                                stride=x.stride, dims=x.dims)
        mask = np.ones(n, dtype=np.int8)
        dec = PruneDecision(keep_mask=mask, soft_probs=p.value.copy(),
                            actual_rate=1.0, kind="ssp", q_var=p,
                            keep_idx=np.arange(n))
        return out, dec
    mask = (p.value >= threshold).astype(np.int8)
    dec = PruneDecision(keep_mask=mask, soft_probs=p.value.copy(),
                        actual_rate=float(mask.mean()), kind="ssp", q_var=p)
    dec = guard_nonempty(x, dec)
    keep_idx = np.flatnonzero(dec.keep_mask)
    dec.keep_idx = keep_idx
    out, _ = _select(x, feats_var, keep_idx, tape)
    ledger.charge_aux(layer, "gather", int(len(keep_idx) * x.channel_count))
    return out, dec


def gsp_forward(x: SparseVoxelTensor, classifier: PruningClassifier,
                noise: GumbelNoiseSource, mode: str, tape: Optional[Tape],
                ledger: FlopsLedger,
                layer: str = "gsp") -> tuple[SparseVoxelTensor, PruneDecision]:
    """Gumbel spatial pruning with a straight-through hard decision.

    Both modes index-select the kept voxels, so pruning saves computation in
    training as well; with noise disabled the train path is bitwise
    identical to inference.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    n = x.num_active
    if n == 0:
        return x, PruneDecision(keep_mask=np.empty(0, dtype=np.int8),
                                soft_probs=np.empty(0), actual_rate=1.0, kind="gsp")
    feats_var = _as_var(x)
    logits = classifier.logits(tape, feats_var)
    ledger.charge_conv(layer, n, x.channel_count, 2)
    if mode == "train":
        g0, g1 = noise.draw(n)
    else:
        g0 = g1 = np.zeros(n)
    z, phat = ad.gumbel_keep(tape, logits, g0, g1)
    mask = z.value.astype(np.int8)
    dec = PruneDecision(keep_mask=mask, soft_probs=phat,
                        actual_rate=float(mask.mean()), kind="gsp", q_var=z)
    # the degenerate-noise train path is the inference path, so the
    # empty-output guard applies to both; noisy training may go empty
    rescued = False
    if mode == "infer" or not noise.enabled:
        dec = guard_nonempty(x, dec)
        rescued = not mask.any() and dec.keep_mask.any()
    keep_idx = np.flatnonzero(dec.keep_mask)
    dec.keep_idx = keep_idx
    if len(keep_idx) == 0:
        EMPTY_PRUNE_WARNINGS["count"] += 1
        log.warning("GSP pruned every voxel at layer %s", layer)
        empty = SparseVoxelTensor(coords=np.empty((0, 3), dtype=np.int64),
                                  features=Var(np.empty((0, x.channel_count),
                                                        dtype=feats_var.value.dtype)),
                                  stride=x.stride, dims=x.dims)
        return empty, dec
    kept_feats = ad.gather_rows(tape, feats_var, keep_idx)
    if mode == "train" and not rescued:
        # z is exactly 1 on kept rows, so this is a bitwise no-op forward
        # while letting downstream gradients reach the classifier through z
        z_kept = ad.gather_rows(tape, z, keep_idx)
        kept_feats = ad.row_scale(tape, kept_feats, z_kept)
    out = SparseVoxelTensor(coords=x.coords[keep_idx], features=kept_feats,
                            stride=x.stride, dims=x.dims)
    ledger.charge_aux(layer, "gather", int(len(keep_idx) * x.channel_count))
    return out, dec


def guard_nonempty(x: SparseVoxelTensor, decision: PruneDecision) -> PruneDecision:
    """Infer-mode rescue: never return an empty tensor for non-empty input.

    If everything was pruned, force-keep the voxel with the largest soft
    probability; ties go to the lowest coordinate.
    """
    if x.num_active == 0 or decision.keep_mask.any():
        return decision
    c = x.coords
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], -decision.soft_probs))
    rescue = int(order[0])
    mask = decision.keep_mask.copy()
    mask[rescue] = 1
    log.info("guard_nonempty force-kept voxel %s", tuple(x.coords[rescue]))
    return PruneDecision(keep_mask=mask, soft_probs=decision.soft_probs,
                         actual_rate=float(mask.mean()), kind=decision.kind,
                         q_var=decision.q_var, keep_idx=np.flatnonzero(mask))


def sparse_reg_loss(decisions: list[PruneDecision], targets: list[float],
                    tape: Optional[Tape]) -> Var:
    """Sum over layers of (t - mean q)^2; empty layers contribute zero.

    q is the keep probability for SSP and the straight-through hard decision
    for GSP, so the classifier of a GSP layer receives gradient even for the
    voxels it dropped.
    """
    if len(decisions) != len(targets):
        raise ValueError("one target per decision required")
    total: Optional[Var] = None
    for dec, t in zip(decisions, targets):
        if dec.q_var is None or dec.q_var.value.size == 0:
            continue
        m = ad.mean_all(tape, dec.q_var)
        term = ad.squared_gap(tape, m, t)
        total = term if total is None else ad.add(tape, total, term)
    if total is None:
        total = Var(np.asarray(0.0))
    return total
