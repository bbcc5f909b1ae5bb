"""Sparse voxel engine with learned spatial pruning on a synthetic
multi-sweep LiDAR benchmark."""

from .scenesim import (AccumulatedCloud, BevGridSpec, RigidTransform, SceneSpec,
                       Sweep, SweepSelection, accumulate, align_sweep,
                       bev_labels, cast_sweep, random_scene)
from .voxelize import (SparseVoxelTensor, VoxelGridSpec, dynamic_voxelize,
                       hard_voxelize)
from .pruning import (GumbelNoiseSource, PruneDecision, PruningClassifier,
                      gsp_forward, guard_nonempty, mbp_forward, sparse_reg_loss,
                      ssp_forward)
from .sparsenet import (EncoderConfig, SparseConvLayer, SparseEncoder,
                        sparse_conv_forward)
from .ledger import FlopsLedger
from .trainer import EpochReport, TrainConfig, evaluate, seg_loss, train

__version__ = "0.1.0"
