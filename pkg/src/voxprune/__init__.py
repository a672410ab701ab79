"""Sparse voxel inference with learned, density-guided spatial pruning."""

from .boxes import GroundTruthBox
from .costs import CostLedger, report_costs
from .errors import (
    ConfigError,
    DivergedError,
    EmptyBatch,
    EmptyScene,
    InvalidInput,
    LayerError,
    OracleLimit,
    ShapeError,
    VoxPruneError,
)
from .voxel import CoordIndex, SparseBEVTensor, SparseVoxelTensor, VoxelGridSpec, build_index, random_drop, voxelize

__all__ = [
    "ConfigError",
    "CoordIndex",
    "CostLedger",
    "DivergedError",
    "EmptyBatch",
    "EmptyScene",
    "GroundTruthBox",
    "InvalidInput",
    "LayerError",
    "OracleLimit",
    "ShapeError",
    "SparseBEVTensor",
    "SparseVoxelTensor",
    "VoxPruneError",
    "VoxelGridSpec",
    "build_index",
    "random_drop",
    "report_costs",
    "voxelize",
]
