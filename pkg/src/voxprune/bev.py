"""Moving between voxel space and the bird's-eye-view plane, and BEV point density."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyScene, InvalidInput, ShapeError
from .voxel import SparseBEVTensor, SparseVoxelTensor, VoxelGridSpec


def _flat2(coords: np.ndarray, extent) -> np.ndarray:
    return coords[:, 0].astype(np.int64) * int(extent[1]) + coords[:, 1]


@dataclass(frozen=True, eq=False)
class BEVMask:
    """Kept BEV cells of a ``(W, H)`` grid."""

    extent: tuple
    kept: np.ndarray

    def __post_init__(self):
        extent = tuple(int(e) for e in self.extent)
        kept = np.array(self.kept, dtype=np.int64, copy=True).reshape(-1, 2)
        if len(kept) and ((kept < 0).any() or (kept >= np.array(extent)).any()):
            raise ShapeError(f"mask coordinate outside extent {extent}")
        flat = np.unique(_flat2(kept, extent))
        kept = np.stack([flat // extent[1], flat % extent[1]], axis=1)
        kept.setflags(write=False)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "kept", kept)

    @classmethod
    def full(cls, extent):
        return cls(extent, np.indices(extent).reshape(2, -1).T)

    @classmethod
    def from_dense(cls, keep: np.ndarray):
        return cls(keep.shape, np.argwhere(keep))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.extent, dtype=bool)
        out[tuple(self.kept.T)] = True
        return out

    def contains(self, coords: np.ndarray) -> np.ndarray:
        return np.isin(_flat2(np.asarray(coords, np.int64).reshape(-1, 2), self.extent),
                       _flat2(self.kept, self.extent))

    def __and__(self, other: "BEVMask") -> "BEVMask":
        if self.extent != other.extent:
            raise ShapeError("mask extents differ")
        return BEVMask(self.extent, self.kept[other.contains(self.kept)])

    def __len__(self):
        return len(self.kept)


@dataclass(frozen=True, eq=False)
class DensityHeatmap:
    """Pooled point density on a ``(W, H)`` grid, normalized to a maximum of 1."""

    values: np.ndarray
    g: int

    @property
    def extent(self):
        return self.values.shape

    def upsampled(self, factor: int, extent=None) -> "DensityHeatmap":
        """Nearest-neighbor copy at ``factor`` times the resolution, cropped to ``extent``."""
        v = np.repeat(np.repeat(self.values, factor, axis=0), factor, axis=1)
        if extent is not None:
            v = v[: extent[0], : extent[1]]
        return DensityHeatmap(v, self.g)


def project_3d_to_2d(t: SparseVoxelTensor, extent) -> SparseBEVTensor:
    """Sum voxel features down each (x, y) column."""
    extent = tuple(int(e) for e in extent)
    xy = t.coords[:, :2]
    if len(t) and ((xy < 0).any() or (xy >= np.array(extent)).any()):
        raise ShapeError(f"voxel column outside BEV extent {extent}")
    if len(t) == 0:
        return SparseBEVTensor(np.zeros((0, 2), np.int64), np.zeros((0, t.channels)), extent)
    # canonical (x, y, z) order keeps each column contiguous
    new = np.ones(len(t), dtype=bool)
    new[1:] = (xy[1:] != xy[:-1]).any(axis=1)
    starts = np.flatnonzero(new)
    return SparseBEVTensor(xy[starts], np.add.reduceat(t.feats, starts, axis=0), extent)


def lift_mask_2d_to_3d(mask: BEVMask, t: SparseVoxelTensor) -> SparseVoxelTensor:
    """Keep exactly the voxels whose column is in the mask; the rest are removed."""
    return t.select(mask.contains(t.coords[:, :2]))


def bev_grid(spec: VoxelGridSpec, stride: int = 1) -> VoxelGridSpec:
    """Grid spec whose x/y cells are ``stride`` times the voxel grid's."""
    return spec.coarsened(stride) if stride != 1 else spec


def point_counts(points: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    """Points per BEV cell of ``spec`` (z is ignored)."""
    points = np.asarray(points, dtype=np.float64)
    W, H = spec.extent[:2]
    cell = np.floor((points[:, :2] - np.array(spec.origin[:2])) / np.array(spec.voxel_size[:2])).astype(np.int64)
    ok = (cell[:, 0] >= 0) & (cell[:, 0] < W) & (cell[:, 1] >= 0) & (cell[:, 1] < H)
    cell = cell[ok]
    return np.bincount(cell[:, 0] * H + cell[:, 1], minlength=W * H).reshape(W, H)


def box_sum(a: np.ndarray, g: int) -> np.ndarray:
    """Sum over a centered ``g x g`` window with zero padding."""
    r = g // 2
    p = np.pad(a, ((r + 1, r), (r + 1, r)))
    c = p.cumsum(axis=0).cumsum(axis=1)
    return c[g:, g:] - c[:-g, g:] - c[g:, :-g] + c[:-g, :-g]


def density_heatmap(points: np.ndarray, spec: VoxelGridSpec, g: int = 5) -> DensityHeatmap:
    """Average-pooled per-cell point counts, divided by their maximum."""
    if g < 1 or g % 2 == 0:
        raise InvalidInput(f"pooling kernel must be odd and >= 1, got {g}")
    counts = point_counts(points, spec)
    pooled = box_sum(counts, g)
    peak = pooled.max() if pooled.size else 0
    if peak == 0:
        raise EmptyScene("no points fall on the BEV grid")
    # integer window sums are exact, so divide once by the peak sum
    return DensityHeatmap(pooled / peak, g)


def grid_to_csv(values: np.ndarray) -> str:
    """H rows of W comma-separated values for a ``(W, H)`` array."""
    values = np.asarray(values)
    if values.dtype == bool:
        rows = [",".join("1" if x else "0" for x in row) for row in values.T]
    else:
        rows = [",".join(repr(float(x)) for x in row) for row in values.T]
    return "\n".join(rows) + "\n"


def grid_to_pgm(values: np.ndarray) -> bytes:
    """8-bit binary PGM of a ``(W, H)`` array with values in [0, 1]."""
    v = np.asarray(values, dtype=np.float64)
    W, H = v.shape
    pix = np.clip(np.rint(v.T * 255), 0, 255).astype(np.uint8)
    return f"P5\n{W} {H}\n255\n".encode() + pix.tobytes()


def write_grid(path, values, fmt: str):
    path = str(path)
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            f.write(grid_to_csv(values))
    elif fmt == "pgm":
        with open(path, "wb") as f:
            f.write(grid_to_pgm(values))
    else:
        raise InvalidInput(f"unknown grid format {fmt!r}")
