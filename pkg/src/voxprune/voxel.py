"""Sparse tensor types, coordinate hashing and voxelization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .boxes import inside_any
from .errors import EmptyScene, InvalidInput, ShapeError

NOT_FOUND = -1

_INT32_MIN = -(2**31)
_INT32_MAX = 2**31 - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _lex_strictly_increasing(coords: np.ndarray) -> bool:
    if len(coords) < 2:
        return True
    d = coords[1:] - coords[:-1]
    nz = d != 0
    if not nz.any(axis=1).all():
        return False
    first = nz.argmax(axis=1)
    return bool((d[np.arange(len(d)), first] > 0).all())


def lex_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting (N, D) coordinates lexicographically, first axis major."""
    return np.lexsort(coords.T[::-1])


def canonicalize(coords, feats, extent=None):
    """Sort coordinates lexicographically, summing features of duplicates."""
    coords = np.asarray(coords, dtype=np.int64)
    feats = np.asarray(feats, dtype=np.float64)
    if len(coords) == 0:
        return coords.reshape(0, coords.shape[1] if coords.ndim == 2 else 0), feats
    order = lex_order(coords)
    coords = coords[order]
    feats = feats[order]
    new = np.ones(len(coords), dtype=bool)
    new[1:] = (coords[1:] != coords[:-1]).any(axis=1)
    if new.all():
        return coords, feats
    starts = np.flatnonzero(new)
    return coords[starts], np.add.reduceat(feats, starts, axis=0)


@dataclass(frozen=True, eq=False)
class _SparseTensor:
    coords: np.ndarray
    feats: np.ndarray

    ndim = 0

    def _validate(self, extent):
        coords = np.array(self.coords, dtype=np.int64, copy=True)
        if coords.size == 0:
            coords = coords.reshape(0, self.ndim)
        feats = np.array(self.feats, dtype=np.float64, copy=True)
        if feats.ndim != 2:
            raise ShapeError(f"feats must be 2-D, got shape {feats.shape}")
        if coords.ndim != 2 or coords.shape[1] != self.ndim:
            raise ShapeError(f"coords must be (N, {self.ndim}), got {coords.shape}")
        if len(coords) != len(feats):
            raise ShapeError(f"{len(coords)} coords but {len(feats)} feature rows")
        if len(coords) and (coords.min() < _INT32_MIN or coords.max() > _INT32_MAX):
            raise InvalidInput("coordinates must fit in 32 signed bits")
        if not _lex_strictly_increasing(coords):
            raise InvalidInput("coords must be unique and lexicographically sorted")
        if extent is not None:
            extent = tuple(int(e) for e in extent)
            if len(extent) != self.ndim or min(extent) <= 0:
                raise ShapeError(f"bad extent {extent} for {self.ndim}-D tensor")
            if len(coords) and ((coords < 0).any() or (coords >= np.array(extent)).any()):
                raise ShapeError(f"coordinate outside extent {extent}")
        coords.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)
        return extent

    def __len__(self):
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    @property
    def dense_rate(self) -> float:
        if self.extent is None:
            raise ShapeError("dense rate needs an extent")
        return len(self) / math.prod(self.extent)

    def select(self, rows):
        """Subset of rows; ``rows`` is a boolean mask or increasing indices."""
        return self.replace(coords=self.coords[rows], feats=self.feats[rows])

    def with_feats(self, feats):
        return self.replace(feats=feats)

    def replace(self, **changes):
        kw = dict(coords=self.coords, feats=self.feats, extent=self.extent)
        kw.update(changes)
        return type(self)(**kw)

    def to_dense(self) -> np.ndarray:
        """Channels-first dense array ``(C, *extent)`` with absent sites at zero."""
        if self.extent is None:
            raise ShapeError("densify needs an extent")
        out = np.zeros((self.channels,) + tuple(self.extent))
        out[(slice(None),) + tuple(self.coords.T)] = self.feats.T
        return out

    @classmethod
    def from_dense(cls, dense: np.ndarray, keep_zeros: bool = False):
        """Sparsify a channels-first array; sites whose channels are all zero are dropped."""
        dense = np.asarray(dense, dtype=np.float64)
        extent = dense.shape[1:]
        if keep_zeros:
            coords = np.indices(extent).reshape(len(extent), -1).T
        else:
            coords = np.argwhere((dense != 0).any(axis=0))
        feats = dense[(slice(None),) + tuple(coords.T)].T
        return cls(coords=coords, feats=feats, extent=extent)

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.extent == other.extent
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.feats, other.feats)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SparseVoxelTensor(_SparseTensor):
    """Voxels on an integer 3D lattice in canonical (x, y, z) order.

    ``extent`` is optional; when present it bounds the coordinates and lets
    strided generative convolutions clip their output like a padded dense conv.
    """

    extent: Optional[tuple] = None
    ndim = 3

    def __post_init__(self):
        object.__setattr__(self, "extent", self._validate(self.extent))

    @classmethod
    def empty(cls, channels: int, extent=None):
        return cls(np.zeros((0, 3), np.int64), np.zeros((0, channels)), extent)


@dataclass(frozen=True, eq=False)
class SparseBEVTensor(_SparseTensor):
    """Pixels of a bird's-eye-view grid of size ``extent = (W, H)``."""

    extent: tuple = field(default=None)
    ndim = 2

    def __post_init__(self):
        if self.extent is None:
            raise ShapeError("a BEV tensor needs an extent")
        object.__setattr__(self, "extent", self._validate(self.extent))


class CoordIndex:
    """Open-addressing hash table from integer coordinates to row indices.

    Coordinates are flattened over their bounding box as
    ``((x - x0) * Y + (y - y0)) * Z + (z - z0)``, which cannot collide, and the
    flat key is scattered into a power-of-two table with a multiplicative hash
    and linear probing. Insertion and lookup are vectorized over batches.
    """

    def __init__(self, coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim != 2:
            raise ShapeError("coords must be (N, D)")
        self.ndim = coords.shape[1]
        n = len(coords)
        if n:
            self._lo = coords.min(axis=0)
            self._shape = coords.max(axis=0) - self._lo + 1
        else:
            self._lo = np.zeros(self.ndim, np.int64)
            self._shape = np.zeros(self.ndim, np.int64)
        if math.prod(int(s) for s in self._shape) >= 2**62:
            raise ShapeError("coordinate bounding box too large to flatten")
        self._strides = np.ones(self.ndim, np.int64)
        for d in range(self.ndim - 2, -1, -1):
            self._strides[d] = self._strides[d + 1] * self._shape[d + 1]
        self._bits = max(4, (2 * n).bit_length())
        self._mask = (1 << self._bits) - 1
        self._keys = np.full(1 << self._bits, -1, dtype=np.int64)
        self._rows = np.full(1 << self._bits, NOT_FOUND, dtype=np.int64)
        self.size = n
        self._insert(self.flatten(coords))

    def flatten(self, coords: np.ndarray) -> np.ndarray:
        """Flat keys; coordinates outside the bounding box map to -1."""
        rel = np.asarray(coords, dtype=np.int64) - self._lo
        inside = ((rel >= 0) & (rel < self._shape)).all(axis=1)
        keys = rel @ self._strides
        keys[~inside] = -1
        return keys

    def _slot(self, keys: np.ndarray) -> np.ndarray:
        h = keys.astype(np.uint64) * _GOLDEN
        return (h >> np.uint64(64 - self._bits)).astype(np.int64)

    def _insert(self, keys: np.ndarray):
        pending = np.arange(len(keys))
        pos = self._slot(keys)
        while len(pending):
            p = pos[pending]
            free = self._keys[p] == -1
            slots, first = np.unique(p[free], return_index=True)
            winners = pending[free][first]
            self._keys[slots] = keys[winners]
            self._rows[slots] = winners
            placed = np.zeros(len(keys), dtype=bool)
            placed[winners] = True
            pending = pending[~placed[pending]]
            pos[pending] = (pos[pending] + 1) & self._mask

    def lookup_many(self, coords: np.ndarray) -> np.ndarray:
        """Row index for each query coordinate, ``NOT_FOUND`` where absent."""
        keys = self.flatten(coords)
        out = np.full(len(keys), NOT_FOUND, dtype=np.int64)
        active = np.flatnonzero(keys >= 0)
        pos = self._slot(np.maximum(keys, 0))
        while len(active):
            p = pos[active]
            stored = self._keys[p]
            hit = stored == keys[active]
            out[active[hit]] = self._rows[p[hit]]
            active = active[~hit & (stored != -1)]
            pos[active] = (pos[active] + 1) & self._mask
        return out

    def lookup(self, coord) -> Optional[int]:
        row = self.lookup_many(np.asarray(coord, dtype=np.int64).reshape(1, -1))[0]
        return None if row == NOT_FOUND else int(row)

    def __len__(self):
        return self.size


def build_index(t: _SparseTensor) -> CoordIndex:
    return CoordIndex(t.coords)


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned voxel grid: ``origin`` and ``voxel_size`` in meters, ``extent`` in cells."""

    origin: tuple
    voxel_size: tuple
    extent: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(x) for x in self.voxel_size))
        object.__setattr__(self, "extent", tuple(int(x) for x in self.extent))
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.extent) != 3:
            raise ShapeError("grid spec fields must have three components")
        if min(self.voxel_size) <= 0:
            raise InvalidInput(f"voxel sizes must be positive, got {self.voxel_size}")
        if min(self.extent) <= 0:
            raise InvalidInput(f"extent must be positive, got {self.extent}")

    def coarsened(self, stride: int) -> "VoxelGridSpec":
        """Grid seen after ``stride``-fold downsampling in x, y and z."""
        return VoxelGridSpec(
            self.origin,
            tuple(s * stride for s in self.voxel_size),
            tuple(-(-e // stride) for e in self.extent),
        )

    def cell_of(self, xyz: np.ndarray) -> np.ndarray:
        rel = (np.asarray(xyz, dtype=np.float64) - np.array(self.origin)) / np.array(self.voxel_size)
        return np.floor(rel).astype(np.int64)

    def to_cell_units(self, xy: np.ndarray) -> np.ndarray:
        """Metric (x, y) to continuous BEV cell indices (cell centers are integers)."""
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - np.array(self.origin[:2])) / np.array(self.voxel_size[:2]) - 0.5

    def to_dict(self):
        return {"origin": list(self.origin), "voxel_size": list(self.voxel_size), "extent": list(self.extent)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["origin"]), tuple(d["voxel_size"]), tuple(d["extent"]))


REDUCTIONS = ("mean", "max", "count")


def voxelize(points: np.ndarray, spec: VoxelGridSpec, reduce: str = "mean") -> SparseVoxelTensor:
    """Quantize ``(N, 4)`` points ``(x, y, z, r)`` onto ``spec``.

    Each occupied cell becomes one voxel whose feature is the per-channel
    mean or max of its member points, or their count (a single channel).
    Points outside the grid are discarded.
    """
    if reduce not in REDUCTIONS:
        raise InvalidInput(f"unknown reduction {reduce!r}")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 4:
        raise InvalidInput(f"points must be (N, 4), got {points.shape}")
    if not np.isfinite(points).all():
        raise InvalidInput("point cloud contains non-finite values")
    cells = spec.cell_of(points[:, :3])
    ext = np.array(spec.extent)
    inside = ((cells >= 0) & (cells < ext)).all(axis=1)
    if not inside.any():
        raise EmptyScene("no points inside the voxel grid")
    cells = cells[inside]
    points = points[inside]
    keys = (cells[:, 0] * ext[1] + cells[:, 1]) * ext[2] + cells[:, 2]
    uniq, inverse = np.unique(keys, return_inverse=True)
    coords = np.stack([uniq // (ext[1] * ext[2]), (uniq // ext[2]) % ext[1], uniq % ext[2]], axis=1)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    if reduce == "count":
        feats = counts[:, None]
    elif reduce == "mean":
        feats = np.stack([np.bincount(inverse, points[:, c], len(uniq)) for c in range(4)], axis=1)
        feats /= counts[:, None]
    else:
        feats = np.full((len(uniq), 4), -np.inf)
        np.maximum.at(feats, inverse, points)
    return SparseVoxelTensor(coords, feats, spec.extent)


def random_drop(
    t: SparseVoxelTensor,
    fraction: float,
    seed: int,
    exclude: Optional[Sequence] = None,
) -> SparseVoxelTensor:
    """Remove ``floor(fraction * eligible)`` voxels chosen uniformly at random.

    With ``exclude`` boxes (in the tensor's cell units), voxels whose (x, y)
    cell center is inside any box are never eligible.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InvalidInput(f"fraction must be in [0, 1], got {fraction}")
    eligible = np.arange(len(t))
    if exclude:
        eligible = eligible[~inside_any(t.coords[:, :2], exclude)]
    n_drop = math.floor(fraction * len(eligible))
    if n_drop == 0:
        return t
    rng = np.random.default_rng(seed)
    dropped = rng.choice(eligible, size=n_drop, replace=False)
    keep = np.ones(len(t), dtype=bool)
    keep[dropped] = False
    return t.select(keep)


def read_points(path) -> np.ndarray:
    """Load a headerless little-endian float32 (x, y, z, r) point file."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise InvalidInput(f"{path}: size is not a multiple of 4 floats")
    return raw.reshape(-1, 4).astype(np.float64)


def write_points(path, points: np.ndarray):
    np.asarray(points, dtype="<f4").reshape(-1, 4).tofile(path)
