"""Sparse convolution: rulebook construction, gather-GEMM-scatter execution, dense reference."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, OracleLimit, ShapeError
from .voxel import CoordIndex, NOT_FOUND, lex_order

CONV_KINDS = ("submanifold", "generative")
ORACLE_MAX_EXTENT = 32


def kernel_offsets(kernel_size: int, ndim: int) -> np.ndarray:
    """All ``K**D`` offsets, row-major over ``-K//2 .. K//2`` per axis."""
    r = kernel_size // 2
    rng = range(-r, kernel_size - r)
    return np.array(list(itertools.product(rng, repeat=ndim)), dtype=np.int64).reshape(-1, ndim)


@dataclass(frozen=True, eq=False)
class KernelWeights:
    """Per-offset weight matrices ``weights[k]`` of shape ``(C_in, C_out)``.

    Offset ``k`` is ``offsets[k]`` from :func:`kernel_offsets`. The output at
    ``q`` reads the input at ``stride * q + offset`` (cross-correlation).
    """

    weights: np.ndarray
    kernel_size: int
    stride: int = 1
    conv_kind: str = "submanifold"
    ndim: int = 3

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        k, s = int(self.kernel_size), int(self.stride)
        if k < 1 or s < 1:
            raise ConfigError(f"kernel_size and stride must be >= 1, got {k}, {s}")
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"unknown conv kind {self.conv_kind!r}")
        if self.conv_kind == "submanifold" and s != 1:
            raise ConfigError("submanifold convolution is stride-1 only")
        if self.ndim not in (2, 3):
            raise ConfigError(f"unsupported dimensionality {self.ndim}")
        if w.ndim != 3 or w.shape[0] != k**self.ndim:
            raise ShapeError(f"weights must be ({k}**{self.ndim}, C_in, C_out), got {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "kernel_size", k)
        object.__setattr__(self, "stride", s)

    @property
    def offsets(self) -> np.ndarray:
        return kernel_offsets(self.kernel_size, self.ndim)

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def random(cls, c_in, c_out, kernel_size, stride=1, conv_kind="submanifold", ndim=3, seed=0):
        """He-style normal init scaled by the fan-in."""
        rng = np.random.default_rng(seed)
        fan_in = c_in * kernel_size**ndim
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(kernel_size**ndim, c_in, c_out))
        return cls(w, kernel_size, stride, conv_kind, ndim)

    def to_dict(self) -> dict:
        return {
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "conv_kind": self.conv_kind,
            "ndim": self.ndim,
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelWeights":
        return cls(np.array(d["weights"], dtype=np.float64), d["kernel_size"], d["stride"], d["conv_kind"], d["ndim"])


@dataclass(frozen=True, eq=False)
class Rulebook:
    """Per-offset ``(input_row, output_row)`` pairs plus the output coordinates."""

    in_rows: tuple
    out_rows: tuple
    out_coords: np.ndarray
    out_extent: Optional[tuple]

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(r) for r in self.in_rows], dtype=np.int64)

    @property
    def total_pairs(self) -> int:
        return int(self.counts.sum())

    @property
    def nbytes(self) -> int:
        """Memory of the pair lists at 4 bytes per row index."""
        return 8 * self.total_pairs


def _out_extent(extent, stride):
    if extent is None:
        return None
    return tuple(-(-int(e) // stride) for e in extent)


def _generative_outputs(coords_in, offsets, stride, out_extent):
    cands = []
    for d in offsets:
        c = coords_in - d
        ok = (c % stride == 0).all(axis=1)
        cands.append(c[ok] // stride)
    out = np.unique(np.concatenate(cands), axis=0) if cands else np.zeros((0, coords_in.shape[1]), np.int64)
    if out_extent is not None and len(out):
        inside = ((out >= 0) & (out < np.array(out_extent))).all(axis=1)
        out = out[inside]
    return out[lex_order(out)] if len(out) else out


def build_rulebook(coords_in: np.ndarray, kernel: KernelWeights, index: CoordIndex, extent=None) -> Rulebook:
    """Map search for one layer.

    Submanifold outputs sit on the input sites and pair ``q`` with the input
    at ``q + offset``. Generative outputs are every ``q`` with
    ``stride * q = p - offset`` for some input ``p``; with an ``extent`` they
    are clipped to ``ceil(extent / stride)`` like a zero-padded dense conv.
    Pairs within an offset are ordered by input row.
    """
    if kernel.conv_kind == "submanifold" and kernel.stride != 1:
        raise ConfigError("submanifold convolution is stride-1 only")
    coords_in = np.asarray(coords_in, dtype=np.int64).reshape(-1, kernel.ndim)
    offsets = kernel.offsets
    in_rows, out_rows = [], []
    if kernel.conv_kind == "submanifold":
        out_coords = coords_in
        out_extent = None if extent is None else tuple(extent)
        all_rows = np.arange(len(coords_in))
        for d in offsets:
            src = index.lookup_many(coords_in + d)
            hit = src != NOT_FOUND
            # src is a permutation slice, so sort pairs by input row
            order = np.argsort(src[hit], kind="stable")
            in_rows.append(src[hit][order])
            out_rows.append(all_rows[hit][order])
    else:
        out_extent = _out_extent(extent, kernel.stride)
        out_coords = _generative_outputs(coords_in, offsets, kernel.stride, out_extent)
        out_index = CoordIndex(out_coords)
        all_rows = np.arange(len(coords_in))
        for d in offsets:
            c = coords_in - d
            ok = (c % kernel.stride == 0).all(axis=1)
            dst = np.full(len(c), NOT_FOUND, dtype=np.int64)
            if ok.any():
                dst[ok] = out_index.lookup_many(c[ok] // kernel.stride)
            hit = dst != NOT_FOUND
            in_rows.append(all_rows[hit])
            out_rows.append(dst[hit])
    return Rulebook(tuple(in_rows), tuple(out_rows), out_coords, out_extent)


def execute_rulebook(feats: np.ndarray, kernel: KernelWeights, rb: Rulebook) -> np.ndarray:
    """Gather rows per offset, multiply by that offset's matrix, scatter-add into outputs.

    Each output row occurs at most once per offset, so fancy-index ``+=`` is
    exact, and offsets are visited in a fixed order for reproducibility.
    """
    out = np.zeros((len(rb.out_coords), kernel.c_out))
    for k in range(len(rb.in_rows)):
        src = rb.in_rows[k]
        if len(src) == 0:
            continue
        out[rb.out_rows[k]] += feats[src] @ kernel.weights[k]
    return out


def conv_flops(kernel: KernelWeights, pairs: int) -> int:
    return 2 * kernel.c_in * kernel.c_out * int(pairs)


def sparse_conv(t, kernel: KernelWeights, ledger=None, name: str = "conv", stage: str = "3d", index=None):
    """Apply one sparse convolution to a voxel or BEV tensor.

    When a ``ledger`` is given the layer's FLOPs, pair count and output
    activation size are recorded under ``name``.
    """
    if t.channels != kernel.c_in:
        raise ShapeError(f"tensor has {t.channels} channels, kernel expects {kernel.c_in}")
    if t.coords.shape[1] != kernel.ndim:
        raise ShapeError(f"{kernel.ndim}-D kernel applied to {t.coords.shape[1]}-D tensor")
    if index is None:
        index = CoordIndex(t.coords)
    rb = build_rulebook(t.coords, kernel, index, t.extent)
    feats = execute_rulebook(t.feats, kernel, rb)
    if kernel.conv_kind == "submanifold":
        out = t.replace(feats=feats)
    else:
        out = type(t)(rb.out_coords, feats, rb.out_extent)
    if ledger is not None:
        ledger.record_conv(name, stage, kernel, rb, out)
    return out


def dense_conv_oracle(dense: np.ndarray, kernel: KernelWeights) -> np.ndarray:
    """Direct zero-padded cross-correlation on a channels-first array.

    ``out[:, q] = sum_k W_k^T x[:, s*q + offset_k]``, with output extent
    ``ceil(E / s)`` per axis.
    """
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != kernel.ndim + 1 or dense.shape[0] != kernel.c_in:
        raise ShapeError(f"expected ({kernel.c_in}, *{kernel.ndim}-D extent), got {dense.shape}")
    extent = dense.shape[1:]
    if max(extent) > ORACLE_MAX_EXTENT:
        raise OracleLimit(f"extent {extent} exceeds {ORACLE_MAX_EXTENT} per axis")
    s = kernel.stride
    r = kernel.kernel_size // 2
    pad_hi = kernel.kernel_size - 1 - r + s
    padded = np.pad(dense, [(0, 0)] + [(r, pad_hi)] * kernel.ndim)
    out_ext = tuple(-(-e // s) for e in extent)
    out = np.zeros((kernel.c_out,) + out_ext)
    for k, d in enumerate(kernel.offsets):
        sl = tuple(slice(r + int(dd), r + int(dd) + s * n, s) for dd, n in zip(d, out_ext))
        patch = padded[(slice(None),) + sl]
        out += np.tensordot(kernel.weights[k], patch, axes=([0], [0]))
    return out
