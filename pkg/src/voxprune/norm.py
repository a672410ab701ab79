"""Batch-normalization variants for sparse tensors, with inference-time statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyBatch, ShapeError
from .voxel import SparseBEVTensor

VARIANTS = ("normal", "nonzero", "sp")


@dataclass(frozen=True, eq=False)
class NormParams:
    """Per-channel statistics and affine terms.

    ``sp`` divides stored values by the standard deviation without centering,
    ``nonzero`` standardizes stored values only, and ``normal`` standardizes
    every grid cell with absent cells read as zero.
    """

    var: np.ndarray
    mean: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    variant: str = "sp"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown norm variant {self.variant!r}")
        arrs = [np.array(getattr(self, k), dtype=np.float64, copy=True).reshape(-1) for k in ("var", "mean", "gamma", "beta")]
        if len({len(a) for a in arrs}) != 1:
            raise ShapeError("norm parameter arrays differ in length")
        if (arrs[0] < 0).any():
            raise ConfigError("variance must be non-negative")
        if not self.eps >= 0:
            raise ConfigError("epsilon must be non-negative")
        for k, a in zip(("var", "mean", "gamma", "beta"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, k, a)
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def channels(self) -> int:
        return len(self.var)

    @classmethod
    def identity(cls, channels: int, variant: str = "sp", eps: float = 1e-5):
        z = np.zeros(channels)
        return cls(np.ones(channels) - eps, z, np.ones(channels), z, eps, variant)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "eps": self.eps,
            "var": self.var.tolist(),
            "mean": self.mean.tolist(),
            "gamma": self.gamma.tolist(),
            "beta_affine": self.beta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormParams":
        return cls(np.array(d["var"]), np.array(d["mean"]), np.array(d["gamma"]), np.array(d["beta_affine"]),
                   d["eps"], d["variant"])


def normalize(t, p: NormParams):
    if t.channels != p.channels:
        raise ShapeError(f"tensor has {t.channels} channels, norm expects {p.channels}")
    scale = p.gamma / np.sqrt(p.var + p.eps)
    if p.variant == "sp":
        return t.with_feats(t.feats * scale + p.beta)
    if p.variant == "nonzero":
        return t.with_feats((t.feats - p.mean) * scale + p.beta)
    if not isinstance(t, SparseBEVTensor):
        raise ConfigError("normal batch norm densifies and is only defined on BEV tensors")
    W, H = t.extent
    dense = np.zeros((W * H, t.channels))
    dense[t.coords[:, 0] * H + t.coords[:, 1]] = t.feats
    coords = np.indices((W, H)).reshape(2, -1).T
    return SparseBEVTensor(coords, (dense - p.mean) * scale + p.beta, t.extent)


def fit_stats(batch, variant: str = "sp", eps: float = 1e-5) -> NormParams:
    """Population mean and variance per channel.

    Stored elements only for ``sp``/``nonzero``; every grid cell, absent ones
    as zero, for ``normal``.
    """
    batch = list(batch)
    if not batch:
        raise EmptyBatch("cannot fit statistics on an empty batch")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown norm variant {variant!r}")
    C = batch[0].channels
    if any(t.channels != C for t in batch):
        raise ShapeError("batch tensors differ in channel count")
    s = np.zeros(C)
    count = 0
    for t in batch:
        s += t.feats.sum(axis=0)
        count += int(np.prod(t.extent)) if variant == "normal" else len(t)
    if count == 0:
        raise EmptyBatch("batch holds no elements")
    mean = s / count
    sq = np.zeros(C)
    for t in batch:
        sq += ((t.feats - mean) ** 2).sum(axis=0)
        if variant == "normal":
            sq += (int(np.prod(t.extent)) - len(t)) * mean**2
    var = sq / count
    return NormParams(var, mean, np.ones(C), np.zeros(C), eps, variant)


def relu(t):
    """Clamp negatives to zero; stored coordinates are kept."""
    return t.with_feats(np.maximum(t.feats, 0.0))
