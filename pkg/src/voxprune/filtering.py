"""Importance scoring with density guidance, drop selection and drop-quality measurement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bev import BEVMask, DensityHeatmap, lift_mask_2d_to_3d, project_3d_to_2d
from .boxes import inside_any
from .errors import ConfigError, ShapeError
from .predictor import PredictorNet, predictor_forward

SCORE_MODES = ("predictor+density", "predictor", "density", "random")


@dataclass(frozen=True)
class FilterConfig:
    drop_rate: float = 0.25
    beta: float = 0.5
    g: int = 5
    apply_layers_3d: tuple = (1, 3)
    apply_layers_2d: tuple = (1, 3)
    tie_break: str = "lex"
    score_mode: str = "predictor+density"

    def __post_init__(self):
        object.__setattr__(self, "apply_layers_3d", tuple(int(i) for i in self.apply_layers_3d))
        object.__setattr__(self, "apply_layers_2d", tuple(int(i) for i in self.apply_layers_2d))
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.g < 1 or self.g % 2 == 0:
            raise ConfigError(f"density pooling kernel must be odd and >= 1, got {self.g}")
        if self.tie_break != "lex":
            raise ConfigError(f"unknown tie-break rule {self.tie_break!r}")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"unknown score mode {self.score_mode!r}")

    def to_dict(self):
        return {
            "drop_rate": self.drop_rate,
            "beta": self.beta,
            "g": self.g,
            "apply_layers_3d": list(self.apply_layers_3d),
            "apply_layers_2d": list(self.apply_layers_2d),
            "tie_break": self.tie_break,
            "score_mode": self.score_mode,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def combine_scores(coords: np.ndarray, heatmap: np.ndarray, pool: int, density: np.ndarray, beta: float) -> np.ndarray:
    """``heatmap[p // pool] * density[p] ** beta`` at each stored pixel ``p``."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    y = heatmap[coords[:, 0] // pool, coords[:, 1] // pool]
    d = density[coords[:, 0], coords[:, 1]]
    return y * np.power(d, beta)


def _check_density(x, density: DensityHeatmap):
    if tuple(density.extent) != tuple(x.extent):
        raise ShapeError(f"density extent {density.extent} != tensor extent {x.extent}")


def importance_score(x_bev, net: PredictorNet, density: DensityHeatmap, beta: float, pool=None, ledger=None, name="predictor"):
    """Predictor score times density to the power ``beta``, per stored pixel."""
    _check_density(x_bev, density)
    pool = net.pool if pool is None else pool
    y = predictor_forward(x_bev, net, pool, ledger, name)
    return combine_scores(x_bev.coords, y, pool, density.values, beta)


def drop_order(scores: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Indices ordered from first-to-drop to last: ascending score, then coordinate."""
    coords = np.asarray(coords).reshape(len(scores), -1)
    return np.lexsort(tuple(coords.T[::-1]) + (np.asarray(scores),))


def drop_count(r_drop: float, m: int) -> int:
    return math.floor(r_drop * m)


def keep_flags(scores, coords, r_drop: float) -> np.ndarray:
    """Boolean keep flag per pixel after removing the ``floor(r_drop * M)`` lowest scores."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    keep[drop_order(scores, coords)[: drop_count(r_drop, len(scores))]] = False
    return keep


def drop_mask(scores, coords, r_drop: float, extent, tie_break: str = "lex") -> BEVMask:
    if tie_break != "lex":
        raise ConfigError(f"unknown tie-break rule {tie_break!r}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return BEVMask(extent, coords[keep_flags(scores, coords, r_drop)])


def score_pixels(x_bev, cfg: FilterConfig, net, density, pool=None, seed: int = 0, ledger=None, name="predictor"):
    """Scores under ``cfg.score_mode``; the ablation modes replace one factor by 1."""
    if cfg.score_mode == "random":
        return np.random.default_rng(seed).random(len(x_bev))
    _check_density(x_bev, density)
    if cfg.score_mode == "density":
        return np.power(density.values[x_bev.coords[:, 0], x_bev.coords[:, 1]], cfg.beta)
    pool = net.pool if pool is None else pool
    y = predictor_forward(x_bev, net, pool, ledger, name)
    beta = 0.0 if cfg.score_mode == "predictor" else cfg.beta
    return combine_scores(x_bev.coords, y, pool, density.values, beta)


def filter_3d(t, cfg: FilterConfig, net, density, pool=None, seed: int = 0, ledger=None, name="predictor", details=False):
    """Score voxel columns on the BEV plane and remove every voxel in a dropped column.

    With ``details`` the mask and the dropped column coordinates are returned too.
    """
    bev = project_3d_to_2d(t, t.extent[:2])
    scores = score_pixels(bev, cfg, net, density, pool, seed, ledger, name)
    keep = keep_flags(scores, bev.coords, cfg.drop_rate)
    mask = BEVMask(bev.extent, bev.coords[keep])
    out = lift_mask_2d_to_3d(mask, t)
    return (out, mask, bev.coords[~keep]) if details else out


def filter_2d(t, cfg: FilterConfig, net, density, pool=None, seed: int = 0, ledger=None, name="predictor", details=False):
    """Score stored pixels and remove the lowest-scoring fraction."""
    scores = score_pixels(t, cfg, net, density, pool, seed, ledger, name)
    keep = keep_flags(scores, t.coords, cfg.drop_rate)
    out = t.select(keep)
    return (out, BEVMask(t.extent, out.coords), t.coords[~keep]) if details else out


def r_inbox(dropped, boxes) -> float:
    """Fraction of dropped coordinates inside any box; 0.0 when nothing was dropped."""
    dropped = np.asarray(dropped, dtype=np.float64).reshape(-1, 2)
    if len(dropped) == 0:
        return 0.0
    return float(inside_any(dropped, boxes).mean())


def calibrate_beta(scenes, net: PredictorNet, candidates, pool=None) -> float:
    """Candidate exponent whose density-term variance best matches the predictor-score variance.

    ``scenes`` holds ``(SparseBEVTensor, DensityHeatmap)`` pairs; values are
    pooled over all stored pixels. Exact ties go to the smallest candidate.
    """
    cands = sorted(float(b) for b in candidates)
    if not cands:
        raise ConfigError("no candidate exponents given")
    pool = net.pool if pool is None else pool
    ys, ds = [], []
    for x, density in scenes:
        _check_density(x, density)
        y = predictor_forward(x, net, pool)
        ys.append(y[x.coords[:, 0] // pool, x.coords[:, 1] // pool])
        ds.append(density.values[x.coords[:, 0], x.coords[:, 1]])
    if not ys:
        raise ConfigError("no scenes given")
    var_y = float(np.var(np.concatenate(ys)))
    d = np.concatenate(ds)
    gaps = [abs(var_y - float(np.var(np.power(d, b)))) for b in cands]
    return cands[int(np.argmin(gaps))]
