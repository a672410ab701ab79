"""Backbone assembly: 3D sparse layers, BEV projection, 2D layers, adaptive filtering, cost logging."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .bev import DensityHeatmap, density_heatmap, project_3d_to_2d
from .conv import KernelWeights, sparse_conv
from .costs import CostLedger
from .errors import ConfigError, LayerError, VoxPruneError
from .filtering import FilterConfig, filter_2d, filter_3d
from .norm import NormParams, fit_stats, normalize, relu
from .predictor import PredictorNet, predictor_forward
from .voxel import SparseBEVTensor, VoxelGridSpec, voxelize

SCHEMA_VERSION = 1
NORMS = ("none", "sp", "nonzero", "normal")


@dataclass(frozen=True)
class LayerSpec:
    """One pre-activation block: norm, optional ReLU, optional filter, then convolution."""

    c_in: int
    c_out: int
    kernel_size: int = 3
    stride: int = 1
    conv_kind: str = "submanifold"
    norm: str = "sp"
    relu: bool = True

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigError("channel counts must be positive")

    def to_dict(self):
        return dict(self.__dict__)


def default_layers_3d():
    return (
        LayerSpec(4, 16, 3, 1, "submanifold", "sp", relu=False),
        LayerSpec(16, 32, 3, 2, "generative"),
        LayerSpec(32, 64, 3, 2, "generative"),
        LayerSpec(64, 64, 3, 2, "generative"),
        LayerSpec(64, 64, 3, 1, "submanifold"),
    )


def default_layers_2d(width: int = 128, c_in: int = 64):
    convs = [LayerSpec(c_in, width, 3, 1, "generative")]
    convs += [LayerSpec(width, width, 3, 1, "generative") for _ in range(5)]
    # 1x1 stand-in for the upsampling head
    convs.append(LayerSpec(width, width, 1, 1, "submanifold"))
    return tuple(convs)


def default_grid():
    return VoxelGridSpec((-25.6, -25.6, -1.0), (0.05, 0.05, 0.1), (1024, 1024, 40))


@dataclass(frozen=True)
class PipelineConfig:
    grid: VoxelGridSpec = field(default_factory=default_grid)
    layers_3d: tuple = field(default_factory=default_layers_3d)
    layers_2d: tuple = field(default_factory=default_layers_2d)
    filter: FilterConfig = field(default_factory=FilterConfig)
    heatmap_stride: int = 8
    predictor_path: Optional[str] = None
    model_path: Optional[str] = None
    inputs: tuple = ()
    output_dir: str = "out"
    reduce: str = "mean"
    seed: int = 0
    track_rulebook: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers_3d", tuple(self.layers_3d))
        object.__setattr__(self, "layers_2d", tuple(self.layers_2d))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        self.validate()

    def validate(self):
        if not self.layers_3d:
            raise ConfigError("at least one 3D layer is required")
        chain = list(self.layers_3d) + list(self.layers_2d)
        for i, (a, b) in enumerate(zip(chain, chain[1:])):
            if a.c_out != b.c_in:
                raise ConfigError(f"layer {i} outputs {a.c_out} channels but layer {i + 1} expects {b.c_in}")
        if self.layers_3d[0].c_in != (1 if self.reduce == "count" else 4):
            raise ConfigError("first 3D layer width must match the voxel feature width")
        for i, l in enumerate(self.layers_3d):
            if l.norm == "normal":
                raise ConfigError(f"3D layer {i}: normal batch norm would densify the voxel grid")
        for name, layers, idx in (("3D", self.layers_3d, self.filter.apply_layers_3d),
                                  ("2D", self.layers_2d, self.filter.apply_layers_2d)):
            for i in idx:
                if not 0 <= i < len(layers):
                    raise ConfigError(f"{name} filter index {i} does not name a layer")
        for point in self.filter_points():
            stride = self.stride_before(point)
            if self.heatmap_stride % stride:
                raise ConfigError(f"filter point {point} at stride {stride} does not divide the heatmap stride")

    def filter_points(self) -> list:
        return [f"3d.{i}" for i in self.filter.apply_layers_3d] + [f"2d.{i}" for i in self.filter.apply_layers_2d]

    def stride_before(self, point: str) -> int:
        """Cumulative stride of the tensor entering layer ``point`` (``"3d.i"`` or ``"2d.i"``)."""
        stage, idx = point.split(".")
        idx = int(idx)
        s = 1
        layers = self.layers_3d[:idx] if stage == "3d" else self.layers_3d + self.layers_2d[:idx]
        for l in layers:
            s *= l.stride
        return s

    def pool_at(self, point: str) -> int:
        return self.heatmap_stride // self.stride_before(point)

    def without_filtering(self) -> "PipelineConfig":
        return replace(self, filter=replace(self.filter, apply_layers_3d=(), apply_layers_2d=()))

    def with_norm_2d(self, norm: str) -> "PipelineConfig":
        return replace(self, layers_2d=tuple(replace(l, norm=norm) for l in self.layers_2d))

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "grid": self.grid.to_dict(),
            "layers_3d": [l.to_dict() for l in self.layers_3d],
            "layers_2d": [l.to_dict() for l in self.layers_2d],
            "filter": self.filter.to_dict(),
            "heatmap_stride": self.heatmap_stride,
            "predictor_path": self.predictor_path,
            "model_path": self.model_path,
            "inputs": list(self.inputs),
            "output_dir": self.output_dir,
            "reduce": self.reduce,
            "seed": self.seed,
            "track_rulebook": self.track_rulebook,
        }

    @classmethod
    def from_dict(cls, d, base_dir: Optional[str] = None) -> "PipelineConfig":
        try:
            if d.get("schema_version") != SCHEMA_VERSION:
                raise ConfigError(f"unsupported config schema_version {d.get('schema_version')!r}")
            kw = {k: v for k, v in d.items() if k != "schema_version"}
            if "grid" in kw:
                kw["grid"] = VoxelGridSpec.from_dict(kw["grid"])
            for key in ("layers_3d", "layers_2d"):
                if key in kw:
                    kw[key] = tuple(LayerSpec(**l) for l in kw[key])
            if "filter" in kw:
                kw["filter"] = FilterConfig.from_dict(kw["filter"])
            if base_dir is not None:
                for key in ("predictor_path", "model_path", "output_dir"):
                    if kw.get(key) is not None:
                        kw[key] = os.path.normpath(os.path.join(base_dir, kw[key]))
                kw["inputs"] = tuple(os.path.normpath(os.path.join(base_dir, p)) for p in kw.get("inputs", ()))
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, KeyError, ValueError) as e:
            raise ConfigError(f"malformed config: {e}") from e

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(d, os.path.dirname(os.path.abspath(path)))


@dataclass
class Model:
    """Convolution weights and fitted norm statistics for every layer, plus an optional predictor."""

    cfg: PipelineConfig
    kernels_3d: list
    kernels_2d: list
    norms_3d: list
    norms_2d: list
    predictor: Optional[PredictorNet] = None

    def to_dict(self):
        def layer(k, n):
            return {"kernel": k.to_dict(), "norm": None if n is None else n.to_dict()}

        return {
            "schema_version": SCHEMA_VERSION,
            "padding": "zero",
            "layers_3d": [layer(k, n) for k, n in zip(self.kernels_3d, self.norms_3d)],
            "layers_2d": [layer(k, n) for k, n in zip(self.kernels_2d, self.norms_2d)],
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path, cfg: PipelineConfig, predictor=None) -> "Model":
        with open(path) as f:
            d = json.load(f)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported model schema_version {d.get('schema_version')!r}")

        def parse(layers, specs):
            if len(layers) != len(specs):
                raise ConfigError("model file and config disagree on layer count")
            ks, ns = [], []
            for l, s in zip(layers, specs):
                k = KernelWeights.from_dict(l["kernel"])
                if (k.c_in, k.c_out, k.kernel_size, k.stride, k.conv_kind) != (s.c_in, s.c_out, s.kernel_size, s.stride, s.conv_kind):
                    raise ConfigError("model file kernel does not match the config layer")
                ks.append(k)
                ns.append(None if l["norm"] is None else NormParams.from_dict(l["norm"]))
            return ks, ns

        k3, n3 = parse(d["layers_3d"], cfg.layers_3d)
        k2, n2 = parse(d["layers_2d"], cfg.layers_2d)
        return cls(cfg, k3, k2, n3, n2, predictor)


def init_kernels(cfg: PipelineConfig, seed: int):
    out = []
    for stage, layers, ndim in (("3d", cfg.layers_3d, 3), ("2d", cfg.layers_2d, 2)):
        ks = []
        for i, l in enumerate(layers):
            s = np.random.SeedSequence([seed, ndim, i]).generate_state(1)[0]
            ks.append(KernelWeights.random(l.c_in, l.c_out, l.kernel_size, l.stride, l.conv_kind, ndim, int(s)))
        out.append(ks)
    return out


@dataclass
class RunResult:
    final_3d: object
    bev: SparseBEVTensor
    final_2d: SparseBEVTensor
    ledger: CostLedger
    density: Optional[DensityHeatmap]
    artifacts: dict
    captured: dict
    dropped: dict


class _Stop(Exception):
    pass


def heatmap_grid(cfg: PipelineConfig) -> VoxelGridSpec:
    return cfg.grid.coarsened(cfg.heatmap_stride)


def _block(x, spec: LayerSpec, norm: Optional[NormParams]):
    if spec.norm != "none":
        if norm is None or norm.variant != spec.norm:
            raise ConfigError(f"layer wants {spec.norm!r} norm statistics, model has {getattr(norm, 'variant', None)!r}")
        x = normalize(x, norm)
    if spec.relu:
        x = relu(x)
    return x


def run_pipeline(
    model: Model,
    points: np.ndarray,
    cfg: Optional[PipelineConfig] = None,
    capture=(),
    stop_after_capture: bool = False,
    fit_norms: bool = False,
) -> RunResult:
    """Voxelize and run both backbones, filtering at the configured layer inputs.

    ``capture`` names filter points (``"3d.1"``, ``"2d.3"``...) whose
    post-activation input tensors are kept, projected to BEV for 3D points.
    With ``fit_norms`` any missing norm statistics are fit on this cloud as it
    passes through, unfiltered, and stored in ``model``.
    """
    cfg = model.cfg if cfg is None else cfg
    capture = set(capture)
    ledger = CostLedger(track_rulebook=cfg.track_rulebook)
    artifacts, captured, drops = {}, {}, {}
    filt = cfg.filter
    active = filt.drop_rate > 0 and not fit_norms
    density = None
    uses_net = filt.score_mode in ("predictor+density", "predictor")
    if active and cfg.filter_points():
        if uses_net and model.predictor is None:
            raise ConfigError("filtering needs predictor weights")
        density = density_heatmap(points, heatmap_grid(cfg), filt.g)
        artifacts["density"] = density.values

    def point_density(point, extent):
        if density is None:
            return None
        return density.upsampled(cfg.pool_at(point), extent)

    def visit(stage, i, x):
        point = f"{stage}.{i}"
        spec = (cfg.layers_3d if stage == "3d" else cfg.layers_2d)[i]
        norms = model.norms_3d if stage == "3d" else model.norms_2d
        if fit_norms and spec.norm != "none" and norms[i] is None:
            norms[i] = fit_stats([x], spec.norm)
        x = _block(x, spec, norms[i])
        pre = x.dense_rate if x.extent is not None else None
        if point in capture:
            captured[point] = project_3d_to_2d(x, x.extent[:2]) if stage == "3d" else x
            if stop_after_capture and capture <= set(captured):
                raise _Stop
        apply = (i in (filt.apply_layers_3d if stage == "3d" else filt.apply_layers_2d)) and active
        if apply:
            fn = filter_3d if stage == "3d" else filter_2d
            pool = cfg.pool_at(point)
            if uses_net:
                plane = project_3d_to_2d(x, x.extent[:2]) if stage == "3d" else x
                artifacts[f"heatmap_{point}"] = predictor_forward(plane, model.predictor, pool)
            x, mask, dropped = fn(x, filt, model.predictor, point_density(point, x.extent[:2]), pool,
                                  seed=cfg.seed + 1000 * (stage == "2d") + i, ledger=ledger,
                                  name=f"predictor.{point}", details=True)
            artifacts[f"mask_{point}"] = mask.to_dense()
            drops[point] = dropped
        post = x.dense_rate if x.extent is not None else None
        kernel = (model.kernels_3d if stage == "3d" else model.kernels_2d)[i]
        x = sparse_conv(x, kernel, ledger, name=f"{stage}.L{i}", stage=stage)
        ledger.annotate(f"{stage}.L{i}", dense_pre=pre, dense_post=post)
        return x

    try:
        x = voxelize(points, cfg.grid, cfg.reduce)
        x3 = x
        bev = final = None
        for i in range(len(cfg.layers_3d)):
            x3 = _guard(f"3d.L{i}", visit, "3d", i, x3)
        bev = project_3d_to_2d(x3, x3.extent[:2])
        x2 = bev
        for i in range(len(cfg.layers_2d)):
            x2 = _guard(f"2d.L{i}", visit, "2d", i, x2)
        final = x2
    except _Stop:
        return RunResult(None, None, None, ledger, density, artifacts, captured, drops)
    return RunResult(x3, bev, final, ledger, density, artifacts, captured, drops)


def _guard(name, fn, *args):
    try:
        return fn(*args)
    except _Stop:
        raise
    except LayerError:
        raise
    except VoxPruneError as e:
        raise LayerError(name, e) from e


def build_model(cfg: PipelineConfig, calib_points: np.ndarray, seed: Optional[int] = None,
                predictor: Optional[PredictorNet] = None) -> Model:
    """Seeded convolution weights with norm statistics fit on an unfiltered pass of ``calib_points``."""
    seed = cfg.seed if seed is None else seed
    k3, k2 = init_kernels(cfg, seed)
    model = Model(cfg, k3, k2, [None] * len(k3), [None] * len(k2), predictor)
    run_pipeline(model, calib_points, cfg.without_filtering(), fit_norms=True)
    return model


def calibration_cloud(seed: int) -> np.ndarray:
    """Cloud used to fit norm statistics: a member of the random scene family."""
    from .scene import generate_scene, random_scene_spec

    return generate_scene(random_scene_spec(10_000 + seed)).points


def filter_point_samples(model: Model, scenes, points=None, cfg: Optional[PipelineConfig] = None) -> list:
    """``(input tensor, boxes in its cell units, pool)`` at each filter point of each scene, unfiltered.

    ``scenes`` are :class:`~voxprune.scene.Scene` objects.
    """
    from .scene import boxes_on_grid

    cfg = model.cfg if cfg is None else cfg
    points = cfg.filter_points() if points is None else list(points)
    base = cfg.without_filtering()
    out = []
    for sc in scenes:
        r = run_pipeline(model, sc.points, base, capture=points, stop_after_capture=True)
        for p in points:
            stride = cfg.stride_before(p)
            grid = cfg.grid.coarsened(stride) if stride > 1 else cfg.grid
            out.append((r.captured[p], boxes_on_grid(sc.boxes, grid), cfg.pool_at(p)))
    return out


def with_refit_2d_norms(model: Model, cfg: PipelineConfig, calib_points: np.ndarray) -> Model:
    """Same weights, 2D norm statistics refit for ``cfg`` (e.g. a different 2D norm variant)."""
    m = Model(cfg, model.kernels_3d, model.kernels_2d, list(model.norms_3d), [None] * len(model.kernels_2d),
              model.predictor)
    run_pipeline(m, calib_points, cfg.without_filtering(), fit_norms=True)
    return m
