"""Grouped-convolution importance predictor with hand-written backpropagation."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .costs import BYTES_PER_VALUE, LayerCost
from .errors import ConfigError, DivergedError, EmptyBatch, ShapeError
from .voxel import SparseBEVTensor

WEIGHTS_VERSION = 1
TRUNK_CHANNELS = (16, 32, 16)
GROUPS = 8
KERNEL = 3
ACTIVATIONS = ("softplus", "relu", "identity")


def _uniform(rng, fan_in, shape):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class PredictorNet:
    """Per-width 1x1 compression to 16 channels, three grouped 3x3 convs, 1x1 head, sigmoid.

    The three grouped convs are followed by ``activation`` (softplus by
    default, which keeps the loss smooth in every parameter). Parameters live in
    ``params`` keyed ``compress.<width>.w``, ``conv<i>.w``, ``head.w`` and the
    matching ``.b`` biases. Convolution weights are ``(C_out, C_in / groups, 3, 3)``.
    ``input_scale`` holds a fixed divisor per input width (1 when absent),
    fit from the training inputs so the first layer sees values in [0, 1].
    """

    params: dict
    channels: tuple = TRUNK_CHANNELS
    groups: int = GROUPS
    pool: int = 8
    input_scale: dict = field(default_factory=dict)
    activation: str = "softplus"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        self.channels = tuple(int(c) for c in self.channels)
        for c in self.channels:
            if c % self.groups:
                raise ConfigError(f"channel count {c} not divisible by {self.groups} groups")
        for i, (ci, co) in enumerate(zip((self.channels[0],) + self.channels[:-1], self.channels)):
            want = (co, ci // self.groups, KERNEL, KERNEL)
            if self.params[f"conv{i}.w"].shape != want:
                raise ShapeError(f"conv{i}.w has shape {self.params[f'conv{i}.w'].shape}, expected {want}")
        if self.params["head.w"].shape != (1, self.channels[-1]):
            raise ShapeError("head weight must be (1, last trunk width)")

    @classmethod
    def create(cls, input_widths=(), seed: int = 0, channels=TRUNK_CHANNELS, groups=GROUPS, pool=8,
               activation="softplus"):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        params = {}
        prev = channels[0]
        for i, c in enumerate(channels):
            fan = (prev // groups) * KERNEL * KERNEL
            params[f"conv{i}.w"] = _uniform(rng, fan, (c, prev // groups, KERNEL, KERNEL))
            params[f"conv{i}.b"] = _uniform(rng, fan, (c,))
            prev = c
        params["head.w"] = _uniform(rng, prev, (1, prev))
        params["head.b"] = _uniform(rng, prev, (1,))
        net = cls(params, channels, groups, pool, activation=activation)
        for w in input_widths:
            net.add_input_width(w, seed)
        return net

    def add_input_width(self, width: int, seed: int = 0):
        """Create the 1x1 compression layer for inputs with ``width`` channels."""
        if f"compress.{width}.w" in self.params:
            return
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, int(width)]))
        self.params[f"compress.{width}.w"] = _uniform(rng, width, (self.channels[0], width))
        self.params[f"compress.{width}.b"] = _uniform(rng, width, (self.channels[0],))

    @property
    def input_widths(self) -> list:
        return sorted(int(k.split(".")[1]) for k in self.params if k.startswith("compress.") and k.endswith(".w"))

    def copy(self) -> "PredictorNet":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "version": WEIGHTS_VERSION,
            "channels": list(self.channels),
            "groups": self.groups,
            "pool": self.pool,
            "activation": self.activation,
            "input_scale": {str(k): v for k, v in sorted(self.input_scale.items())},
            "layers": [{"name": k, "shape": list(v.shape), "data": v.tolist()} for k, v in sorted(self.params.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorNet":
        if d.get("version") != WEIGHTS_VERSION:
            raise ConfigError(f"unsupported predictor weights version {d.get('version')!r}")
        params = {}
        for layer in d["layers"]:
            arr = np.array(layer["data"], dtype=np.float64)
            if list(arr.shape) != list(layer["shape"]):
                raise ShapeError(f"{layer['name']}: data shape {arr.shape} != declared {layer['shape']}")
            params[layer["name"]] = arr
        for w in [k for k in params if k.startswith("compress.") and k.endswith(".w")]:
            width = int(w.split(".")[1])
            if params[w].shape != (d["channels"][0], width):
                raise ShapeError(f"{w} has shape {params[w].shape}")
        scale = {int(k): float(v) for k, v in d.get("input_scale", {}).items()}
        return cls(params, tuple(d["channels"]), d["groups"], d["pool"], scale, d.get("activation", "softplus"))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "PredictorNet":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def max_pool_sparse(x: SparseBEVTensor, pool: int) -> np.ndarray:
    """Channels-first ``(C, ceil(W/pool), ceil(H/pool))`` max over windows, absent cells read as 0."""
    W, H = x.extent
    Wc, Hc = -(-W // pool), -(-H // pool)
    C = x.channels
    out = np.full((C, Wc * Hc), -np.inf)
    cell = (x.coords[:, 0] // pool) * Hc + x.coords[:, 1] // pool
    np.maximum.at(out.T, cell, x.feats)
    count = np.bincount(cell, minlength=Wc * Hc)
    wu = np.minimum(pool, W - np.arange(Wc) * pool)
    wv = np.minimum(pool, H - np.arange(Hc) * pool)
    window = np.outer(wu, wv).reshape(-1)
    partial = count < window
    out[:, partial] = np.maximum(out[:, partial], 0.0)
    return out.reshape(C, Wc, Hc)


def _im2col(x: np.ndarray) -> np.ndarray:
    C, W, H = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, KERNEL * KERNEL, W, H))
    for k in range(KERNEL * KERNEL):
        a, b = divmod(k, KERNEL)
        cols[:, k] = p[:, a : a + W, b : b + H]
    return cols


def _col2im(dcols: np.ndarray) -> np.ndarray:
    C, _, W, H = dcols.shape
    p = np.zeros((C, W + 2, H + 2))
    for k in range(KERNEL * KERNEL):
        a, b = divmod(k, KERNEL)
        p[:, a : a + W, b : b + H] += dcols[:, k]
    return p[:, 1:-1, 1:-1]


def _gconv(x, w, b, groups):
    C, W, H = x.shape
    cols = _im2col(x).reshape(groups, (C // groups) * KERNEL * KERNEL, W * H)
    wm = w.reshape(groups, w.shape[0] // groups, -1)
    out = np.matmul(wm, cols).reshape(w.shape[0], W, H) + b[:, None, None]
    return out, cols


def _gconv_back(dout, cols, w, groups, in_shape):
    Co, W, H = dout.shape
    d = dout.reshape(groups, Co // groups, W * H)
    dw = np.matmul(d, cols.transpose(0, 2, 1)).reshape(w.shape)
    db = dout.sum(axis=(1, 2))
    wm = w.reshape(groups, Co // groups, -1)
    dcols = np.matmul(wm.transpose(0, 2, 1), d).reshape(in_shape[0], KERNEL * KERNEL, W, H)
    return dw, db, _col2im(dcols)


def _pointwise(x, w, b):
    return np.tensordot(w, x, axes=([1], [0])) + b[:, None, None]


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act(name, z):
    if name == "softplus":
        return np.logaddexp(0.0, z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z):
    if name == "softplus":
        return sigmoid(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def forward_dense(net: PredictorNet, x: np.ndarray, keep_cache: bool = False):
    """Run the network on a pooled channels-first array; returns the ``(W, H)`` heatmap."""
    width = x.shape[0]
    key = f"compress.{width}"
    if f"{key}.w" not in net.params:
        raise ShapeError(f"predictor has no compression layer for {width}-channel input")
    P = net.params
    x = x / net.input_scale.get(width, 1.0)
    cache = {"x": x}
    h = _pointwise(x, P[f"{key}.w"], P[f"{key}.b"])
    cache["h0"] = h
    for i in range(len(net.channels)):
        z, cols = _gconv(h, P[f"conv{i}.w"], P[f"conv{i}.b"], net.groups)
        cache[f"cols{i}"] = cols
        cache[f"z{i + 1}"] = z
        h = _act(net.activation, z)
        cache[f"h{i + 1}"] = h
    y = sigmoid(_pointwise(h, P["head.w"], P["head.b"])[0])
    cache["y"] = y
    return (y, cache) if keep_cache else y


def backward_dense(net: PredictorNet, cache: dict, dy: np.ndarray) -> dict:
    """Gradients of every parameter used in the forward pass, given dL/dy."""
    P = net.params
    y = cache["y"]
    n = len(net.channels)
    dz = (dy * y * (1.0 - y))[None]
    h = cache[f"h{n}"]
    grads = {
        "head.w": np.tensordot(dz, h, axes=([1, 2], [1, 2])),
        "head.b": dz.sum(axis=(1, 2)),
    }
    dh = np.tensordot(P["head.w"], dz, axes=([0], [0]))
    for i in reversed(range(n)):
        dz = dh * _act_grad(net.activation, cache[f"z{i + 1}"])
        prev = cache[f"h{i}"]
        grads[f"conv{i}.w"], grads[f"conv{i}.b"], dh = _gconv_back(dz, cache[f"cols{i}"], P[f"conv{i}.w"], net.groups, prev.shape)
    dz = dh
    x = cache["x"]
    key = f"compress.{x.shape[0]}"
    grads[f"{key}.w"] = np.tensordot(dz, x, axes=([1, 2], [1, 2]))
    grads[f"{key}.b"] = dz.sum(axis=(1, 2))
    return grads


def predictor_forward(x: SparseBEVTensor, net: PredictorNet, pool: Optional[int] = None, ledger=None, name="predictor"):
    """Heatmap of shape ``(ceil(W/pool), ceil(H/pool))`` with values in (0, 1)."""
    pool = net.pool if pool is None else pool
    if f"compress.{x.channels}.w" not in net.params:
        raise ShapeError(f"predictor has no compression layer for {x.channels}-channel input")
    y = forward_dense(net, max_pool_sparse(x, pool))
    if ledger is not None:
        record_predictor_costs(net, x.channels, y.shape, ledger, name)
    return y


def record_predictor_costs(net: PredictorNet, width: int, out_extent, ledger, name: str):
    sites = int(np.prod(out_extent))
    layers = [(f"{name}.compress", width, net.channels[0], 1, 1)]
    prev = net.channels[0]
    for i, c in enumerate(net.channels):
        layers.append((f"{name}.conv{i}", prev, c, net.groups, KERNEL * KERNEL))
        prev = c
    layers.append((f"{name}.head", prev, 1, 1, 1))
    for lname, ci, co, g, taps in layers:
        pairs = sites * taps
        ledger.add(LayerCost(lname, "predictor", ci, co, pairs, 2 * (ci // g) * co * pairs, sites,
                             sites * co * BYTES_PER_VALUE))


def gt_heatmap(boxes, extent, sigma: float = 5.0) -> np.ndarray:
    """Sum of unit-peak Gaussians at the box centers, clamped to 1."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    W, H = int(extent[0]), int(extent[1])
    u = np.arange(W, dtype=np.float64)[:, None]
    v = np.arange(H, dtype=np.float64)[None, :]
    out = np.zeros((W, H))
    for b in boxes:
        out += np.exp(-((u - b.u) ** 2 + (v - b.v) ** 2) / (2.0 * sigma * sigma))
    return np.minimum(out, 1.0)


def mse_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"heatmap extents differ: {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def one_cycle_lr(step: int, total: int, peak: float, warmup: float = 0.3, div: float = 25.0) -> float:
    """Linear ramp from ``peak/div`` to ``peak`` over the warmup fraction, then linear back to ``peak/div``."""
    low = peak / div
    up = max(1, int(round(warmup * total)))
    if step < up:
        return low + (peak - low) * step / up
    down = max(1, total - 1 - up)
    return peak + (low - peak) * min(1.0, (step - up) / down)


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Sample:
    """A pooled predictor input and its Gaussian target."""

    x: np.ndarray
    target: np.ndarray


def make_samples(dataset, pool: int, sigma: float = 5.0) -> list:
    """Pool each ``(SparseBEVTensor, boxes)`` pair and render boxes on the pooled grid."""
    out = []
    for x, boxes in dataset:
        px = max_pool_sparse(x, pool)
        out.append(Sample(px, gt_heatmap([b.rescaled(pool) for b in boxes], px.shape[1:], sigma)))
    return out


def fit_input_scale(net: PredictorNet, samples):
    """Set the divisor of each not-yet-scaled input width to its largest training value."""
    peaks = {}
    for s in samples:
        w = s.x.shape[0]
        peaks[w] = max(peaks.get(w, 0.0), float(np.abs(s.x).max()))
    for w, p in peaks.items():
        if w not in net.input_scale and p > 0:
            net.input_scale[w] = p


def prepare_net(net: PredictorNet, samples, seed: int = 0) -> PredictorNet:
    """Copy of ``net`` with compression layers and input scales for every width in ``samples``."""
    net = net.copy()
    for s in samples:
        net.add_input_width(s.x.shape[0], seed)
    fit_input_scale(net, samples)
    return net


def evaluate(net: PredictorNet, samples) -> float:
    """Mean per-sample MSE."""
    return float(np.mean([mse_loss(forward_dense(net, s.x), s.target) for s in samples]))


def loss_and_grads(net: PredictorNet, sample: Sample):
    y, cache = forward_dense(net, sample.x, keep_cache=True)
    loss = mse_loss(y, sample.target)
    dy = 2.0 * (y - sample.target) / y.size
    return loss, backward_dense(net, cache, dy)


def train_predictor(
    net: PredictorNet,
    dataset,
    epochs: int = 10,
    lr: float = 0.003,
    schedule: str = "one-cycle",
    pool: Optional[int] = None,
    sigma: float = 5.0,
    seed: int = 0,
):
    """Adam on per-sample MSE; returns ``(trained copy, mean loss per epoch)``.

    ``dataset`` holds ``(SparseBEVTensor, boxes)`` pairs with boxes in the
    tensor's cell units, or prepared :class:`Sample` objects.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyBatch("training set is empty")
    if schedule not in ("constant", "one-cycle"):
        raise ConfigError(f"unknown schedule {schedule!r}")
    pool = net.pool if pool is None else pool
    samples = dataset if isinstance(dataset[0], Sample) else make_samples(dataset, pool, sigma)
    net = prepare_net(net, samples, seed)
    opt = Adam()
    rng = np.random.default_rng(seed)
    total = epochs * len(samples)
    trace = []
    step = 0
    for _ in range(epochs):
        losses = []
        for i in rng.permutation(len(samples)):
            loss, grads = loss_and_grads(net, samples[i])
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergedError(step, loss)
            rate = lr if schedule == "constant" else one_cycle_lr(step, total, lr)
            opt.step(net.params, grads, rate)
            losses.append(loss)
            step += 1
        trace.append(float(np.mean(losses)))
    return net, trace
