import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import random_sparse
from voxprune.errors import ConfigError, EmptyBatch, ShapeError
from voxprune.norm import NormParams, fit_stats, normalize, relu
from voxprune.voxel import SparseBEVTensor


def _params(rng, c, variant="sp", gamma_pos=True):
    g = rng.uniform(0.1, 2.0, c) if gamma_pos else rng.normal(size=c)
    return NormParams(rng.uniform(0.1, 3.0, c), rng.normal(size=c), g, rng.normal(size=c), 1e-5, variant)


def test_sp_formula(rng):
    t = random_sparse(rng, (6, 6, 3), 4)
    p = _params(rng, 4)
    out = normalize(t, p)
    np.testing.assert_allclose(out.feats, t.feats * p.gamma / np.sqrt(p.var + p.eps) + p.beta,
                               rtol=1e-12, atol=1e-15)
    assert np.array_equal(out.coords, t.coords)


def test_nonzero_formula(rng):
    t = random_sparse(rng, (6, 6), 3)
    p = _params(rng, 3, "nonzero")
    out = normalize(t, p)
    np.testing.assert_allclose(out.feats, (t.feats - p.mean) * p.gamma / np.sqrt(p.var + p.eps) + p.beta)
    assert np.array_equal(out.coords, t.coords)


def test_sp_zero_maps_to_beta(rng):
    p = _params(rng, 3)
    t = SparseBEVTensor(np.array([[0, 0]]), np.zeros((1, 3)), (2, 2))
    np.testing.assert_array_equal(normalize(t, p).feats[0], p.beta)


@given(st.integers(0, 2**32 - 1), hnp.arrays(np.float64, 40, elements=st.floats(-1e3, 1e3)))
def test_sp_preserves_order(seed, values):
    rng = np.random.default_rng(seed)
    p = _params(rng, 1)
    t = SparseBEVTensor(np.column_stack([np.arange(40), np.zeros(40, int)]), values[:, None], (40, 1))
    out = normalize(t, p).feats[:, 0]
    i, j = np.triu_indices(40, 1)
    lt = values[i] < values[j]
    assert (out[i][lt] <= out[j][lt]).all()
    # strict wherever the gap survives float64 rounding of the shift by beta
    resolvable = lt & (values[j] - values[i] > 1e-9 * (1.0 + np.abs(values).max()))
    assert (out[i][resolvable] < out[j][resolvable]).all()


def test_normal_densifies(rng):
    t = random_sparse(rng, (5, 7), 2, 0.2)
    p = _params(rng, 2, "normal")
    out = normalize(t, p)
    assert out.dense_rate == 1.0
    dense = t.to_dense()
    want = (dense - p.mean[:, None, None]) * (p.gamma / np.sqrt(p.var + p.eps))[:, None, None] + p.beta[:, None, None]
    np.testing.assert_allclose(out.to_dense(), want)
    with pytest.raises(ConfigError):
        normalize(random_sparse(rng, (3, 3, 3), 2), p)


def test_fit_stats_population(rng):
    batch = [random_sparse(rng, (6, 5), 3, 0.4) for _ in range(3)]
    stored = np.concatenate([t.feats for t in batch])
    sp = fit_stats(batch, "sp")
    np.testing.assert_allclose(sp.mean, stored.mean(axis=0))
    np.testing.assert_allclose(sp.var, stored.var(axis=0))
    dense = np.concatenate([t.to_dense().reshape(3, -1).T for t in batch])
    nb = fit_stats(batch, "normal")
    np.testing.assert_allclose(nb.mean, dense.mean(axis=0))
    np.testing.assert_allclose(nb.var, dense.var(axis=0))


def test_fit_stats_errors(rng):
    with pytest.raises(EmptyBatch):
        fit_stats([])
    with pytest.raises(ShapeError):
        fit_stats([random_sparse(rng, (3, 3), 1), random_sparse(rng, (3, 3), 2)])
    with pytest.raises(ConfigError):
        fit_stats([random_sparse(rng, (3, 3), 1)], "group")


def test_params_validation_and_roundtrip(rng):
    with pytest.raises(ConfigError):
        NormParams(-np.ones(2), np.zeros(2), np.ones(2), np.zeros(2))
    with pytest.raises(ShapeError):
        NormParams(np.ones(2), np.zeros(3), np.ones(2), np.zeros(2))
    with pytest.raises(ConfigError):
        NormParams.identity(2, "layer")
    p = _params(rng, 4, "nonzero")
    q = NormParams.from_dict(p.to_dict())
    for k in ("var", "mean", "gamma", "beta"):
        np.testing.assert_array_equal(getattr(p, k), getattr(q, k))
    assert (q.variant, q.eps) == ("nonzero", p.eps)
    with pytest.raises(ShapeError):
        normalize(random_sparse(rng, (3, 3), 2), p)


def test_identity_is_identity(rng):
    t = random_sparse(rng, (4, 4, 4), 3)
    np.testing.assert_allclose(normalize(t, NormParams.identity(3)).feats, t.feats, rtol=1e-12)


def test_relu_keeps_coords(rng):
    t = random_sparse(rng, (4, 4, 4), 3)
    out = relu(t)
    assert np.array_equal(out.coords, t.coords)
    assert (out.feats >= 0).all()
    np.testing.assert_array_equal(out.feats, np.maximum(t.feats, 0))
