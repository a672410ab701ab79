import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_sparse
from voxprune.bev import (
    BEVMask,
    DensityHeatmap,
    box_sum,
    density_heatmap,
    grid_to_csv,
    grid_to_pgm,
    lift_mask_2d_to_3d,
    point_counts,
    project_3d_to_2d,
    write_grid,
)
from voxprune.errors import EmptyScene, InvalidInput, ShapeError
from voxprune.voxel import SparseVoxelTensor, VoxelGridSpec


@given(st.integers(0, 2**32 - 1))
def test_projection_sums_columns(seed):
    rng = np.random.default_rng(seed)
    t = random_sparse(rng, (5, 4, 3), 2, 0.3)
    bev = project_3d_to_2d(t, (5, 4))
    cols = {}
    for c, f in zip(t.coords, t.feats):
        cols[(c[0], c[1])] = cols.get((c[0], c[1]), 0) + f
    assert [tuple(c) for c in bev.coords] == sorted(cols)
    for c, f in zip(bev.coords, bev.feats):
        np.testing.assert_allclose(f, cols[tuple(c)])
    np.testing.assert_allclose(bev.to_dense(), t.to_dense().sum(axis=3))


def test_projection_extent_check(rng):
    t = random_sparse(rng, (5, 4, 3), 1, 0.8)
    with pytest.raises(ShapeError):
        project_3d_to_2d(t, (4, 4))
    assert len(project_3d_to_2d(SparseVoxelTensor.empty(2, (2, 2, 2)), (2, 2))) == 0


@given(st.integers(0, 2**32 - 1))
def test_lift_keeps_exactly_masked_columns(seed):
    rng = np.random.default_rng(seed)
    t = random_sparse(rng, (6, 6, 4), 1, 0.3)
    keep = rng.random((6, 6)) < 0.5
    out = lift_mask_2d_to_3d(BEVMask.from_dense(keep), t)
    want = [tuple(c) for c in t.coords if keep[c[0], c[1]]]
    assert [tuple(c) for c in out.coords] == want


def test_mask_ops():
    a = BEVMask((3, 3), [[0, 0], [2, 1], [0, 0]])
    assert len(a) == 2
    b = BEVMask.full((3, 3))
    assert len(b) == 9 and len(a & b) == 2
    assert a.contains(np.array([[2, 1], [1, 1]])).tolist() == [True, False]
    assert a.to_dense().sum() == 2
    with pytest.raises(ShapeError):
        BEVMask((3, 3), [[3, 0]])
    with pytest.raises(ShapeError):
        a & BEVMask.full((2, 2))


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3, 5]))
def test_box_sum_matches_loop(seed, g):
    a = np.random.default_rng(seed).integers(0, 5, (7, 6)).astype(float)
    r = g // 2
    want = np.zeros_like(a)
    for i in range(7):
        for j in range(6):
            want[i, j] = a[max(0, i - r): i + r + 1, max(0, j - r): j + r + 1].sum()
    np.testing.assert_array_equal(box_sum(a, g), want)


def test_point_counts_and_density_frozen():
    g = VoxelGridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (4, 4, 1))
    pts = np.array([[0.5, 0.5, 0, 0], [0.2, 0.9, 0, 0], [3.5, 3.5, 0, 0], [1.5, 0.5, 0, 0], [9.0, 0.0, 0, 0]])
    counts = point_counts(pts, g)
    assert counts[0, 0] == 2 and counts[3, 3] == 1 and counts[1, 0] == 1 and counts.sum() == 4
    d = density_heatmap(pts, g, 3)
    # 3x3 window sums: (0,0) and (1,0) and (0,1) and (1,1) see 3 points, the peak
    assert d.values.max() == 1.0
    assert d.values[0, 0] == 1.0 and d.values[1, 1] == 1.0
    assert d.values[2, 2] == pytest.approx(1 / 3)
    assert d.values[3, 3] == pytest.approx(1 / 3)
    assert d.values[3, 0] == 0.0
    assert d.values[2, 0] == pytest.approx(1 / 3)


def test_density_errors():
    g = VoxelGridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (4, 4, 1))
    with pytest.raises(InvalidInput):
        density_heatmap(np.zeros((1, 4)), g, 4)
    with pytest.raises(EmptyScene):
        density_heatmap(np.array([[10.0, 10.0, 0, 0]]), g)


def test_density_upsampled():
    d = DensityHeatmap(np.array([[0.5, 1.0], [0.0, 0.25]]), 5)
    up = d.upsampled(2, (3, 4))
    assert up.extent == (3, 4)
    assert up.values[:, 0].tolist() == [0.5, 0.5, 0.0]
    assert up.values[2, 3] == 0.25


def test_grid_export(tmp_path):
    v = np.array([[0.0, 1.0, 0.5], [0.25, 0.0, 1.0]])  # W=2, H=3
    assert grid_to_csv(v) == "0.0,0.25\n1.0,0.0\n0.5,1.0\n"
    assert grid_to_csv(np.array([[True, False]])) == "1\n0\n"
    pgm = grid_to_pgm(v)
    assert pgm.startswith(b"P5\n2 3\n255\n")
    assert list(pgm[-6:]) == [0, 64, 255, 0, 128, 255]
    write_grid(tmp_path / "g.pgm", v, "pgm")
    assert (tmp_path / "g.pgm").read_bytes() == pgm
    with pytest.raises(InvalidInput):
        write_grid(tmp_path / "g.png", v, "png")
