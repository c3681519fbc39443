from collections import defaultdict

import numpy as np
import pytest

from dspoint import autodiff as ad
from dspoint.autodiff import Tensor, grad_check
from dspoint.voxel import CoordinateRangeError, devoxelize, point_centers, voxel_centers, voxelize


def brute_force_grid(coords, feats, r):
    """Per-voxel means by explicit grouping over every point.

    Uses the same first-member shift as the library so agreement is exact.
    """
    groups = defaultdict(list)
    for p, f in zip(coords, feats):
        a, b, c = (int(np.floor(v * r)) for v in p)
        groups[(a, b, c)].append(f)
    grid = np.zeros((r ** 3, feats.shape[1]))
    counts = np.zeros(r ** 3, dtype=int)
    for (a, b, c), members in groups.items():
        flat = (a * r + b) * r + c
        acc = np.zeros(feats.shape[1])
        for m in members:
            acc = acc + (m - members[0])
        grid[flat] = members[0] + acc / len(members)
        counts[flat] = len(members)
    return grid, counts


def test_two_points_one_voxel_average():
    grid = voxelize(np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]), Tensor([[1.0], [3.0]]), 2)
    assert grid.features.data[0, 0] == 2.0
    assert grid.counts[0] == 2


def test_index_at_upper_edge():
    grid = voxelize(np.array([[0.999, 0.0, 0.0]]), Tensor([[1.0]]), 4)
    assert grid.point_to_voxel[0] == 3 * 16


def test_out_of_range_rejected():
    with pytest.raises(CoordinateRangeError, match="normalize"):
        voxelize(np.array([[1.0, 0.5, 0.5]]), Tensor([[1.0]]), 4)


def test_matches_brute_force_grouping():
    rng = np.random.default_rng(0)
    coords = rng.uniform(0, 1, size=(200, 3))
    feats = rng.normal(size=(200, 4))
    grid = voxelize(coords, Tensor(feats), 6)
    want, counts = brute_force_grid(coords, feats, 6)
    np.testing.assert_array_equal(grid.features.data, want)
    np.testing.assert_array_equal(grid.counts, counts)


def test_invariants_on_random_instance():
    rng = np.random.default_rng(1)
    coords = rng.uniform(0, 1, size=(300, 3))
    feats = rng.normal(size=(300, 5))
    grid = voxelize(coords, Tensor(feats), 4)
    assert grid.counts.sum() == 300
    empty = grid.counts == 0
    assert empty.any()
    assert np.all(grid.features.data[empty] == 0)
    np.testing.assert_allclose((grid.features.data * grid.counts[:, None]).sum(axis=0), feats.sum(axis=0),
                               rtol=0, atol=1e-9)


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    coords = rng.uniform(0, 1, size=(100, 3))
    feats = rng.normal(size=(100, 3))
    perm = rng.permutation(100)
    a = voxelize(coords, Tensor(feats), 3)
    b = voxelize(coords[perm], Tensor(feats[perm]), 3)
    np.testing.assert_allclose(a.features.data, b.features.data, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(a.counts, b.counts)


def test_batched_matches_per_cloud():
    rng = np.random.default_rng(3)
    coords = rng.uniform(0, 1, size=(3, 50, 3))
    feats = rng.normal(size=(3, 50, 2))
    batched = voxelize(coords, Tensor(feats), 3)
    for i in range(3):
        single = voxelize(coords[i], Tensor(feats[i]), 3)
        np.testing.assert_array_equal(batched.features.data[i], single.features.data)


def test_devoxelize_single_voxel_is_homogeneous():
    rng = np.random.default_rng(4)
    coords = rng.uniform(0, 0.49, size=(10, 3))
    out = devoxelize(voxelize(coords, Tensor(rng.normal(size=(10, 3))), 2), 10).data
    assert np.all(out == out[0])


def test_devoxelize_fixed_point_on_voxel_constant_features():
    rng = np.random.default_rng(5)
    coords = rng.uniform(0, 1, size=(80, 3))
    grid0 = voxelize(coords, Tensor(np.zeros((80, 1))), 3)
    per_voxel = rng.normal(size=(27, 4))
    feats = per_voxel[grid0.point_to_voxel]
    back = devoxelize(voxelize(coords, Tensor(feats), 3), 80).data
    assert np.array_equal(back, feats)


def test_devoxelize_matches_index_lookup():
    rng = np.random.default_rng(6)
    coords = rng.uniform(0, 1, size=(60, 3))
    grid = voxelize(coords, Tensor(rng.normal(size=(60, 3))), 4)
    out = devoxelize(grid).data
    for i in range(60):
        a, b, c = (int(v * 4) for v in coords[i])
        np.testing.assert_array_equal(out[i], grid.features.data[(a * 4 + b) * 4 + c])


def test_voxel_centers():
    np.testing.assert_array_equal(voxel_centers(1), [[0.5, 0.5, 0.5]])
    c2 = voxel_centers(2)
    assert c2.shape == (8, 3)
    np.testing.assert_array_equal(c2[0], [0.25, 0.25, 0.25])
    np.testing.assert_array_equal(c2[1], [0.25, 0.25, 0.75])  # z varies fastest
    c5 = voxel_centers(5)
    assert c5.min() > 0 and c5.max() < 1


def test_point_centers_contain_points():
    rng = np.random.default_rng(7)
    coords = rng.uniform(0, 1, size=(40, 3))
    grid = voxelize(coords, Tensor(np.zeros((40, 1))), 5)
    assert np.all(np.abs(point_centers(grid) - coords) <= 0.5 / 5 + 1e-12)


def test_mean_gradient_is_one_over_count():
    coords = np.array([[0.1, 0.1, 0.1], [0.2, 0.1, 0.1], [0.9, 0.9, 0.9]])
    x = Tensor(np.ones((3, 1)), requires_grad=True)
    ad.backward(ad.sum(voxelize(coords, x, 2).features))
    np.testing.assert_allclose(x.grad[:, 0], [0.5, 0.5, 1.0])


def test_voxelize_devoxelize_grad_check():
    rng = np.random.default_rng(8)
    coords = rng.uniform(0, 1, size=(20, 3))
    w = Tensor(rng.normal(size=(20, 3)))
    x = Tensor(rng.normal(size=(20, 3)), requires_grad=True)
    report = grad_check(lambda t: ad.sum(ad.mul(ad.sin(devoxelize(voxelize(coords, t, 2))), w)), x)
    assert report.passed, report.summary()
