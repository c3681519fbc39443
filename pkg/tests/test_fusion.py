import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dspoint import autodiff as ad
from dspoint.autodiff import Tensor, grad_check_many
from dspoint.fusion import PLACEMENTS, HFFusion, HfConfig, apply_placement, fuse, hf_dim, hf_encode
from dspoint.voxel import point_centers, voxel_centers, voxelize


def encode_oracle(coords, levels):
    out = []
    for row in coords:
        feats = []
        for c in row:
            feats.append(c)
            for l in range(levels):
                feats += [np.sin(2 ** l * np.pi * c), np.cos(2 ** l * np.pi * c)]
        out.append(feats)
    return np.array(out)


def test_encode_examples_exact():
    zero = hf_encode(np.zeros((1, 3)), 2).data[0, :5]
    one = hf_encode(np.ones((1, 3)), 2).data[0, :5]
    assert zero.tolist() == [0, 0, 1, 0, 1]
    assert one.tolist() == [1, 0, -1, 0, 1]


def test_encode_dimension():
    assert hf_encode(np.zeros((4, 3)), 10).shape == (4, 63)
    assert hf_dim(10) == 63


def test_encode_axis_grouping():
    out = hf_encode(np.array([[0.1, 0.2, 0.3]]), 3).data[0]
    assert out[0] == 0.1 and out[7] == 0.2 and out[14] == 0.3


def test_encode_matches_textbook_formula():
    coords = np.random.default_rng(0).uniform(size=(50, 3))
    np.testing.assert_allclose(hf_encode(coords, 6).data, encode_oracle(coords, 6), rtol=0, atol=1e-13)


def test_encode_batched_and_float32():
    coords = np.random.default_rng(1).uniform(size=(2, 5, 3)).astype(np.float32)
    out = hf_encode(coords, 4)
    assert out.shape == (2, 5, 27) and out.dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(c=arrays(np.float64, (7, 3), elements=st.floats(-4, 4)), levels=st.integers(1, 6))
def test_encode_bounds_and_identity(c, levels):
    out = hf_encode(c, levels).data.reshape(7, 3, 2 * levels + 1)
    np.testing.assert_array_equal(out[..., 0], c)
    assert np.all(np.abs(out[..., 1:]) <= 1)


def test_encode_injective_on_r8_centers():
    enc = hf_encode(voxel_centers(8), 10).data
    assert len(np.unique(enc.round(12), axis=0)) == 512


def test_bad_levels():
    with pytest.raises(ValueError):
        hf_encode(np.zeros((1, 3)), 0)
    with pytest.raises(ValueError):
        HfConfig(levels=2, placement_local="middle")


def make_inputs(seed, n=32, cl=12, cg=4, r=3):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, 3))
    centers = point_centers(voxelize(coords, Tensor(np.zeros((n, 1))), r))
    return rng, coords, centers, rng.normal(size=(n, cl)), rng.normal(size=(n, cg))


def fuse_oracle(fl, fg, coords, centers, p, levels):
    def lin(layer, x):
        return x @ layer.weight.data + layer.bias.data

    hl = fl + lin(p.linear_v, encode_oracle(centers, levels))
    hg = fg + lin(p.linear_p, encode_oracle(coords, levels))
    return lin(p.final_fuse, np.concatenate([hl, hg], axis=1))


def test_fuse_matches_numpy_oracle():
    rng, coords, centers, fl, fg = make_inputs(2)
    params = HFFusion(12, 4, 16, 4, rng)
    out = fuse(Tensor(fl), Tensor(fg), coords, centers, params)
    assert out.shape == (32, 16)
    np.testing.assert_allclose(out.data, fuse_oracle(fl, fg, coords, centers, params, 4), rtol=0, atol=1e-12)


def test_zero_weights_leave_final_bias():
    rng, coords, centers, fl, fg = make_inputs(3)
    params = HFFusion(12, 4, 16, 4, rng)
    for layer in (params.linear_v, params.linear_p, params.final_fuse):
        layer.weight.data[:] = 0
    params.final_fuse.bias.data[:] = np.arange(16)
    out = fuse(Tensor(fl), Tensor(fg), coords, centers, params).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(16.0), (32, 16)))


def test_homogeneous_in_features_with_zero_biases():
    rng, coords, centers, fl, fg = make_inputs(4)
    params = HFFusion(12, 4, 16, 4, rng)
    params.final_fuse.bias.data[:] = 0
    cfg = HfConfig(4, "none", "none")
    a = fuse(Tensor(fl), Tensor(fg), coords, centers, params, cfg).data
    b = fuse(Tensor(2.5 * fl), Tensor(2.5 * fg), coords, centers, params, cfg).data
    np.testing.assert_allclose(b, 2.5 * a, atol=1e-12)


def test_none_none_is_plain_merge():
    rng, coords, centers, fl, fg = make_inputs(5)
    params = HFFusion(12, 4, 16, 4, rng)
    out = fuse(Tensor(fl), Tensor(fg), coords, centers, params, HfConfig(4, "none", "none")).data
    want = np.concatenate([fl, fg], axis=1) @ params.final_fuse.weight.data + params.final_fuse.bias.data
    np.testing.assert_allclose(out, want, atol=1e-13)


@pytest.mark.parametrize("local,glob", list(itertools.product(PLACEMENTS, PLACEMENTS)))
def test_all_placements_wire_and_run(local, glob):
    cfg = HfConfig(4, local, glob)
    w = apply_placement(cfg)
    assert (w.local_front, w.local_back) == (local == "front", local == "back")
    assert (w.global_front, w.global_back) == (glob == "front", glob == "back")
    rng, coords, centers, fl, fg = make_inputs(6)
    out = fuse(Tensor(fl), Tensor(fg), coords, centers, HFFusion(12, 4, 16, 4, rng), cfg)
    assert out.shape == (32, 16) and np.all(np.isfinite(out.data))


def test_channel_mismatch():
    with pytest.raises(ValueError):
        HFFusion(12, 4, 15, 4, np.random.default_rng(0))
    rng, coords, centers, fl, fg = make_inputs(7)
    with pytest.raises(ad.ShapeError):
        fuse(Tensor(fl[:10]), Tensor(fg), coords, centers, HFFusion(12, 4, 16, 4, rng))


def test_fuse_grad_check():
    rng, coords, centers, fl, fg = make_inputs(8, n=10, cl=6, cg=2, r=2)
    params = HFFusion(6, 2, 8, 3, rng)
    tl = Tensor(fl, requires_grad=True)
    tg = Tensor(fg, requires_grad=True)
    w = Tensor(rng.normal(size=(10, 8)))
    report = grad_check_many(lambda: ad.sum(ad.mul(fuse(tl, tg, coords, centers, params), w)),
                             [tl, tg, *params.parameters()], tolerance=1e-4)
    assert report.passed, report.summary()


def test_encode_gradient_through_coords():
    rng = np.random.default_rng(9)
    c = Tensor(rng.uniform(size=(5, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 15)))
    report = grad_check_many(lambda: ad.sum(ad.mul(hf_encode(c, 2), w)), [c], tolerance=1e-5)
    assert report.passed, report.summary()
