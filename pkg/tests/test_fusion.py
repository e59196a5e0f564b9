"""Weighted feature fusion: formula, edge cases, invariants."""

import numpy as np
import pytest
import torch

from tirdet.graph import FeatureMap, ShapeError, fuse_features
from tirdet.runner import WeightedFusion


def brute_force_fusion(arrays, weights, eps):
    """Independent elementwise recomputation of the fusion formula."""
    out = np.zeros_like(arrays[0], dtype=np.float64)
    flat = [a.reshape(-1) for a in arrays]
    res = out.reshape(-1)
    denom = eps + sum(max(w, 0.0) for w in weights)
    for i in range(res.size):
        res[i] = sum(max(w, 0.0) * f[i] for w, f in zip(weights, flat)) / denom
    return out


def test_equal_weights_average():
    a = np.full((3, 4, 4), 2.0)
    b = np.full((3, 4, 4), 4.0)
    out = fuse_features([a, b], [1.0, 1.0], epsilon=1e-4)
    assert np.allclose(out, 6.0 / (2.0 + 1e-4))
    assert np.allclose(out, 3.0, atol=1e-3)


def test_zero_weight_excludes_input():
    a = np.arange(8.0).reshape(2, 2, 2)
    b = -np.ones((2, 2, 2))
    out = fuse_features([a, b], [1.0, 0.0], epsilon=1e-4)
    assert np.allclose(out, a / (1.0 + 1e-4))
    assert np.allclose(out, a, atol=1e-3)


def test_matches_brute_force_formula(rng):
    for _ in range(50):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 7)),
                 int(rng.integers(1, 7)))
        arrays = [rng.normal(size=shape) for _ in range(3)]
        weights = rng.normal(size=3).tolist()
        out = fuse_features(arrays, weights, epsilon=1e-4)
        ref = brute_force_fusion(arrays, weights, 1e-4)
        assert np.max(np.abs(out - ref)) < 1e-12


def test_all_nonpositive_weights_finite_near_zero():
    a = np.full((1, 3, 3), 100.0)
    b = np.full((1, 3, 3), -50.0)
    out = fuse_features([a, b], [-1.0, 0.0], epsilon=1e-4)
    assert np.isfinite(out).all()
    assert np.max(np.abs(out)) == 0.0


def test_convex_hull_property(rng):
    for _ in range(100):
        arrays = [rng.normal(size=(2, 5, 5)) for _ in range(4)]
        w = rng.uniform(0.25, 3.0, size=4)   # sum(relu(w)) >= 1
        out = fuse_features(arrays, w, epsilon=1e-4)
        low = np.min(arrays, axis=0)
        high = np.max(arrays, axis=0)
        assert (out >= low - 1e-9).all() and (out <= high + 1e-9).all()


def test_joint_permutation_invariance(rng):
    arrays = [rng.normal(size=(3, 6, 6)) for _ in range(3)]
    weights = [0.5, 1.5, 0.2]
    base = fuse_features(arrays, weights)
    for perm in [(1, 0, 2), (2, 1, 0), (1, 2, 0)]:
        out = fuse_features([arrays[i] for i in perm],
                            [weights[i] for i in perm])
        assert np.max(np.abs(out - base)) < 1e-12


def test_feature_map_wrapper():
    fa = FeatureMap("P3", np.ones((2, 4, 4)))
    fb = FeatureMap("P3", np.zeros((2, 4, 4)))
    out = fuse_features([fa, fb], [1.0, 1.0])
    assert isinstance(out, FeatureMap) and out.level == "P3"
    assert np.allclose(out.values, 0.5, atol=1e-3)


def test_shape_errors():
    a = np.ones((2, 4, 4))
    b = np.ones((2, 4, 5))
    with pytest.raises(ShapeError):
        fuse_features([a, b], [1.0, 1.0])
    with pytest.raises(ShapeError):
        fuse_features([a, a], [1.0])
    with pytest.raises(ShapeError):
        fuse_features([a], [1.0])


def test_torch_fusion_matches_op(rng):
    mod = WeightedFusion(3, epsilon=1e-4)
    with torch.no_grad():
        mod.weights.copy_(torch.tensor([0.3, 1.2, 0.8]))
    arrays = [rng.normal(size=(1, 2, 4, 4)).astype(np.float32) for _ in range(3)]
    with torch.no_grad():
        out_t = mod([torch.from_numpy(a) for a in arrays]).numpy()
    out_np = fuse_features([a[0] for a in arrays], [0.3, 1.2, 0.8], epsilon=1e-4)
    assert np.max(np.abs(out_t[0] - out_np)) < 1e-6
