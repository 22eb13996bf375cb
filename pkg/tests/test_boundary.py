"""Boundary ground truth, prediction module, loss, and perturbations."""

import numpy as np
import pytest

from cloudseg import BoundaryField, BoundaryRule, BpmParams
from cloudseg.boundary import (
    annotate_boundary_gt,
    binarize,
    bpm_apply,
    bpm_backward,
    bpm_forward,
    bpm_loss,
    downsample_boundary,
    load_boundary,
    neighbor_feature_variance,
    perturb_exchange_neighbor,
    perturb_random_flip,
    save_boundary,
)
from cloudseg.metrics import boundary_scores
from cloudseg.neighbors import knn_index, knn_points
from cloudseg.train import OptimizerState, adam_step
from conftest import make_cloud, make_scene


def oracle_boundary(positions, labels, k, ratio):
    """Literal re-count: g=0 iff strictly more than ratio*k neighbors disagree."""
    n = len(positions)
    out = np.ones(n, dtype=np.int64)
    for i in range(n):
        d2 = ((positions - positions[i]) ** 2).sum(axis=1)
        d2[i] = np.inf
        order = np.lexsort((np.arange(n), d2))[:k]
        disagree = int((labels[order] != labels[i]).sum())
        if disagree > ratio * k:
            out[i] = 0
    return out


def test_gt_matches_oracle_on_scenes():
    for seed in range(8):
        cloud = make_scene(seed, points=300)
        k = min(16, cloud.n - 1)
        rule = BoundaryRule(k, 0.4)
        idx = knn_index(cloud, k)
        got = annotate_boundary_gt(cloud, idx, rule).hard
        want = oracle_boundary(cloud.positions, cloud.labels, k, 0.4)
        np.testing.assert_array_equal(got, want)


def test_gt_strictness_at_threshold():
    # k=5, ratio=0.4: exactly 2 disagreeing neighbors is NOT a boundary (2 > 2 false)
    positions = np.array([[float(i), 0, 0] for i in range(6)])
    labels = np.array([0, 0, 0, 0, 1, 1])
    from cloudseg import PointCloud
    cloud = PointCloud(positions, np.full((6, 3), 0.5), 2, labels)
    idx = knn_index(cloud, 5)
    lib = annotate_boundary_gt(cloud, idx, BoundaryRule(5, 0.4)).hard
    np.testing.assert_array_equal(lib, oracle_boundary(positions, labels, 5, 0.4))
    # every label-0 point sees exactly the two label-1 points among its five
    # neighbors; 2 > 2 fails, so all of them are interior
    np.testing.assert_array_equal(lib[:4], [1, 1, 1, 1])
    # label-1 points see four disagreeing neighbors out of five
    np.testing.assert_array_equal(lib[4:], [0, 0])


def test_gt_ratio_monotonicity():
    cloud = make_scene(3, points=400)
    k = 16
    idx = knn_index(cloud, k)
    counts = []
    for ratio in (0.1, 0.3, 0.5, 0.7):
        g = annotate_boundary_gt(cloud, idx, BoundaryRule(k, ratio)).hard
        counts.append(int((g == 0).sum()))
    assert counts == sorted(counts, reverse=True)


def test_gt_label_permutation_invariance():
    cloud = make_scene(4, points=300)
    idx = knn_index(cloud, 12)
    rule = BoundaryRule(12, 0.4)
    base = annotate_boundary_gt(cloud, idx, rule).hard
    from cloudseg import PointCloud
    perm = np.array([2, 3, 1, 0])
    relabeled = PointCloud(cloud.positions, cloud.colors, 4, perm[cloud.labels])
    np.testing.assert_array_equal(annotate_boundary_gt(relabeled, idx, rule).hard, base)


def test_variance_matches_naive():
    cloud = make_cloud(7, n=60)
    idx = knn_points(cloud.positions, 9)
    got = neighbor_feature_variance(cloud.colors, idx)
    for i in range(cloud.n):
        rows = cloud.colors[idx.neighbors[i]]
        want = rows.var(axis=0)  # population variance
        np.testing.assert_allclose(got[i], want, atol=1e-12)


def test_variance_hand_case():
    # two neighbors with channel values {0, 2}: population variance 1
    positions = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    colors = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
    from cloudseg import PointCloud
    cloud = PointCloud(positions, colors, 2, None)
    idx = knn_points(positions, 2)
    var = neighbor_feature_variance(colors * 2.0, idx)
    assert var[0, 0] == pytest.approx(1.0)  # neighbors 1,2 have values 0,2


def test_loss_hand_value():
    loss, _ = bpm_loss(BoundaryField(soft=np.array([0.9, 0.1])),
                       BoundaryField(hard=np.array([1, 0])), 1.0, 10.0)
    assert loss == pytest.approx(1.1589657, abs=1e-6)
    # closed form: -(1 + 10) * log(0.9)
    assert loss == pytest.approx(-11 * np.log(0.9), abs=1e-12)


def test_loss_is_a_sum_not_a_mean():
    pred = BoundaryField(soft=np.array([0.9, 0.9, 0.9, 0.9]))
    truth = BoundaryField(hard=np.array([1, 1, 1, 1]))
    one, _ = bpm_loss(BoundaryField(soft=np.array([0.9])),
                      BoundaryField(hard=np.array([1])), 1.0, 10.0)
    four, _ = bpm_loss(pred, truth, 1.0, 10.0)
    assert four == pytest.approx(4 * one, rel=1e-12)


def test_loss_clamps_extreme_predictions():
    loss, grad = bpm_loss(BoundaryField(soft=np.array([0.0, 1.0])),
                          BoundaryField(hard=np.array([1, 0])), 1.0, 10.0)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(100):
        n = int(rng.integers(2, 12))
        ghat = rng.uniform(0.05, 0.95, n)
        g = rng.integers(0, 2, n)
        w1, w2 = float(rng.uniform(0.5, 2)), float(rng.uniform(1, 12))
        _, grad = bpm_loss(BoundaryField(soft=ghat), BoundaryField(hard=g), w1, w2)
        for i in range(n):
            plus = ghat.copy(); plus[i] += h
            minus = ghat.copy(); minus[i] -= h
            lp, _ = bpm_loss(BoundaryField(soft=plus), BoundaryField(hard=g), w1, w2)
            lm, _ = bpm_loss(BoundaryField(soft=minus), BoundaryField(hard=g), w1, w2)
            numeric = (lp - lm) / (2 * h)
            assert abs(grad[i] - numeric) / max(abs(numeric), 1.0) < 1e-5


def test_bpm_forward_shapes_and_range():
    cloud = make_scene(2, points=200)
    idx = knn_index(cloud, 16)
    params = BpmParams.create(np.random.default_rng(0))
    field = bpm_forward(cloud, idx, params)
    assert field.soft.shape == (cloud.n,)
    assert np.all(field.soft > 0.0) and np.all(field.soft < 1.0)


def test_bpm_backward_matches_finite_differences():
    cloud = make_cloud(5, n=40)
    idx = knn_points(cloud.positions, 8)
    var = neighbor_feature_variance(cloud.colors, idx)
    params = BpmParams.create(np.random.default_rng(3), widths=(3, 6, 1))
    gt = BoundaryField(hard=np.random.default_rng(4).integers(0, 2, cloud.n))

    def loss_now():
        ghat, _ = bpm_apply(var, params)
        val, _ = bpm_loss(BoundaryField(soft=ghat), gt, params.w1, params.w2)
        return val

    ghat, cache = bpm_apply(var, params)
    _, dghat = bpm_loss(BoundaryField(soft=ghat), gt, params.w1, params.w2)
    grads = bpm_backward(params, cache, dghat)
    h = 1e-6
    for name, arr in params.mlp.params().items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h; lp = loss_now()
            flat[i] = orig - h; lm = loss_now()
            flat[i] = orig
            numeric = (lp - lm) / (2 * h)
            assert abs(gflat[i] - numeric) / max(abs(numeric), abs(gflat[i]), 1e-3) < 1e-4


def test_bpm_learns_better_than_constant_baseline():
    # end to end: trained BPM must beat the best constant predictor on F1
    rule = BoundaryRule(16, 0.4)
    train = [make_scene(s, points=400) for s in range(20, 24)]
    held = [make_scene(s, points=400) for s in range(30, 33)]
    params = BpmParams.create(np.random.default_rng(0))
    blocks = {k: a for k, a in params.mlp.params().items()}
    opt = OptimizerState(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, step=0,
                         m={k: np.zeros_like(a) for k, a in blocks.items()},
                         v={k: np.zeros_like(a) for k, a in blocks.items()})
    cached = []
    for c in train:
        idx = knn_index(c, rule.k)
        cached.append((neighbor_feature_variance(c.colors, idx),
                       annotate_boundary_gt(c, idx, rule)))
    for step in range(400):
        var, gt = cached[step % len(cached)]
        ghat, cache = bpm_apply(var, params)
        _, dghat = bpm_loss(BoundaryField(soft=ghat), gt, params.w1, params.w2)
        adam_step(blocks, bpm_backward(params, cache, dghat), opt)
    f1_model, f1_const = [], []
    for c in held:
        idx = knn_index(c, rule.k)
        gt = annotate_boundary_gt(c, idx, rule)
        pred = binarize(bpm_forward(c, idx, params))
        f1_model.append(boundary_scores(gt.hard, pred.hard)[2])
        all_boundary = np.zeros(c.n, dtype=np.int64)
        f1_const.append(boundary_scores(gt.hard, all_boundary)[2])
    assert np.mean(f1_model) > np.mean(f1_const)


def test_binarize_threshold():
    field = BoundaryField(soft=np.array([0.0, 0.49, 0.5, 0.51, 1.0]))
    np.testing.assert_array_equal(binarize(field).hard, [0, 0, 1, 1, 1])


def test_downsample_gathers_rows():
    field = BoundaryField(hard=np.array([1, 0, 1, 0]), soft=np.array([0.9, 0.1, 0.8, 0.2]))
    sub = downsample_boundary(field, np.array([2, 0]))
    np.testing.assert_array_equal(sub.hard, [1, 1])
    np.testing.assert_allclose(sub.soft, [0.8, 0.9])


def test_flip_count_and_involution():
    field = BoundaryField(hard=np.random.default_rng(0).integers(0, 2, 200))
    flipped = perturb_random_flip(field, 0.1, seed=5)
    changed = int((flipped.hard != field.hard).sum())
    assert changed == 20
    again = perturb_random_flip(flipped, 0.1, seed=5)  # same seed flips the same points
    np.testing.assert_array_equal(again.hard, field.hard)


def test_flip_zero_fraction_is_identity():
    field = BoundaryField(hard=np.array([0, 1, 1, 0]))
    np.testing.assert_array_equal(perturb_random_flip(field, 0.0, 1).hard, field.hard)


def test_exchange_swaps_with_nearest_neighbor():
    positions = np.array([[0.0, 0, 0], [0.1, 0, 0], [5.0, 0, 0], [5.1, 0, 0]])
    idx = knn_points(positions, 1)
    field = BoundaryField(hard=np.array([0, 1, 0, 1]))
    out = perturb_exchange_neighbor(field, idx, 1.0, seed=0)
    # both boundary points swap with their nearest neighbor
    np.testing.assert_array_equal(out.hard, [1, 0, 1, 0])


def test_exchange_conserves_total_count():
    cloud = make_cloud(9, n=150)
    idx = knn_points(cloud.positions, 4)
    field = BoundaryField(hard=np.random.default_rng(2).integers(0, 2, 150))
    out = perturb_exchange_neighbor(field, idx, 0.5, seed=3)
    assert out.hard.sum() == field.hard.sum()


def test_boundary_file_round_trip(tmp_path):
    hard = BoundaryField(hard=np.array([1, 0, 1]))
    soft = BoundaryField(soft=np.array([0.25, 0.5, 0.125]))
    ph, ps = tmp_path / "h.bnd", tmp_path / "s.bnd"
    save_boundary(hard, ph)
    save_boundary(soft, ps)
    assert ph.read_text().splitlines()[0] == "3 hard"
    np.testing.assert_array_equal(load_boundary(ph).hard, hard.hard)
    np.testing.assert_allclose(load_boundary(ps).soft, soft.soft, rtol=1e-8)


def test_field_requires_some_values():
    with pytest.raises(ValueError):
        BoundaryField()
