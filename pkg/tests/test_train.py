"""Losses, Adam, training loop determinism, evaluation, gradient checking."""

import math

import numpy as np
import pytest

import cloudseg.train as train_mod
from cloudseg import (
    OptimizerState,
    TrainConfig,
    TrainingAbort,
    evaluate,
    grad_check,
    init_network,
    network_forward,
    seg_loss,
    total_loss,
    train_loop,
)
from cloudseg.metrics import boundary_scores
from cloudseg.network import build_pyramid
from cloudseg.train import adam_step, forward_margins
from conftest import make_cloud, make_scene, tiny_arch


def test_seg_loss_uniform_logits_is_log_c():
    logits = np.zeros((12, 5))
    labels = np.arange(12) % 5
    loss, _ = seg_loss(logits, labels)
    assert loss == pytest.approx(math.log(5), rel=1e-12)


def test_seg_loss_confident_correct_is_small():
    labels = np.array([0, 1, 2])
    logits = np.full((3, 3), -50.0)
    logits[np.arange(3), labels] = 50.0
    loss, _ = seg_loss(logits, labels)
    assert loss < 1e-12


def test_seg_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(8, 4))
    labels = rng.integers(0, 4, 8)
    _, dlogits = seg_loss(logits, labels)
    h = 1e-6
    flat = logits.reshape(-1)
    gflat = dlogits.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h; lp, _ = seg_loss(logits, labels)
        flat[i] = orig - h; lm, _ = seg_loss(logits, labels)
        flat[i] = orig
        numeric = (lp - lm) / (2 * h)
        assert abs(gflat[i] - numeric) < 1e-9


def test_seg_loss_validation():
    with pytest.raises(ValueError):
        seg_loss(np.zeros((3, 2)), np.array([0, 1]))
    with pytest.raises(ValueError):
        seg_loss(np.zeros((2, 2)), np.array([0, 2]))


def test_total_loss_adds_and_aborts():
    assert total_loss(1.25, 2.5) == 3.75
    with pytest.raises(TrainingAbort):
        total_loss(float("nan"), 0.0)
    with pytest.raises(TrainingAbort):
        total_loss(0.0, float("inf"))


def test_adam_first_step_closed_form():
    # with zero moments the first bias-corrected step is lr * g / (|g| + eps)
    rng = np.random.default_rng(1)
    p = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 3))
    params = {"w": p}
    opt = OptimizerState(lr=0.01, m={"w": np.zeros_like(p)}, v={"w": np.zeros_like(p)})
    before = p.copy()
    adam_step(params, {"w": g}, opt)
    want = before - 0.01 * g / (np.abs(g) + opt.eps)
    np.testing.assert_allclose(p, want, rtol=1e-12)
    assert opt.step == 1


def test_adam_validates_block_coverage():
    p = np.zeros((2, 2))
    opt = OptimizerState(m={"w": np.zeros((2, 2))}, v={"w": np.zeros((2, 2))})
    with pytest.raises(ValueError):
        adam_step({"w": p, "extra": p}, {"w": p, "extra": p}, opt)
    with pytest.raises(ValueError):
        adam_step({"w": p}, {"w": np.zeros(3)}, opt)


def test_optimizer_state_validation():
    with pytest.raises(ValueError):
        OptimizerState(lr=0.0)
    with pytest.raises(ValueError):
        OptimizerState(beta1=1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(mask_mode="tilted")


def _small_dataset(count=3, points=160):
    return [make_scene(100 + i, points=points) for i in range(count)]


def test_train_loop_bitwise_determinism():
    data = _small_dataset()
    cfg = TrainConfig(batch_size=2, epochs=3, lr=1e-3, seed=5)
    results = []
    for _ in range(2):
        net = init_network(tiny_arch(), max(c.num_classes for c in data), seed=6)
        logs, _ = train_loop(data, net, cfg)
        results.append((logs, {k: v.copy() for k, v in net.param_blocks().items()}))
    assert results[0][0] == results[1][0]
    for name, arr in results[0][1].items():
        np.testing.assert_array_equal(arr, results[1][1][name])


def test_train_loop_resume_replays_uninterrupted_run():
    data = _small_dataset()
    classes = max(c.num_classes for c in data)
    straight = init_network(tiny_arch(), classes, seed=7)
    logs_a, _ = train_loop(data, straight, TrainConfig(batch_size=2, epochs=4, seed=8))

    resumed = init_network(tiny_arch(), classes, seed=7)
    logs_b1, opt = train_loop(data, resumed, TrainConfig(batch_size=2, epochs=2, seed=8))
    logs_b2, _ = train_loop(data, resumed, TrainConfig(batch_size=2, epochs=4, seed=8),
                            opt=opt, start_epoch=2)
    assert logs_b1 + logs_b2 == logs_a
    for name, arr in straight.param_blocks().items():
        np.testing.assert_array_equal(arr, resumed.param_blocks()[name])


def test_train_loop_reduces_loss():
    data = [make_scene(200, points=220)]
    net = init_network(tiny_arch(), data[0].num_classes, seed=9)
    logs, _ = train_loop(data, net, TrainConfig(batch_size=1, epochs=25, lr=3e-3, seed=0))
    first = float(logs[0].split("\t")[1])
    last = min(float(line.split("\t")[1]) for line in logs[-5:])
    assert last < 0.9 * first


def test_train_loop_log_format():
    data = _small_dataset(2)
    net = init_network(tiny_arch(), max(c.num_classes for c in data), seed=10)
    logs, _ = train_loop(data, net, TrainConfig(batch_size=2, epochs=2, seed=1))
    assert len(logs) == 2
    for epoch, line in enumerate(logs):
        fields = line.split("\t")
        assert len(fields) == 5
        assert int(fields[0]) == epoch
        total, seg, bpm, score = map(float, fields[1:])
        assert total == pytest.approx(seg + bpm, rel=1e-9)
        assert 0.0 <= score <= 1.0


def test_train_loop_validation():
    net = init_network(tiny_arch(), 3, seed=11)
    with pytest.raises(ValueError):
        train_loop([], net, TrainConfig(epochs=1))
    unlabeled = make_cloud(12, n=64, labeled=False)
    with pytest.raises(ValueError):
        train_loop([unlabeled], net, TrainConfig(epochs=1))


def test_train_loop_aborts_on_nonfinite_loss():
    data = _small_dataset(1)
    net = init_network(tiny_arch(), data[0].num_classes, seed=13)
    net.head.weights[0][:] = np.nan
    with pytest.raises(TrainingAbort, match="non-finite"):
        train_loop(data, net, TrainConfig(batch_size=1, epochs=1))


def test_evaluate_matches_manual_recount():
    data = [make_scene(300, points=200), make_scene(301, points=200)]
    classes = max(c.num_classes for c in data)
    net = init_network(tiny_arch(), classes, seed=14)
    report = evaluate(data, net)

    inter = np.zeros(classes); union = np.zeros(classes); present = np.zeros(classes, bool)
    band_hits = band_total = 0
    true_b, pred_b = [], []
    for cloud in data:
        pyr = build_pyramid(cloud, net.arch, net.rule)
        fp = network_forward(cloud, net, pyr)
        preds = np.argmax(fp.logits, axis=1)
        for c in range(classes):
            t, p = cloud.labels == c, preds == c
            inter[c] += np.count_nonzero(t & p)
            union[c] += np.count_nonzero(t | p)
            present[c] |= t.any()
        band = pyr.gt.hard == 0
        band_hits += int(np.count_nonzero(band & (preds == cloud.labels)))
        band_total += int(np.count_nonzero(band))
        true_b.append(pyr.gt.hard)
        pred_b.append((fp.ghat >= 0.5).astype(np.int64))
    want_miou = float(np.mean(inter[present] / union[present]))
    assert report.miou == pytest.approx(want_miou, abs=1e-12)
    assert report.band_accuracy == pytest.approx(band_hits / band_total, abs=1e-12)
    p, r, f1 = boundary_scores(np.concatenate(true_b), np.concatenate(pred_b))
    assert report.boundary_f1 == pytest.approx(f1, abs=1e-12)
    assert report.scenes == 2


def test_evaluate_perturbations_deterministic_in_seed():
    data = [make_scene(302, points=180)]
    net = init_network(tiny_arch(), data[0].num_classes, seed=15)
    a = evaluate(data, net, perturb_flip=0.05, perturb_exchange=0.05, seed=3)
    b = evaluate(data, net, perturb_flip=0.05, perturb_exchange=0.05, seed=3)
    assert a.lines() == b.lines()


def test_evaluate_force_mask_changes_predictions():
    data = [make_scene(303, points=240)]
    net = init_network(tiny_arch(), data[0].num_classes, seed=16)
    on = evaluate(data, net)
    off = evaluate(data, net, force_mask="off")
    assert not np.array_equal(on.confusion.counts, off.confusion.counts)
    # boundary metrics score the unperturbed prediction either way
    assert on.boundary_f1 == off.boundary_f1


_VETTED = []


def _vetted_instance(tolerance_pm=1e-3, tolerance_km=2e-4):
    # margin-gated redraw: finite differences need clearance from both the
    # GCO permutation ties and the ReLU kinks (h=1e-5 shifts pre-activations
    # by up to ~2e-4 on these widths)
    if _VETTED:
        return _VETTED[0]
    for attempt in range(60):
        cloud = make_cloud(40 + attempt, n=48, classes=3)
        net = init_network(tiny_arch(), 3, seed=40 + attempt)
        pm, km = forward_margins(net, cloud)
        if pm > tolerance_pm and km > tolerance_km:
            _VETTED.append((cloud, net))
            return _VETTED[0]
    raise AssertionError("no margin-safe instance found in 60 attempts")


def test_grad_check_passes_on_tiny_network():
    cloud, net = _vetted_instance()
    report = grad_check(net, cloud, tolerance=1e-4)
    assert report.passed, report.failed_blocks
    assert not report.skipped_blocks
    covered = set(report.block_errors)
    assert covered == set(net.param_blocks())
    assert any(name.startswith("bpm.") for name in covered)
    assert any(".kern." in name for name in covered)


def test_grad_check_detects_injected_fault(monkeypatch):
    cloud, net = _vetted_instance()
    real_backward = train_mod.network_backward

    def corrupted(net_, fp, dlogits, dghat=None):
        grads = real_backward(net_, fp, dlogits, dghat)
        grads["head.w0"] = grads["head.w0"] *.99
        return grads

    monkeypatch.setattr(train_mod, "network_backward", corrupted)
    report = grad_check(net, cloud, tolerance=1e-4)
    assert not report.passed
    assert "head.w0" in report.failed_blocks


def test_grad_check_requires_labels():
    cloud = make_cloud(40, n=48, classes=3, labeled=False)
    net = init_network(tiny_arch(), 3, seed=17)
    with pytest.raises(ValueError):
        grad_check(net, cloud)


def test_forward_margins_positive():
    cloud = make_cloud(41, n=48, classes=3)
    net = init_network(tiny_arch(), 3, seed=18)
    pm, km = forward_margins(net, cloud)
    assert pm > 0.0 and km > 0.0
