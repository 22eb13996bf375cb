"""Losses, Adam, the training and evaluation loops, and gradient checking.

Everything here is deterministic for a fixed (seed, config, data) triple:
epoch shuffles come from a seed derived as (seed, epoch) so a resumed run
replays the exact shuffle sequence of an uninterrupted one, gradients are
accumulated in fixed scene order, and no step ever consults wall-clock or
global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boundary import BoundaryField, bpm_apply, bpm_loss
from .cloud import PointCloud
from .geoconv import mapping_margins
from .metrics import ConfusionMatrix, boundary_scores, miou, per_class_iou
from .mlp import Mlp
from .neighbors import knn_points
from .network import (
    ForwardPass,
    NetworkState,
    Pyramid,
    build_pyramid,
    network_backward,
    network_forward,
)


class TrainingAbort(RuntimeError):
    """Raised when training hits a non-finite loss; never silently skipped."""


def seg_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if logits.ndim != 2 or len(logits) != len(labels):
        raise ValueError(f"logits {logits.shape} do not match {len(labels)} labels")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels outside [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    lse = np.log(exp.sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))
    dlogits = softmax.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def total_loss(seg: float, bpm: float) -> float:
    """Simple addition of the two loss terms; aborts on non-finite input."""
    if not (np.isfinite(seg) and np.isfinite(bpm)):
        raise TrainingAbort(f"non-finite loss: seg={seg}, bpm={bpm}")
    return float(seg) + float(bpm)


@dataclass
class OptimizerState:
    """Adam accumulators, one pair of moment tensors per parameter block."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.step < 0:
            raise ValueError("step count must be nonnegative")

    @classmethod
    def create(cls, net: NetworkState, lr: float = 1e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        blocks = net.param_blocks()
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
            m={name: np.zeros_like(arr) for name, arr in blocks.items()},
            v={name: np.zeros_like(arr) for name, arr in blocks.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              opt: OptimizerState) -> None:
    """Bias-corrected Adam update, applied in place to the parameter arrays."""
    if set(params) != set(opt.m):
        raise ValueError("optimizer state does not cover the parameter blocks")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name in params:
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {p.shape} for {name!r}")
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


@dataclass
class TrainConfig:
    batch_size: int = 2
    epochs: int = 50
    lr: float = 1e-3
    seed: int = 0
    bpm_on: bool = True
    mask_mode: str | None = None  # None uses the architecture's setting

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.mask_mode is not None and self.mask_mode not in ("on", "off", "augmented"):
            raise ValueError(f"mask_mode must be on/off/augmented, got {self.mask_mode!r}")


def _scene_pass(cloud: PointCloud, net: NetworkState, pyramid: Pyramid, cfg: TrainConfig):
    """Forward + losses + backward for one scene. Returns (grads, losses, fp)."""
    fp = network_forward(cloud, net, pyramid, mask_override=cfg.mask_mode)
    sl, dlogits = seg_loss(fp.logits, cloud.labels)
    if cfg.bpm_on:
        bl, dghat = bpm_loss(BoundaryField(soft=fp.ghat), pyramid.gt, net.bpm.w1, net.bpm.w2)
    else:
        bl, dghat = 0.0, None
    tot = total_loss(sl, bl)
    grads = network_backward(net, fp, dlogits, dghat)
    return grads, (tot, sl, bl), fp


def train_loop(
    dataset: list[PointCloud],
    net: NetworkState,
    cfg: TrainConfig,
    opt: OptimizerState | None = None,
    start_epoch: int = 0,
    pyramids: list[Pyramid] | None = None,
    on_epoch=None,
):
    """Train in place; returns (per-epoch log lines, optimizer state).

    Boundary ground truth and all geometry are computed once per scene.
    Batch gradients are the mean over the batch's scenes, accumulated in
    shuffle order. Log lines: "epoch<TAB>total<TAB>seg<TAB>bpm<TAB>miou".
    """
    if not dataset:
        raise ValueError("training needs at least one scene")
    for i, cloud in enumerate(dataset):
        if not cloud.has_labels:
            raise ValueError(f"scene {i} has no labels")
    if pyramids is None:
        pyramids = [build_pyramid(c, net.arch, net.rule) for c in dataset]
    if opt is None:
        opt = OptimizerState.create(net, lr=cfg.lr)
    params = net.param_blocks()
    logs: list[str] = []
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        cm = ConfusionMatrix(np.zeros((net.num_classes, net.num_classes), dtype=np.int64))
        sums = np.zeros(3)
        for batch_id in range(0, len(order), cfg.batch_size):
            batch = order[batch_id : batch_id + cfg.batch_size]
            acc: dict[str, np.ndarray] | None = None
            for scene_idx in batch:
                cloud = dataset[scene_idx]
                try:
                    grads, losses, fp = _scene_pass(cloud, net, pyramids[scene_idx], cfg)
                except TrainingAbort as exc:
                    raise TrainingAbort(
                        f"epoch {epoch}, batch {batch_id // cfg.batch_size}, "
                        f"scene {scene_idx}: {exc}"
                    ) from None
                scale = 1.0 / len(batch)
                if acc is None:
                    acc = {name: scale * g for name, g in grads.items()}
                else:
                    for name, g in grads.items():
                        acc[name] += scale * g
                sums += losses
                preds = np.argmax(fp.logits, axis=1)
                cm = cm.merged(ConfusionMatrix.from_labels(cloud.labels, preds, net.num_classes))
            adam_step(params, acc, opt)
        mean = sums / len(order)
        line = f"{epoch}\t{mean[0]:.9g}\t{mean[1]:.9g}\t{mean[2]:.9g}\t{miou(cm):.9g}"
        logs.append(line)
        if on_epoch is not None:
            on_epoch(epoch, line, net, opt)
    return logs, opt


@dataclass
class EvalReport:
    miou: float
    per_class_iou: np.ndarray
    boundary_precision: float
    boundary_recall: float
    boundary_f1: float
    band_accuracy: float
    confusion: ConfusionMatrix
    scenes: int

    def lines(self) -> list[str]:
        out = [f"mIoU\t{self.miou:.9g}"]
        for c, iou in enumerate(self.per_class_iou):
            out.append(f"class_{c}_iou\t{iou:.9g}")
        out.append(f"boundary_precision\t{self.boundary_precision:.9g}")
        out.append(f"boundary_recall\t{self.boundary_recall:.9g}")
        out.append(f"boundary_f1\t{self.boundary_f1:.9g}")
        out.append(f"band_accuracy\t{self.band_accuracy:.9g}")
        out.append(f"scenes\t{self.scenes}")
        return out


def evaluate(
    dataset: list[PointCloud],
    net: NetworkState,
    perturb_flip: float | None = None,
    perturb_exchange: float | None = None,
    force_mask: str | None = None,
    seed: int = 0,
    pyramids: list[Pyramid] | None = None,
) -> EvalReport:
    """Deterministic evaluation over a labeled dataset.

    Optional perturbations corrupt the binarized boundary prediction before
    it is used as the mask; the reported boundary metrics always score the
    unperturbed prediction against ground truth.
    """
    from .boundary import binarize, perturb_exchange_neighbor, perturb_random_flip

    if not dataset:
        raise ValueError("evaluation needs at least one scene")
    for i, cloud in enumerate(dataset):
        if not cloud.has_labels:
            raise ValueError(f"scene {i} has no labels")
    if pyramids is None:
        pyramids = [build_pyramid(c, net.arch, net.rule) for c in dataset]
    cm = ConfusionMatrix(np.zeros((net.num_classes, net.num_classes), dtype=np.int64))
    true_b: list[np.ndarray] = []
    pred_b: list[np.ndarray] = []
    band_hits = 0
    band_total = 0
    for cloud, pyramid in zip(dataset, pyramids):
        fp = network_forward(cloud, net, pyramid, mask_override=force_mask)
        if perturb_flip is not None or perturb_exchange is not None:
            fld = binarize(BoundaryField(soft=fp.ghat))
            if perturb_flip is not None:
                fld = perturb_random_flip(fld, perturb_flip, seed)
            if perturb_exchange is not None:
                nn1 = knn_points(cloud.positions, 1)
                fld = perturb_exchange_neighbor(fld, nn1, perturb_exchange, seed)
            fp = network_forward(cloud, net, pyramid, mask_override=force_mask,
                                 mask_values=fld.hard.astype(np.float64))
        preds = np.argmax(fp.logits, axis=1)
        cm = cm.merged(ConfusionMatrix.from_labels(cloud.labels, preds, net.num_classes))
        gt = pyramid.gt
        true_b.append(gt.hard)
        pred_b.append(np.where(fp.ghat < 0.5, 0, 1))
        band = gt.hard == 0
        band_hits += int(np.count_nonzero((preds == cloud.labels) & band))
        band_total += int(np.count_nonzero(band))
    precision, recall, f1 = boundary_scores(np.concatenate(true_b), np.concatenate(pred_b))
    band_acc = band_hits / band_total if band_total else float("nan")
    return EvalReport(
        miou=miou(cm),
        per_class_iou=per_class_iou(cm),
        boundary_precision=precision,
        boundary_recall=recall,
        boundary_f1=f1,
        band_accuracy=band_acc,
        confusion=cm,
        scenes=len(dataset),
    )


@dataclass
class GradCheckReport:
    """Max relative finite-difference error per parameter block."""

    tolerance: float
    block_errors: dict[str, float]
    perm_margin: float
    kink_margin: float
    skipped_blocks: list[str] = field(default_factory=list)

    @property
    def failed_blocks(self) -> list[str]:
        return [b for b, e in self.block_errors.items()
                if b not in self.skipped_blocks and not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed_blocks

    def lines(self) -> list[str]:
        out = []
        for blk, err in self.block_errors.items():
            if blk in self.skipped_blocks:
                status = "skipped (permutation tie)"
            else:
                status = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{blk}\t{err:.3g}\t{status}")
        out.append(f"margins\tperm={self.perm_margin:.3g}\tkink={self.kink_margin:.3g}")
        return out


def forward_margins(net: NetworkState, cloud: PointCloud, pyramid: Pyramid | None = None):
    """(permutation margin, ReLU kink margin) of one forward pass.

    Finite differences are only trustworthy when both are well above the
    probe step: the first keeps the geometric-kernel argmax stable, the
    second keeps every ReLU on one side of its kink.
    """
    if pyramid is None:
        pyramid = build_pyramid(cloud, net.arch, net.rule)
    fp = network_forward(cloud, net, pyramid)
    perm = np.inf
    kink = np.inf
    for l, layer in enumerate(net.enc):
        if layer.bank is not None:
            gap, gk = mapping_margins(pyramid.levels[l].rel, layer.bank)
            perm = min(perm, gap)
            kink = min(kink, gk)
    caches = [(c.agg, fp.enc_layers[i]) for i, c in enumerate(fp.enc_caches)]
    caches += [(c.agg, fp.dec_layers[i]) for i, c in enumerate(fp.dec_caches)]
    for agg, layer in caches:
        if agg.sigma == "relu":
            kink = min(kink, float(np.abs(agg.pre).min()))
        for net_part, cache in ((layer.phi, agg.phi_cache), (layer.mnet, agg.mnet_cache),
                                (layer.proj, agg.proj_cache)):
            if cache is not None:
                kink = min(kink, net_part.min_hidden_margin(cache))
    kink = min(kink, net.head.min_hidden_margin(fp.head_cache))
    kink = min(kink, net.bpm.mlp.min_hidden_margin(fp.bpm_cache))
    return perm, kink


def grad_check(net: NetworkState, cloud: PointCloud, tolerance: float = 1e-4,
               h: float = 1e-5) -> GradCheckReport:
    """Central-difference check of every parameter block against the backward pass.

    The analytic gradients come from one combined seg + boundary backward
    pass; each block is then differenced against the loss term it can reach
    (the mask is detached, so boundary parameters never touch the
    segmentation term and vice versa). Relative error per entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-5).
    """
    if not cloud.has_labels:
        raise ValueError("gradient checking needs a labeled cloud")
    pyramid = build_pyramid(cloud, net.arch, net.rule)

    fp = network_forward(cloud, net, pyramid)
    sl, dlogits = seg_loss(fp.logits, cloud.labels)
    bl, dghat = bpm_loss(BoundaryField(soft=fp.ghat), pyramid.gt, net.bpm.w1, net.bpm.w2)
    analytic = network_backward(net, fp, dlogits, dghat)

    # The boundary mask is a constant in the backward pass, so difference
    # against a loss that holds the masking signal at its unperturbed values.
    # With the mask frozen the two loss terms decouple exactly: boundary
    # parameters cannot move the segmentation term and vice versa, so each
    # block is differenced against its live term alone. (Keeping the dead
    # term would add nothing but float cancellation noise of its magnitude.)
    frozen_mask = fp.ghat.copy()

    def seg_only() -> float:
        fp2 = network_forward(cloud, net, pyramid, mask_values=frozen_mask)
        sl2, _ = seg_loss(fp2.logits, cloud.labels)
        return sl2

    def bpm_only() -> float:
        ghat2, _ = bpm_apply(pyramid.bpm_variance, net.bpm)
        bl2, _ = bpm_loss(BoundaryField(soft=ghat2), pyramid.gt, net.bpm.w1, net.bpm.w2)
        return bl2
    perm_margin, kink_margin = forward_margins(net, cloud, pyramid)
    params = net.param_blocks()
    errors: dict[str, float] = {}
    skipped: list[str] = []
    for name, arr in params.items():
        if ".kern." in name and perm_margin <= 1e-4:
            # kernel argmax too close to a tie: the loss is not differentiable
            # here, so a finite-difference comparison would be meaningless
            errors[name] = 0.0
            skipped.append(name)
            continue
        loss_only = bpm_only if name.startswith("bpm.") else seg_only
        a = analytic[name]
        worst = 0.0
        flat = arr.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]

            def probe(step: float) -> float:
                flat[i] = orig + step
                plus = loss_only()
                flat[i] = orig - step
                minus = loss_only()
                flat[i] = orig
                return (plus - minus) / (2.0 * step)

            numeric = probe(h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-5)
            err = abs(aflat[i] - numeric) / denom
            if err > tolerance:
                # a ReLU kink inside the probe interval corrupts the central
                # difference; shrink the step to dodge it. A genuinely wrong
                # gradient disagrees at every step size.
                for shrink in (8.0, 64.0):
                    numeric = probe(h / shrink)
                    denom = max(abs(aflat[i]), abs(numeric), 1e-5)
                    err = min(err, abs(aflat[i] - numeric) / denom)
                    if err <= tolerance:
                        break
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(tolerance=tolerance, block_errors=errors,
                           perm_margin=perm_margin, kink_margin=kink_margin,
                           skipped_blocks=skipped)