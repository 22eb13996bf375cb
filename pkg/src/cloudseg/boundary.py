"""Boundary ground truth, boundary prediction, and boundary perturbations.

A point is a boundary point (g = 0) when strictly more than ``ratio * k`` of
its k nearest neighbors carry a different label; otherwise g = 1. The
prediction module maps the per-neighborhood color variance through a small
shared MLP with a sigmoid head, giving a soft score ghat in (0, 1) that is
near 0 on boundaries.

The two perturbations mirror the robustness protocols used in evaluation:
flipping a random subset of binary values, and swapping values between
sampled boundary points and their nearest neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .mlp import Mlp
from .neighbors import NeighborhoodIndex

CLAMP_EPS = 1e-7


@dataclass
class BoundaryRule:
    """Ground-truth annotation rule: neighbor count and disagreement ratio."""

    k: int = 32
    ratio: float = 0.4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("rule.k must be at least 1")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("rule.ratio must lie strictly between 0 and 1")


@dataclass
class BoundaryField:
    """Per-point boundary annotation: hard g in {0,1}, soft ghat in [0,1].

    0 means boundary. At least one of the two representations must be
    present; both may be.
    """

    hard: np.ndarray | None = None
    soft: np.ndarray | None = None

    def __post_init__(self):
        if self.hard is None and self.soft is None:
            raise ValueError("boundary field needs hard or soft values")
        if self.hard is not None:
            self.hard = np.asarray(self.hard, dtype=np.int64).ravel()
            bad = (self.hard != 0) & (self.hard != 1)
            if bad.any():
                raise ValueError("hard boundary values must be 0 or 1")
        if self.soft is not None:
            self.soft = np.asarray(self.soft, dtype=np.float64).ravel()
            if not np.isfinite(self.soft).all():
                raise ValueError("soft boundary values must be finite")
            if (self.soft < 0).any() or (self.soft > 1).any():
                raise ValueError("soft boundary values must lie in [0, 1]")
        if self.hard is not None and self.soft is not None and self.hard.shape != self.soft.shape:
            raise ValueError("hard and soft value counts differ")

    @property
    def n(self) -> int:
        return len(self.hard) if self.hard is not None else len(self.soft)


@dataclass
class BpmParams:
    """Boundary prediction parameters: shared MLP plus the two loss weights."""

    mlp: Mlp
    w1: float = 1.0
    w2: float = 10.0

    def __post_init__(self):
        if self.w1 <= 0 or self.w2 <= 0:
            raise ValueError("loss weights must be positive")
        if self.mlp.out_width != 1:
            raise ValueError("boundary MLP must end in a single output unit")

    @classmethod
    def create(cls, rng, widths=(3, 32, 32, 1), w1: float = 1.0, w2: float = 10.0):
        mlp = Mlp.create(widths, rng, out_activation="sigmoid")
        # color variances are O(1e-2); widen the input layer so the first
        # hidden pre-activations start at O(0.1) instead of O(0.01)
        mlp.weights[0] *= 10.0
        return cls(mlp, w1, w2)


def annotate_boundary_gt(cloud: PointCloud, idx: NeighborhoodIndex, rule: BoundaryRule) -> BoundaryField:
    """Hard ground truth: g=0 iff > ratio*k neighbors disagree with the point's label."""
    if not cloud.has_labels:
        raise ValueError("boundary annotation needs a labeled cloud")
    if idx.k != rule.k:
        raise ValueError(f"index has k={idx.k} but rule expects k={rule.k}")
    labels = cloud.labels
    disagree = (labels[idx.neighbors] != labels[:, None]).sum(axis=1)
    hard = np.where(disagree > rule.ratio * rule.k, 0, 1).astype(np.int64)
    return BoundaryField(hard=hard)


def neighbor_feature_variance(features: np.ndarray, idx: NeighborhoodIndex) -> np.ndarray:
    """Population variance of each point's k neighbor features, per channel."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {features.shape}")
    if len(features) != idx.n:
        raise ValueError("feature row count does not match the neighborhood index")
    gathered = features[idx.neighbors]  # (n, k, F)
    mean = gathered.mean(axis=1, keepdims=True)
    return np.mean((gathered - mean) ** 2, axis=1)


def bpm_apply(variance: np.ndarray, params: BpmParams):
    """Run the shared MLP on precomputed variance features.

    Returns (ghat, cache); ghat is clamped away from exact 0/1 so downstream
    logarithms stay finite. The clamp is treated as identity in backward.
    """
    out, cache = params.mlp.forward(variance)
    ghat = np.clip(out[:, 0], CLAMP_EPS, 1.0 - CLAMP_EPS)
    return ghat, cache


def bpm_backward(params: BpmParams, cache, dghat: np.ndarray):
    """Gradients of the MLP parameters given dL/dghat; input gradient discarded."""
    _, grads = params.mlp.backward(cache, np.asarray(dghat, dtype=np.float64)[:, None])
    return grads


def bpm_forward(cloud: PointCloud, idx: NeighborhoodIndex, params: BpmParams) -> BoundaryField:
    """Soft boundary prediction from the variance of neighbor colors."""
    variance = neighbor_feature_variance(cloud.colors, idx)
    if variance.shape[1] != params.mlp.in_width:
        raise ValueError(
            f"MLP expects {params.mlp.in_width} input channels, features have {variance.shape[1]}"
        )
    ghat, _ = bpm_apply(variance, params)
    return BoundaryField(soft=ghat)


def bpm_loss(pred: BoundaryField, truth: BoundaryField, w1: float, w2: float):
    """Weighted negative log likelihood of the hard annotation, plus dL/dghat.

    loss = -sum_i (w1 * g_i * log ghat_i + w2 * (1 - g_i) * log(1 - ghat_i)).
    A sum, not a mean. ghat is clamped to [eps, 1-eps] before the logarithms;
    the gradient is evaluated at the clamped value.
    """
    if pred.soft is None:
        raise ValueError("prediction field needs soft values")
    if truth.hard is None:
        raise ValueError("truth field needs hard values")
    if pred.n != truth.n:
        raise ValueError(f"prediction has {pred.n} values, truth has {truth.n}")
    if w1 <= 0 or w2 <= 0:
        raise ValueError("loss weights must be positive")
    g = truth.hard.astype(np.float64)
    ghat = np.clip(pred.soft, CLAMP_EPS, 1.0 - CLAMP_EPS)
    loss = -np.sum(w1 * g * np.log(ghat) + w2 * (1.0 - g) * np.log1p(-ghat))
    dghat = -(w1 * g / ghat) + w2 * (1.0 - g) / (1.0 - ghat)
    return float(loss), dghat


def binarize(field: BoundaryField) -> BoundaryField:
    """Threshold soft values: ghat < 0.5 means boundary (0)."""
    if field.hard is not None:
        return BoundaryField(hard=field.hard.copy())
    return BoundaryField(hard=np.where(field.soft < 0.5, 0, 1).astype(np.int64))


def downsample_boundary(field: BoundaryField, sampled) -> BoundaryField:
    """Row-gather of the field at the sampled indices; no interpolation."""
    sampled = np.asarray(sampled, dtype=np.int64).ravel()
    if sampled.size and (sampled.min() < 0 or sampled.max() >= field.n):
        raise IndexError(f"sampled indices outside [0, {field.n})")
    hard = field.hard[sampled] if field.hard is not None else None
    soft = field.soft[sampled] if field.soft is not None else None
    return BoundaryField(hard=hard, soft=soft)


def perturb_random_flip(field: BoundaryField, fraction: float, seed: int) -> BoundaryField:
    """Flip the binary value of exactly round(fraction*n) seeded random points."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    values = binarize(field).hard
    count = int(round(fraction * len(values)))
    if count:
        chosen = np.random.default_rng(seed).choice(len(values), size=count, replace=False)
        values[chosen] = 1 - values[chosen]
    return BoundaryField(hard=values)


def perturb_exchange_neighbor(
    field: BoundaryField, idx: NeighborhoodIndex, fraction: float, seed: int
) -> BoundaryField:
    """Swap sampled boundary points' values with their nearest neighbor.

    The sample is drawn from the points marked boundary in the input;
    swaps run sequentially in ascending point index, so a later swap sees
    the effect of earlier ones.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    values = binarize(field).hard
    if len(values) != idx.n:
        raise ValueError("field size does not match the neighborhood index")
    boundary = np.flatnonzero(values == 0)
    count = int(round(fraction * len(boundary)))
    if count:
        chosen = np.random.default_rng(seed).choice(boundary, size=count, replace=False)
        for i in np.sort(chosen):
            j = idx.neighbors[i, 0]
            values[i], values[j] = values[j], values[i]
    return BoundaryField(hard=values)


def save_boundary(field: BoundaryField, path) -> None:
    """Write a .bnd file: header "n hard|soft", then one value per line."""
    kind = "hard" if field.hard is not None else "soft"
    lines = [f"{field.n} {kind}"]
    if kind == "hard":
        lines.extend(str(int(v)) for v in field.hard)
    else:
        lines.extend(f"{v:.9g}" for v in field.soft)
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write boundary field to {path}: {exc}") from exc


def load_boundary(path) -> BoundaryField:
    try:
        with open(path, "r", encoding="ascii") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read boundary field from {path}: {exc}") from exc
    lines = raw.splitlines()
    if not lines:
        raise ValueError(f"{path}: empty boundary file")
    head = lines[0].split()
    if len(head) != 2 or head[1] not in ("hard", "soft"):
        raise ValueError(f"{path}: header must be 'n hard|soft', got {lines[0]!r}")
    try:
        n = int(head[0])
    except ValueError:
        raise ValueError(f"{path}: bad point count {head[0]!r}") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ValueError(f"{path}: header says {n} values, file has {len(body)}")
    if head[1] == "hard":
        try:
            values = np.array([int(ln) for ln in body], dtype=np.int64)
        except ValueError:
            raise ValueError(f"{path}: hard values must be integers") from None
        return BoundaryField(hard=values)
    try:
        values = np.array([float(ln) for ln in body], dtype=np.float64)
    except ValueError:
        raise ValueError(f"{path}: soft values must be decimal numbers") from None
    return BoundaryField(soft=values)
