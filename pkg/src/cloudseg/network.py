"""Encoder-decoder segmentation network assembly.

The network runs the boundary predictor first, then a feature pyramid:
encoder layers aggregate and downsample by farthest point sampling, decoder
layers interpolate back up with skip connections, and a shared per-point
MLP head emits class logits. Boundary masking is active in the first
``mask_layers`` encoder layers and the last ``mask_layers`` decoder layers,
and only at resolutions of at least ``mask_min_points`` points; everywhere
else aggregation is global.

Geometry (neighbor indices, relative positions, sampling chains, the
boundary predictor's input variance, boundary ground truth) depends only on
the cloud, never on parameters, so it is computed once per cloud in a
Pyramid and reused across epochs and finite-difference probes.

Input features are xyz concatenated with rgb (6 channels): absolute height
separates floor from wall classes, and colors carry the appearance signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .boundary import BoundaryField, BoundaryRule, BpmParams, annotate_boundary_gt, bpm_apply, bpm_backward, neighbor_feature_variance
from .cloud import PointCloud
from .encode import (
    GemLayer,
    LayerConfig,
    LayerState,
    LevelGeometry,
    decoder_layer,
    decoder_layer_backward,
    encoder_layer,
    encoder_layer_backward,
    level_geometry,
)
from .mlp import Mlp
from .neighbors import knn_points

MASK_SETTINGS = ("on", "off", "augmented")


@dataclass
class ArchConfig:
    """Architecture hyperparameters; resolutions are derived per cloud."""

    depth: int = 4
    downsample: int = 4
    agg_k: int = 16
    c_mid: int = 8
    c_feat: int = 16
    base_width: int = 32
    max_width: int = 128
    use_gco: bool = True
    c_geo: int = 8
    m: int = 3
    mask_mode: str = "on"  # "on" | "off" | "augmented"
    mask_layers: int = 2
    mask_min_points: int = 64
    bpm_hidden: tuple = (32, 32)
    bpm_k: int = 32
    head_hidden: int = 64
    phi_hidden: int = 16

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.downsample < 2:
            raise ValueError("downsample factor must be at least 2")
        if self.mask_mode not in MASK_SETTINGS:
            raise ValueError(f"mask_mode must be one of {MASK_SETTINGS}")
        if not 0 <= self.mask_layers <= self.depth:
            raise ValueError("mask_layers must lie in [0, depth]")
        for name in ("agg_k", "c_mid", "c_feat", "base_width", "max_width", "c_geo", "m",
                     "bpm_k", "head_hidden", "phi_hidden", "mask_min_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        self.bpm_hidden = tuple(int(w) for w in self.bpm_hidden)
        if any(w < 1 for w in self.bpm_hidden):
            raise ValueError("bpm hidden widths must be at least 1")

    @property
    def min_resolution(self) -> int:
        # aggregation needs k >= 1 neighbors, geometric kernels m directions
        return max(4, self.m + 1) if self.use_gco else 4

    def encoder_widths(self) -> list[int]:
        return [min(self.base_width * (2 ** l), self.max_width) for l in range(self.depth)]

    def decoder_widths(self) -> list[int]:
        enc = self.encoder_widths()
        return [enc[self.depth - 2 - i] if i < self.depth - 1 else self.base_width
                for i in range(self.depth)]


@dataclass
class NetworkState:
    """All learnable state plus the static configuration it was built for."""

    arch: ArchConfig
    rule: BoundaryRule
    bpm: BpmParams
    enc: list[GemLayer]
    dec: list[GemLayer]
    head: Mlp
    num_classes: int

    def param_blocks(self) -> dict[str, np.ndarray]:
        """Stable name -> live array mapping; in-place updates hit the network."""
        blocks: dict[str, np.ndarray] = {}
        for name, arr in self.bpm.mlp.params().items():
            blocks[f"bpm.{name}"] = arr
        for l, layer in enumerate(self.enc):
            for name, arr in layer.param_blocks().items():
                blocks[f"enc{l}.{name}"] = arr
        for i, layer in enumerate(self.dec):
            for name, arr in layer.param_blocks().items():
                blocks[f"dec{i}.{name}"] = arr
        for name, arr in self.head.params().items():
            blocks[f"head.{name}"] = arr
        return blocks

    def num_params(self) -> int:
        return sum(arr.size for arr in self.param_blocks().values())


def init_network(
    arch: ArchConfig,
    num_classes: int,
    seed: int,
    rule: BoundaryRule | None = None,
    w1: float = 1.0,
    w2: float = 10.0,
) -> NetworkState:
    """Deterministic initialization of every parameter block from one seed."""
    if num_classes < 2:
        raise ValueError("segmentation needs at least 2 classes")
    rule = rule if rule is not None else BoundaryRule()
    rng = np.random.default_rng(seed)
    bpm = BpmParams.create(rng, (3, *arch.bpm_hidden, 1), w1, w2)
    enc_widths = arch.encoder_widths()
    enc: list[GemLayer] = []
    c_in = 6
    for l in range(arch.depth):
        cfg = LayerConfig(
            role="encoder",
            mode="global",  # effective mode decided per cloud at forward time
            use_gco=arch.use_gco,
            k=arch.agg_k,
            sample_to=1,  # placeholder; set per cloud
            c_mid=arch.c_mid,
            c_feat=arch.c_feat,
            c_out=enc_widths[l],
            c_geo=arch.c_geo,
            m=arch.m,
        )
        enc.append(GemLayer.create(cfg, c_in, rng, arch.phi_hidden))
        c_in = enc_widths[l]
    dec_widths = arch.decoder_widths()
    dec: list[GemLayer] = []
    c_coarse = enc_widths[-1]
    for i in range(arch.depth):
        skip_level = arch.depth - 1 - i
        c_skip = enc_widths[skip_level - 1] if skip_level >= 1 else 6
        cfg = LayerConfig(
            role="decoder",
            mode="global",
            use_gco=False,
            k=arch.agg_k,
            sample_to=1,
            c_mid=arch.c_mid,
            c_feat=arch.c_feat,
            c_out=dec_widths[i],
        )
        dec.append(GemLayer.create(cfg, c_coarse + c_skip, rng, arch.phi_hidden))
        c_coarse = dec_widths[i]
    head = Mlp.create((dec_widths[-1], arch.head_hidden, num_classes), rng)
    return NetworkState(arch, rule, bpm, enc, dec, head, num_classes)


@dataclass
class Pyramid:
    """Per-cloud parameter-independent geometry, shared across passes."""

    resolutions: list[int]
    levels: list[LevelGeometry]  # geometry at levels 0..depth-1
    positions: list[np.ndarray]  # positions at levels 0..depth
    abs_indices: list[np.ndarray]  # level -> original point indices
    bpm_variance: np.ndarray
    gt: BoundaryField | None = None
    gt_rule_k: int | None = None


def plan_resolutions(n: int, arch: ArchConfig) -> list[int]:
    floor = arch.min_resolution
    if n < floor:
        raise ValueError(f"cloud has {n} points, network needs at least {floor}")
    res = [n]
    for _ in range(arch.depth):
        res.append(max(floor, min(res[-1], res[-1] // arch.downsample)))
    return res


def build_pyramid(cloud: PointCloud, arch: ArchConfig, rule: BoundaryRule | None = None) -> Pyramid:
    res = plan_resolutions(cloud.n, arch)
    positions = [cloud.positions]
    abs_indices = [np.arange(cloud.n, dtype=np.int64)]
    levels: list[LevelGeometry] = []
    for l in range(arch.depth):
        geo = level_geometry(positions[l], arch.agg_k, res[l + 1])
        levels.append(geo)
        positions.append(positions[l][geo.fps])
        abs_indices.append(abs_indices[l][geo.fps])
    k_bpm = min(arch.bpm_k, cloud.n - 1)
    bpm_idx = knn_points(cloud.positions, k_bpm)
    variance = neighbor_feature_variance(cloud.colors, bpm_idx)
    gt = None
    gt_rule_k = None
    if rule is not None and cloud.has_labels:
        gt_rule_k = min(rule.k, cloud.n - 1)
        eff_rule = BoundaryRule(gt_rule_k, rule.ratio)
        gt_idx = bpm_idx if gt_rule_k == k_bpm else knn_points(cloud.positions, gt_rule_k)
        gt = annotate_boundary_gt(cloud, gt_idx, eff_rule)
    return Pyramid(res, levels, positions, abs_indices, variance, gt, gt_rule_k)


def _mask_flags(arch: ArchConfig, res: list[int]) -> tuple[list[bool], list[bool]]:
    enc_flags = [l < arch.mask_layers and res[l] >= arch.mask_min_points
                 for l in range(arch.depth)]
    dec_flags = [i >= arch.depth - arch.mask_layers and res[arch.depth - 1 - i] >= arch.mask_min_points
                 for i in range(arch.depth)]
    return enc_flags, dec_flags


def _effective_mode(flagged: bool, setting: str) -> str:
    if not flagged or setting == "off":
        return "global"
    return "masked" if setting == "on" else "augmented"


@dataclass
class ForwardPass:
    logits: np.ndarray
    ghat: np.ndarray  # full-resolution boundary prediction
    pyramid: Pyramid
    bpm_cache: tuple
    enc_caches: list
    dec_caches: list
    head_cache: tuple
    enc_layers: list[GemLayer] = field(repr=False, default_factory=list)
    dec_layers: list[GemLayer] = field(repr=False, default_factory=list)


def network_forward(
    cloud: PointCloud,
    net: NetworkState,
    pyramid: Pyramid | None = None,
    mask_override: str | None = None,
    mask_values: np.ndarray | None = None,
) -> ForwardPass:
    """Full forward pass; returns logits, the boundary prediction, and caches.

    ``mask_override`` swaps the mask setting ("on"/"off"/"augmented") without
    touching parameters. ``mask_values`` replaces the predicted ghat as the
    masking signal (used by the perturbation protocols); the returned ghat is
    always the unperturbed prediction.
    """
    if mask_override is not None and mask_override not in MASK_SETTINGS:
        raise ValueError(f"mask_override must be one of {MASK_SETTINGS}")
    arch = net.arch
    if pyramid is None:
        pyramid = build_pyramid(cloud, arch, net.rule)
    ghat, bpm_cache = bpm_apply(pyramid.bpm_variance, net.bpm)
    masking = ghat if mask_values is None else np.asarray(mask_values, dtype=np.float64).ravel()
    if len(masking) != cloud.n:
        raise ValueError("mask values must cover every point")
    setting = mask_override if mask_override is not None else arch.mask_mode
    enc_flags, dec_flags = _mask_flags(arch, pyramid.resolutions)
    f0 = np.concatenate([cloud.positions, cloud.colors], axis=1)
    state = LayerState(positions=cloud.positions, features=f0,
                       ghat=masking[pyramid.abs_indices[0]])
    states = [state]
    enc_caches = []
    enc_layers = []
    for l in range(arch.depth):
        cfg = replace(
            net.enc[l].config,
            sample_to=pyramid.resolutions[l + 1],
            mode=_effective_mode(enc_flags[l], setting),
        )
        layer = replace(net.enc[l], config=cfg)
        try:
            state, cache = encoder_layer(state, layer, pyramid.levels[l])
        except ValueError as exc:
            raise ValueError(f"encoder layer {l}: {exc}") from exc
        states.append(state)
        enc_caches.append(cache)
        enc_layers.append(layer)
    dec_caches = []
    dec_layers = []
    d = states[-1]
    for i in range(arch.depth):
        skip = states[arch.depth - 1 - i]
        cfg = replace(
            net.dec[i].config,
            sample_to=skip.n,
            mode=_effective_mode(dec_flags[i], setting),
        )
        layer = replace(net.dec[i], config=cfg)
        try:
            d, cache = decoder_layer(d, skip, layer, pyramid.levels[arch.depth - 1 - i])
        except ValueError as exc:
            raise ValueError(f"decoder layer {i}: {exc}") from exc
        dec_caches.append(cache)
        dec_layers.append(layer)
    logits, head_cache = net.head.forward(d.features)
    return ForwardPass(
        logits=logits,
        ghat=ghat,
        pyramid=pyramid,
        bpm_cache=bpm_cache,
        enc_caches=enc_caches,
        dec_caches=dec_caches,
        head_cache=head_cache,
        enc_layers=enc_layers,
        dec_layers=dec_layers,
    )


def network_backward(
    net: NetworkState,
    fp: ForwardPass,
    dlogits: np.ndarray,
    dghat: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients for every parameter block given upstream loss gradients.

    dghat feeds only the boundary predictor: the mask is detached, so the
    segmentation loss cannot reach BPM parameters.
    """
    arch = net.arch
    grads: dict[str, np.ndarray] = {}
    dfeat, head_grads = net.head.backward(fp.head_cache, np.asarray(dlogits, dtype=np.float64))
    for name, g in head_grads.items():
        grads[f"head.{name}"] = g
    skip_grads: list[np.ndarray | None] = [None] * (arch.depth + 1)
    for i in reversed(range(arch.depth)):
        dcoarse, dskip, layer_grads = decoder_layer_backward(fp.dec_caches[i], fp.dec_layers[i], dfeat)
        for name, g in layer_grads.items():
            grads[f"dec{i}.{name}"] = g
        level = arch.depth - 1 - i
        skip_grads[level] = dskip if skip_grads[level] is None else skip_grads[level] + dskip
        dfeat = dcoarse
    for l in reversed(range(arch.depth)):
        total = dfeat
        if skip_grads[l + 1] is not None:
            total = total + skip_grads[l + 1]
        dfeat, layer_grads = encoder_layer_backward(fp.enc_caches[l], fp.enc_layers[l],
                                                    fp.pyramid.levels[l], total)
        for name, g in layer_grads.items():
            grads[f"enc{l}.{name}"] = g
    # dfeat now holds the gradient w.r.t. the input features; inputs are data.
    if dghat is not None:
        bpm_grads = bpm_backward(net.bpm, fp.bpm_cache, dghat)
    else:
        bpm_grads = {name: np.zeros_like(arr) for name, arr in net.bpm.mlp.params().items()}
    for name, g in bpm_grads.items():
        grads[f"bpm.{name}"] = g
    missing = set(net.param_blocks()) - set(grads)
    for name in missing:  # blocks untouched this pass (e.g. masked-off kernels) get zeros
        grads[name] = np.zeros_like(net.param_blocks()[name])
    return grads