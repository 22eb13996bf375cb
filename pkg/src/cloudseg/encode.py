"""Feature aggregation layers with optional boundary masking.

One aggregation step, for every point i with neighbors j:

    out_i = sigma( A_i ),   A_i = flatten( W_i^T M_i ) [optionally projected]

where W_i stacks phi(r_ij) over the k neighbors (k x c_mid) and M_i stacks
M(factor_j * f_j) (k x c_feat). The matrix product realizes the
sum-over-neighbors reduction. The factor selects the variant:

    masked     factor_j = ghat_j        boundary features are suppressed
    global     factor_j = 1             plain aggregation
    augmented  factor_j = 2 - ghat_j    boundary features are amplified

ghat enters as a constant: no gradient flows through the mask, so the
boundary predictor is supervised only by its own loss. Neighbor features
are normalized with ``+ 0.0`` after masking, which turns any -0.0 from
``0 * negative`` into +0.0; a fully masked neighbor therefore contributes
the bit-exact same M(0) no matter what its features were.

Encoder layers optionally prepend geometric convolution channels and then
downsample by farthest point sampling; decoder layers interpolate coarse
features back up (inverse-distance over 3 nearest coarse points), join the
skip features, and aggregate at the skip resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boundary import BoundaryField
from .geoconv import KernelBank, gco_backward, gco_forward
from .mlp import Mlp, relu_grad
from .neighbors import (
    NeighborhoodIndex,
    RelativePositions,
    farthest_point_sampling_points,
    knn_points,
    nearest_reference_points,
    relative_positions_points,
)

AGG_MODES = ("masked", "global", "augmented")


@dataclass
class LayerConfig:
    """Static shape and behavior of one aggregation layer."""

    role: str  # "encoder" or "decoder"
    mode: str = "global"  # one of AGG_MODES
    use_gco: bool = False
    k: int = 16
    sample_to: int = 0  # encoder: resolution after this layer; decoder: skip resolution
    c_mid: int = 8
    c_feat: int = 16
    c_out: int = 32
    c_geo: int = 8
    m: int = 3
    sigma: str = "relu"

    def __post_init__(self):
        if self.role not in ("encoder", "decoder"):
            raise ValueError(f"layer role must be encoder or decoder, got {self.role!r}")
        if self.mode not in AGG_MODES:
            raise ValueError(f"aggregation mode must be one of {AGG_MODES}, got {self.mode!r}")
        if self.use_gco and self.role != "encoder":
            raise ValueError("geometric convolution is encoder-only")
        if self.sigma not in ("relu", "identity"):
            raise ValueError(f"sigma must be relu or identity, got {self.sigma!r}")
        if self.k < 1:
            raise ValueError("layer k must be at least 1")
        for name in ("c_mid", "c_feat", "c_out", "c_geo", "m"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


@dataclass
class GemLayer:
    """Parameters of one aggregation layer: phi, M, projection, optional kernels."""

    config: LayerConfig
    phi: Mlp
    mnet: Mlp
    proj: Mlp
    bank: KernelBank | None = None

    @classmethod
    def create(cls, config: LayerConfig, c_in: int, rng, phi_hidden: int = 16) -> "GemLayer":
        from .geoconv import random_bank

        mnet_in = c_in + (config.c_geo if config.use_gco else 0)
        phi = Mlp.create((3, phi_hidden, config.c_mid), rng)
        mnet = Mlp.create((mnet_in, config.c_feat), rng)
        proj = Mlp.create((config.c_mid * config.c_feat, config.c_out), rng)
        # each flattened outer-product entry sums k neighbor terms, so rows
        # reach the projection with variance ~k; rescale to keep activations
        # at unit order through the pyramid
        proj.weights[0] *= 1.0 / np.sqrt(config.k)
        bank = random_bank(rng, config.m, config.c_geo) if config.use_gco else None
        return cls(config, phi, mnet, proj, bank)

    def param_blocks(self) -> dict[str, np.ndarray]:
        blocks = {}
        for prefix, net in (("phi", self.phi), ("mnet", self.mnet), ("proj", self.proj)):
            for name, arr in net.params().items():
                blocks[f"{prefix}.{name}"] = arr
        if self.bank is not None:
            blocks["kern.vectors"] = self.bank.vectors
            blocks["kern.biases"] = self.bank.biases
        return blocks


@dataclass
class AggCache:
    mode: str
    sigma: str
    idx: NeighborhoodIndex
    factor: np.ndarray | None  # (n, k) gathered mask factor, None for global
    phi_cache: tuple
    mnet_cache: tuple
    proj_cache: tuple | None
    w_stack: np.ndarray  # (n, k, c_mid)
    m_stack: np.ndarray  # (n, k, c_feat)
    pre: np.ndarray  # (n, c_out) pre-activation
    c_in: int


def _mask_factor(mode: str, ghat: np.ndarray | None, idx: NeighborhoodIndex):
    if mode == "global":
        return None
    if ghat is None:
        raise ValueError(f"{mode} aggregation needs soft boundary values")
    ghat = np.asarray(ghat, dtype=np.float64).ravel()
    if len(ghat) != idx.n:
        raise ValueError("boundary values do not cover the neighborhood index")
    gathered = ghat[idx.neighbors]
    return gathered if mode == "masked" else 2.0 - gathered


def aggregate_forward(
    mode: str,
    features: np.ndarray,
    rel: RelativePositions,
    idx: NeighborhoodIndex,
    ghat: np.ndarray | None,
    phi: Mlp,
    mnet: Mlp,
    proj: Mlp | None = None,
    sigma: str = "relu",
):
    """One aggregation step; returns (out, AggCache). ghat is ignored for global."""
    if mode not in AGG_MODES:
        raise ValueError(f"aggregation mode must be one of {AGG_MODES}, got {mode!r}")
    if sigma not in ("relu", "identity"):
        raise ValueError(f"sigma must be relu or identity, got {sigma!r}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) != idx.n:
        raise ValueError(f"features must be ({idx.n}, c), got {features.shape}")
    if features.shape[1] != mnet.in_width:
        raise ValueError(f"M expects {mnet.in_width} channels, features have {features.shape[1]}")
    if phi.in_width != 3:
        raise ValueError("phi must take 3-d relative positions")
    n, k = idx.neighbors.shape
    factor = _mask_factor(mode, ghat, idx)
    gathered = features[idx.neighbors]  # (n, k, c_in)
    if factor is None:
        m_in = gathered + 0.0
    else:
        m_in = factor[:, :, None] * gathered + 0.0
    w_flat, phi_cache = phi.forward(rel.offsets.reshape(n * k, 3))
    m_flat, mnet_cache = mnet.forward(m_in.reshape(n * k, features.shape[1]))
    w_stack = w_flat.reshape(n, k, phi.out_width)
    m_stack = m_flat.reshape(n, k, mnet.out_width)
    outer = np.einsum("nkm,nkf->nmf", w_stack, m_stack)
    flat = outer.reshape(n, phi.out_width * mnet.out_width)
    if proj is not None:
        pre, proj_cache = proj.forward(flat)
    else:
        pre, proj_cache = flat, None
    out = np.maximum(pre, 0.0) if sigma == "relu" else pre.copy()
    cache = AggCache(
        mode=mode,
        sigma=sigma,
        idx=idx,
        factor=factor,
        phi_cache=phi_cache,
        mnet_cache=mnet_cache,
        proj_cache=proj_cache,
        w_stack=w_stack,
        m_stack=m_stack,
        pre=pre,
        c_in=features.shape[1],
    )
    return out, cache


def aggregate_backward(cache: AggCache, phi: Mlp, mnet: Mlp, proj: Mlp | None, dout: np.ndarray):
    """Gradients of one aggregation step.

    Returns (dfeatures, grads) with grads keyed "phi.*", "mnet.*", "proj.*".
    The mask factor is a constant, so no gradient is produced for ghat.
    """
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != cache.pre.shape:
        raise ValueError(f"upstream gradient shape {dout.shape} != {cache.pre.shape}")
    n, k = cache.idx.neighbors.shape
    dpre = dout * relu_grad(cache.pre) if cache.sigma == "relu" else dout
    grads: dict[str, np.ndarray] = {}
    if proj is not None:
        dflat, proj_grads = proj.backward(cache.proj_cache, dpre)
        for name, g in proj_grads.items():
            grads[f"proj.{name}"] = g
    else:
        dflat = dpre
    douter = dflat.reshape(n, cache.w_stack.shape[2], cache.m_stack.shape[2])
    dw_stack = np.einsum("nmf,nkf->nkm", douter, cache.m_stack)
    dm_stack = np.einsum("nmf,nkm->nkf", douter, cache.w_stack)
    _, phi_grads = phi.backward(cache.phi_cache, dw_stack.reshape(n * k, -1))
    for name, g in phi_grads.items():
        grads[f"phi.{name}"] = g
    dm_in, mnet_grads = mnet.backward(cache.mnet_cache, dm_stack.reshape(n * k, -1))
    for name, g in mnet_grads.items():
        grads[f"mnet.{name}"] = g
    dgathered = dm_in.reshape(n, k, cache.c_in)
    if cache.factor is not None:
        dgathered = dgathered * cache.factor[:, :, None]
    dfeatures = np.zeros((cache.idx.n, cache.c_in))
    np.add.at(dfeatures, cache.idx.neighbors.reshape(n * k), dgathered.reshape(n * k, cache.c_in))
    return dfeatures, grads


def masked_local_aggregation(features, rel, idx, ghat: BoundaryField, phi, mnet, sigma="relu", proj=None):
    """Boundary-masked aggregation: neighbors are weighted by their ghat."""
    if ghat.soft is None:
        raise ValueError("masked aggregation needs soft boundary values")
    out, _ = aggregate_forward("masked", features, rel, idx, ghat.soft, phi, mnet, proj, sigma)
    return out


def global_aggregation(features, rel, idx, phi, mnet, sigma="relu", proj=None):
    """Mask-free aggregation: features propagate across boundaries."""
    out, _ = aggregate_forward("global", features, rel, idx, None, phi, mnet, proj, sigma)
    return out


def augmented_aggregation(features, rel, idx, ghat: BoundaryField, phi, mnet, sigma="relu", proj=None):
    """Boundary-amplified variant: neighbor features scaled by (2 - ghat)."""
    if ghat.soft is None:
        raise ValueError("augmented aggregation needs soft boundary values")
    out, _ = aggregate_forward("augmented", features, rel, idx, ghat.soft, phi, mnet, proj, sigma)
    return out


@dataclass
class LayerState:
    """Point set flowing through the network at one resolution."""

    positions: np.ndarray
    features: np.ndarray
    ghat: np.ndarray | None = None  # soft boundary values at this resolution

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if len(self.positions) != len(self.features):
            raise ValueError("positions and features must have matching row counts")
        if self.ghat is not None:
            self.ghat = np.asarray(self.ghat, dtype=np.float64).ravel()
            if len(self.ghat) != len(self.positions):
                raise ValueError("ghat must have one value per point")

    @property
    def n(self) -> int:
        return len(self.positions)


@dataclass
class LevelGeometry:
    """Parameter-independent geometry of one resolution, reusable across passes."""

    idx: NeighborhoodIndex
    rel: RelativePositions
    fps: np.ndarray | None = None  # indices into this level selecting the next one


def level_geometry(positions: np.ndarray, k: int, sample_to: int | None = None) -> LevelGeometry:
    n = len(positions)
    idx = knn_points(positions, min(k, n - 1))
    rel = relative_positions_points(positions, idx)
    fps = None
    if sample_to is not None:
        if sample_to == n:
            fps = np.arange(n, dtype=np.int64)
        else:
            fps = farthest_point_sampling_points(positions, sample_to, start=_anchor(positions))
    return LevelGeometry(idx=idx, rel=rel, fps=fps)


def _anchor(positions: np.ndarray) -> int:
    # lexicographically smallest point: a permutation-covariant FPS seed
    return int(np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0]))[0])


@dataclass
class EncoderCache:
    gco: object | None
    agg: AggCache
    fps: np.ndarray
    c_orig: int
    n_in: int


def encoder_layer(state: LayerState, layer: GemLayer, geo: LevelGeometry | None = None):
    """GCO concat (optional), aggregate, then downsample by FPS.

    Returns (new LayerState, EncoderCache). ghat and labels ride along via
    plain row gathers.
    """
    cfg = layer.config
    if cfg.role != "encoder":
        raise ValueError("encoder_layer needs an encoder LayerConfig")
    if not 1 <= cfg.sample_to <= state.n:
        raise ValueError(f"sample_to must lie in [1, {state.n}], got {cfg.sample_to}")
    if geo is None:
        geo = level_geometry(state.positions, cfg.k, cfg.sample_to)
    feats = state.features
    gco_cache = None
    if cfg.use_gco:
        gco_out, gco_cache = gco_forward(geo.rel, layer.bank, "relu")
        feats = np.concatenate([feats, gco_out], axis=1)
    out, agg_cache = aggregate_forward(
        cfg.mode, feats, geo.rel, geo.idx, state.ghat, layer.phi, layer.mnet, layer.proj, cfg.sigma
    )
    fps = geo.fps if geo.fps is not None else np.arange(state.n, dtype=np.int64)
    if len(fps) != cfg.sample_to:
        raise ValueError(f"geometry samples to {len(fps)} points, layer expects {cfg.sample_to}")
    new_state = LayerState(
        positions=state.positions[fps],
        features=out[fps],
        ghat=None if state.ghat is None else state.ghat[fps],
    )
    cache = EncoderCache(
        gco=gco_cache, agg=agg_cache, fps=fps, c_orig=state.features.shape[1], n_in=state.n
    )
    return new_state, cache


def encoder_layer_backward(cache: EncoderCache, layer: GemLayer, geo: LevelGeometry, dfeat_out):
    """Returns (dfeatures at the input resolution, grads)."""
    dfeat_out = np.asarray(dfeat_out, dtype=np.float64)
    dfull = np.zeros((cache.n_in, dfeat_out.shape[1]))
    dfull[cache.fps] = dfeat_out
    dcat, grads = aggregate_backward(cache.agg, layer.phi, layer.mnet, layer.proj, dfull)
    if cache.gco is not None:
        dgco = dcat[:, cache.c_orig :]
        dvec, dbias = gco_backward(cache.gco, geo.rel, dgco)
        grads["kern.vectors"] = dvec
        grads["kern.biases"] = dbias
        dcat = dcat[:, : cache.c_orig]
    return dcat, grads


@dataclass
class InterpCache:
    indices: np.ndarray  # (n_fine, t) coarse indices
    weights: np.ndarray  # (n_fine, t) normalized inverse-distance weights
    n_coarse: int


def interpolate_features(coarse_positions, fine_positions, coarse_features, t: int = 3):
    """Inverse-distance interpolation over the t nearest coarse points.

    A fine point sitting exactly on a coarse point copies that coarse
    feature verbatim. Returns (fine_features, InterpCache); the weights are
    geometry, so backward passes no gradient to positions.
    """
    coarse_positions = np.asarray(coarse_positions, dtype=np.float64)
    fine_positions = np.asarray(fine_positions, dtype=np.float64)
    coarse_features = np.asarray(coarse_features, dtype=np.float64)
    if len(coarse_positions) != len(coarse_features):
        raise ValueError("coarse positions and features must have matching row counts")
    t = min(t, len(coarse_positions))
    indices, dists = nearest_reference_points(fine_positions, coarse_positions, t)
    weights = np.empty_like(dists)
    exact = dists[:, 0] == 0.0
    inv = 1.0 / np.maximum(dists, 1e-300)
    weights = inv / inv.sum(axis=1, keepdims=True)
    if exact.any():
        weights[exact] = 0.0
        weights[exact, 0] = 1.0
    fine = np.einsum("it,itc->ic", weights, coarse_features[indices])
    return fine, InterpCache(indices=indices, weights=weights, n_coarse=len(coarse_positions))


def interpolate_backward(cache: InterpCache, channels: int, dfine):
    dfine = np.asarray(dfine, dtype=np.float64)
    n_fine, t = cache.indices.shape
    dcoarse = np.zeros((cache.n_coarse, channels))
    contrib = cache.weights[:, :, None] * dfine[:, None, :]
    np.add.at(dcoarse, cache.indices.reshape(n_fine * t), contrib.reshape(n_fine * t, channels))
    return dcoarse


@dataclass
class DecoderCache:
    interp: InterpCache
    agg: AggCache
    c_coarse: int


def decoder_layer(coarse: LayerState, skip: LayerState, layer: GemLayer, geo: LevelGeometry | None = None):
    """Interpolate up to the skip resolution, join skip features, aggregate."""
    cfg = layer.config
    if cfg.role != "decoder":
        raise ValueError("decoder_layer needs a decoder LayerConfig")
    if skip.n < coarse.n:
        raise ValueError(f"skip resolution {skip.n} is below coarse resolution {coarse.n}")
    if geo is None:
        geo = level_geometry(skip.positions, cfg.k)
    interp, interp_cache = interpolate_features(coarse.positions, skip.positions, coarse.features)
    feats = np.concatenate([interp, skip.features], axis=1)
    out, agg_cache = aggregate_forward(
        cfg.mode, feats, geo.rel, geo.idx, skip.ghat, layer.phi, layer.mnet, layer.proj, cfg.sigma
    )
    new_state = LayerState(positions=skip.positions, features=out, ghat=skip.ghat)
    cache = DecoderCache(interp=interp_cache, agg=agg_cache, c_coarse=coarse.features.shape[1])
    return new_state, cache


def decoder_layer_backward(cache: DecoderCache, layer: GemLayer, dfeat_out):
    """Returns (dcoarse_features, dskip_features, grads)."""
    dcat, grads = aggregate_backward(cache.agg, layer.phi, layer.mnet, layer.proj, dfeat_out)
    dinterp = dcat[:, : cache.c_coarse]
    dskip = dcat[:, cache.c_coarse :]
    dcoarse = interpolate_backward(cache.interp, cache.c_coarse, dinterp)
    return dcoarse, dskip, grads
