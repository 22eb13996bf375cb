"""Geometric convolution: direction-matching vector kernels.

Each kernel holds m learnable 3-vectors and a bias. For a point with m
unit neighbor directions d_1..d_m, the response is

    O = max over bijections P of  sigma(b + sum_j d_j . v_P(j))

The max runs over all m! assignments of directions to kernel vectors, so
the response does not depend on neighbor ordering, and because sigma is
monotone the max is taken on the pre-activation. Ties pick the lowest
permutation index (permutations enumerated in lexicographic order), which
fixes the backward pass: gradients flow through the selected assignment
only.

Arithmetic note: dot products and the per-permutation sums are evaluated
with elementwise numpy ops in a fixed association order, so results are
bit-identical to a plain Python loop doing the same operations.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .cloud import PointCloud
from .neighbors import RelativePositions, knn_index, relative_positions

ACTIVATIONS = ("relu", "identity")


@dataclass
class GeometricKernel:
    """One output channel: m directional vectors plus a bias."""

    vectors: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != 3:
            raise ValueError(f"kernel vectors must be (m, 3), got {self.vectors.shape}")
        if len(self.vectors) < 1:
            raise ValueError("kernel needs at least one vector")
        if not np.isfinite(self.vectors).all():
            raise ValueError("kernel vectors must be finite")
        self.bias = float(self.bias)

    @property
    def m(self) -> int:
        return len(self.vectors)


@dataclass
class KernelBank:
    """Stacked kernels of one layer: vectors (channels, m, 3), biases (channels,)."""

    vectors: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 3:
            raise ValueError(f"bank vectors must be (channels, m, 3), got {self.vectors.shape}")
        if self.biases.shape != (self.vectors.shape[0],):
            raise ValueError("bank needs one bias per channel")

    @classmethod
    def from_kernels(cls, kernels) -> "KernelBank":
        kernels = list(kernels)
        if not kernels:
            raise ValueError("bank needs at least one kernel")
        if len({k.m for k in kernels}) != 1:
            raise ValueError("all kernels in a bank must share m")
        return cls(
            np.stack([k.vectors for k in kernels]),
            np.array([k.bias for k in kernels]),
        )

    def kernel(self, channel: int) -> GeometricKernel:
        return GeometricKernel(self.vectors[channel].copy(), float(self.biases[channel]))

    @property
    def channels(self) -> int:
        return self.vectors.shape[0]

    @property
    def m(self) -> int:
        return self.vectors.shape[1]


@dataclass
class MappingChoice:
    """Forward cache: selected permutation index and pre-activation per (point, channel)."""

    choice: np.ndarray  # (n, channels) int64, index into the m! permutations
    pre: np.ndarray  # (n, channels) pre-activation at the selected permutation
    m: int
    activation: str


@lru_cache(maxsize=None)
def _perm_table(m: int) -> np.ndarray:
    # lexicographic order; index into this table is the tie-break order
    return np.array(list(itertools.permutations(range(m))), dtype=np.int64)


def _direction_dots(dirs: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """dots[i, c, j, l] = dirs[i, j] . vectors[c, l], fixed association order."""
    d = dirs[:, None, :, None, :]
    v = vectors[None, :, None, :, :]
    return d[..., 0] * v[..., 0] + d[..., 1] * v[..., 1] + d[..., 2] * v[..., 2]


def random_bank(rng, m: int, channels: int) -> KernelBank:
    """Vectors uniform on the unit sphere scaled by 0.5; biases zero."""
    if m < 1 or channels < 1:
        raise ValueError("m and channels must be at least 1")
    raw = rng.standard_normal((channels, m, 3))
    norms = np.linalg.norm(raw, axis=2, keepdims=True)
    while (norms < 1e-12).any():  # pragma: no cover - essentially impossible draw
        raw = rng.standard_normal((channels, m, 3))
        norms = np.linalg.norm(raw, axis=2, keepdims=True)
    return KernelBank(0.5 * raw / norms, np.zeros(channels))


def kernel_init(m: int, channels: int, seed: int) -> KernelBank:
    """Seeded kernel bank initialization; see random_bank."""
    return random_bank(np.random.default_rng(seed), m, channels)


def gco_forward(rel: RelativePositions, bank: KernelBank, activation: str = "relu"):
    """Max-over-assignments response for every point and kernel channel.

    Uses the first m columns of ``rel`` (the m nearest neighbors). Returns
    (out (n, channels), MappingChoice).
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    m = bank.m
    if rel.k < m:
        raise ValueError(f"need at least {m} neighbors per point, index has {rel.k}")
    dirs = rel.units[:, :m, :]
    dots = _direction_dots(dirs, bank.vectors)  # (n, channels, m, m)
    n, channels = dots.shape[0], dots.shape[1]
    best = None
    choice = np.zeros((n, channels), dtype=np.int64)
    for p_idx, perm in enumerate(_perm_table(m)):
        score = np.broadcast_to(bank.biases, (n, channels))
        for j in range(m):
            score = score + dots[:, :, j, perm[j]]
        if best is None:
            best = score
        else:
            better = score > best  # strict: ties keep the lower permutation index
            best = np.where(better, score, best)
            choice = np.where(better, p_idx, choice)
    out = np.maximum(best, 0.0) if activation == "relu" else best.copy()
    return out, MappingChoice(choice=choice, pre=best, m=m, activation=activation)


def gco_backward(cache: MappingChoice, rel: RelativePositions, dout: np.ndarray):
    """Subgradient through the cached assignment: (dvectors, dbiases).

    No gradient flows to the directions; positions are data, not parameters.
    """
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != cache.pre.shape:
        raise ValueError(f"upstream gradient shape {dout.shape} != cache {cache.pre.shape}")
    if rel.k < cache.m or len(rel.units) != len(cache.pre):
        raise ValueError("relative positions do not match the forward cache")
    m = cache.m
    n, channels = cache.pre.shape
    if cache.activation == "relu":
        dpre = dout * (cache.pre > 0.0)
    else:
        dpre = dout
    dirs = rel.units[:, :m, :]
    chosen = _perm_table(m)[cache.choice]  # (n, channels, m) vector slot per direction
    dvectors = np.zeros((channels, m, 3))
    chan = np.broadcast_to(np.arange(channels), (n, channels))
    for j in range(m):
        np.add.at(dvectors, (chan, chosen[:, :, j]), dpre[:, :, None] * dirs[:, None, j, :])
    dbiases = dpre.sum(axis=0)
    return dvectors, dbiases


def mapping_margins(rel: RelativePositions, bank: KernelBank) -> tuple[float, float]:
    """(smallest best-vs-runner-up gap, smallest |pre| at the max) over all points/channels.

    Finite-difference checks are only trustworthy when both margins are
    comfortably larger than the probe step: the first guards the argmax,
    the second the ReLU kink.
    """
    m = bank.m
    if rel.k < m:
        raise ValueError(f"need at least {m} neighbors per point, index has {rel.k}")
    dirs = rel.units[:, :m, :]
    dots = _direction_dots(dirs, bank.vectors)
    n, channels = dots.shape[0], dots.shape[1]
    scores = np.empty((n, channels, len(_perm_table(m))))
    for p_idx, perm in enumerate(_perm_table(m)):
        score = np.broadcast_to(bank.biases, (n, channels))
        for j in range(m):
            score = score + dots[:, :, j, perm[j]]
        scores[:, :, p_idx] = score
    if scores.shape[2] == 1:
        gap = np.inf
    else:
        top2 = np.sort(scores, axis=2)[:, :, -2:]
        gap = float((top2[:, :, 1] - top2[:, :, 0]).min())
    kink = float(np.abs(scores.max(axis=2)).min())
    return gap, kink


def kernel_response_field(
    cloud: PointCloud, kernel: GeometricKernel, activation: str = "relu"
) -> np.ndarray:
    """Per-point response of a single kernel, for export and inspection."""
    if cloud.n < kernel.m + 1:
        raise ValueError(f"need at least {kernel.m + 1} points, cloud has {cloud.n}")
    idx = knn_index(cloud, kernel.m)
    rel = relative_positions(cloud, idx)
    bank = KernelBank(kernel.vectors[None, :, :], np.array([kernel.bias]))
    out, _ = gco_forward(rel, bank, activation)
    return out[:, 0]


def save_field(values: np.ndarray, path) -> None:
    """Write a .fld scalar field: header "n", one real per line."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if not np.isfinite(values).all():
        raise ValueError("field values must be finite")
    lines = [str(len(values))]
    lines.extend(f"{v:.9g}" for v in values)
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write field to {path}: {exc}") from exc


def load_field(path) -> np.ndarray:
    try:
        with open(path, "r", encoding="ascii") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read field from {path}: {exc}") from exc
    lines = [ln for ln in raw.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty field file")
    try:
        n = int(lines[0])
    except ValueError:
        raise ValueError(f"{path}: header must be the value count, got {lines[0]!r}") from None
    if len(lines) - 1 != n:
        raise ValueError(f"{path}: header says {n} values, file has {len(lines) - 1}")
    try:
        return np.array([float(ln) for ln in lines[1:]], dtype=np.float64)
    except ValueError:
        raise ValueError(f"{path}: field values must be decimal numbers") from None
