"""Deterministic binary checkpoints.

Layout (all integers little-endian):

    magic   b"PCSEGCK1"
    u32     length of the JSON metadata that follows
    bytes   metadata: ascii JSON with sorted keys (format version,
            architecture, boundary rule, loss weights, class count,
            optimizer scalars, completed epoch count)
    blocks  sorted by name, each:
                u16  name length, then ascii name
                u8   ndim, then u32 per dimension
                f8   little-endian C-order data

Parameter blocks use their network names; Adam moments are stored as
"adam.m.<name>" / "adam.v.<name>". Sorting plus canonical JSON makes
save -> load -> save byte-identical, which the determinism checks rely on.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .boundary import BoundaryRule
from .network import ArchConfig, NetworkState, init_network
from .train import OptimizerState

MAGIC = b"PCSEGCK1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("ascii")


def _pack_block(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8")
    name_b = name.encode("ascii")
    parts = [struct.pack("<H", len(name_b)), name_b, struct.pack("<B", data.ndim)]
    parts.extend(struct.pack("<I", d) for d in data.shape)
    parts.append(data.tobytes())
    return b"".join(parts)


def save_checkpoint(net: NetworkState, opt: OptimizerState, path, epoch: int = 0) -> None:
    arch = net.arch
    meta = {
        "format_version": FORMAT_VERSION,
        "num_classes": net.num_classes,
        "epoch": int(epoch),
        "arch": {
            "depth": arch.depth,
            "downsample": arch.downsample,
            "agg_k": arch.agg_k,
            "c_mid": arch.c_mid,
            "c_feat": arch.c_feat,
            "base_width": arch.base_width,
            "max_width": arch.max_width,
            "use_gco": arch.use_gco,
            "c_geo": arch.c_geo,
            "m": arch.m,
            "mask_mode": arch.mask_mode,
            "mask_layers": arch.mask_layers,
            "mask_min_points": arch.mask_min_points,
            "bpm_hidden": list(arch.bpm_hidden),
            "bpm_k": arch.bpm_k,
            "head_hidden": arch.head_hidden,
            "phi_hidden": arch.phi_hidden,
        },
        "rule": {"k": net.rule.k, "ratio": net.rule.ratio},
        "loss_weights": {"w1": net.bpm.w1, "w2": net.bpm.w2},
        "opt": {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "step": opt.step,
        },
    }
    blocks: dict[str, np.ndarray] = dict(net.param_blocks())
    for name in net.param_blocks():
        blocks[f"adam.m.{name}"] = opt.m[name]
        blocks[f"adam.v.{name}"] = opt.v[name]
    meta_b = _meta_bytes(meta)
    out = [MAGIC, struct.pack("<I", len(meta_b)), meta_b]
    for name in sorted(blocks):
        out.append(_pack_block(name, blocks[name]))
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(out))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint to {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + count]
        self.pos += count
        return out

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def load_checkpoint(path, arch: ArchConfig | None = None, num_classes: int | None = None):
    """Rebuild (NetworkState, OptimizerState, meta) from a checkpoint file.

    ``arch``/``num_classes``, when given, must match what the checkpoint was
    saved with; a mismatch raises a CheckpointError naming the first
    offending parameter block.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint from {path}: {exc}") from exc
    rd = _Reader(raw, path)
    if rd.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (meta_len,) = struct.unpack("<I", rd.take(4))
    try:
        meta = json.loads(rd.take(meta_len).decode("ascii"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {meta.get('format_version')} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    blocks: dict[str, np.ndarray] = {}
    while not rd.done:
        (name_len,) = struct.unpack("<H", rd.take(2))
        name = rd.take(name_len).decode("ascii")
        (ndim,) = struct.unpack("<B", rd.take(1))
        shape = tuple(struct.unpack("<I", rd.take(4))[0] for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(rd.take(8 * count), dtype="<f8").reshape(shape)
        blocks[name] = data.astype(np.float64)
    saved_arch = ArchConfig(**meta["arch"])
    build_arch = arch if arch is not None else saved_arch
    classes = num_classes if num_classes is not None else meta["num_classes"]
    rule = BoundaryRule(meta["rule"]["k"], meta["rule"]["ratio"])
    lw = meta["loss_weights"]
    net = init_network(build_arch, classes, seed=0, rule=rule, w1=lw["w1"], w2=lw["w2"])
    opt_meta = meta["opt"]
    opt = OptimizerState(
        lr=opt_meta["lr"], beta1=opt_meta["beta1"], beta2=opt_meta["beta2"],
        eps=opt_meta["eps"], step=opt_meta["step"],
    )
    for name, arr in net.param_blocks().items():
        for key in (name, f"adam.m.{name}", f"adam.v.{name}"):
            if key not in blocks:
                raise CheckpointError(f"{path}: missing block {key!r}")
            if blocks[key].shape != arr.shape:
                raise CheckpointError(
                    f"{path}: block {key!r} has shape {blocks[key].shape}, "
                    f"architecture expects {arr.shape}"
                )
        arr[...] = blocks[name]
        opt.m[name] = blocks[f"adam.m.{name}"].copy()
        opt.v[name] = blocks[f"adam.v.{name}"].copy()
    expected = set(net.param_blocks())
    expected |= {f"adam.m.{n}" for n in expected if not n.startswith("adam.")}
    expected |= {f"adam.v.{n}" for n in expected if not n.startswith("adam.")}
    stray = set(blocks) - expected
    if stray:
        raise CheckpointError(f"{path}: unexpected block {sorted(stray)[0]!r}")
    return net, opt, meta