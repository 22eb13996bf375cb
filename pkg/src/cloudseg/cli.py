"""Command-line interface.

Subcommands: gen, train, eval, boundary, kernel-field, grad-check.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command is deterministic given identical arguments and files.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .boundary import BoundaryRule, annotate_boundary_gt, binarize, bpm_forward, save_boundary
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cloud import CloudFormatError, PointCloud, load_cloud, save_cloud
from .config import ConfigError, parse_config
from .geoconv import kernel_response_field, save_field
from .neighbors import knn_index
from .network import ArchConfig, init_network
from .scenes import generate_scene, sample_scene_spec
from .train import (
    OptimizerState,
    TrainingAbort,
    evaluate,
    forward_margins,
    grad_check,
    train_loop,
)


class UsageError(Exception):
    pass


def _scene_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([seed, index]).integers(0, 2**31))


def _load_scenes(data: Path) -> list[PointCloud]:
    if data.is_file():
        return [load_cloud(data)]
    files = sorted(data.glob("*.pts"))
    if not files:
        raise RuntimeError(f"no .pts scenes found in {data}")
    return [load_cloud(f) for f in files]


def _dataset_classes(clouds: list[PointCloud]) -> int:
    classes = {c.num_classes for c in clouds}
    if len(classes) != 1:
        raise RuntimeError(f"scenes disagree on class count: {sorted(classes)}")
    return classes.pop()


def cmd_gen(args) -> int:
    out = Path(args.out)
    try:
        specs = [
            sample_scene_spec(
                _scene_seed(args.seed, i),
                classes=args.classes,
                target_points=args.points,
                color_noise=args.noise,
            )
            for i in range(args.scenes)
        ]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    manifest = [f"# scenes={args.scenes} seed={args.seed} classes={args.classes} "
                f"points={args.points} noise={args.noise:.9g}"]
    for i, spec in enumerate(specs):
        cloud = generate_scene(spec)
        name = f"scene_{i:03d}.pts"
        save_cloud(cloud, out / name)
        manifest.append(f"{name}\tseed={_scene_seed(args.seed, i)}\tn={cloud.n}\t"
                        f"classes={cloud.num_classes}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="ascii")
    print(f"wrote {args.scenes} scenes and manifest.txt to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.override)
    data = Path(args.data) if args.data else Path(cfg.data_dir)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    clouds = _load_scenes(data)
    for i, c in enumerate(clouds):
        if not c.has_labels:
            raise RuntimeError(f"scene {i} in {data} has no labels")
    num_classes = _dataset_classes(clouds)
    if cfg.val_scenes >= len(clouds):
        raise UsageError(f"val_scenes={cfg.val_scenes} leaves no training scenes "
                         f"(dataset has {len(clouds)})")
    train_set = clouds[: len(clouds) - cfg.val_scenes] if cfg.val_scenes else clouds
    val_set = clouds[len(clouds) - cfg.val_scenes :] if cfg.val_scenes else []
    net = init_network(cfg.arch, num_classes, seed=cfg.train.seed, rule=cfg.rule,
                       w1=cfg.w1, w2=cfg.w2)
    opt = OptimizerState.create(net, lr=cfg.train.lr)
    out.mkdir(parents=True, exist_ok=True)
    best = {"miou": -1.0, "epoch": -1}

    def on_epoch(epoch, line, net_now, opt_now):
        if val_set:
            report = evaluate(val_set, net_now, force_mask=cfg.train.mask_mode)
            score = report.miou
        else:
            score = float(line.split("\t")[4])
        if score > best["miou"]:
            best["miou"] = score
            best["epoch"] = epoch
            save_checkpoint(net_now, opt_now, out / "best.ckpt", epoch=epoch + 1)

    logs, opt = train_loop(train_set, net, cfg.train, opt, on_epoch=on_epoch)
    (out / "metrics.log").write_text("\n".join(logs) + "\n", encoding="ascii")
    save_checkpoint(net, opt, out / "final.ckpt", epoch=cfg.train.epochs)
    print(f"trained {cfg.train.epochs} epochs on {len(train_set)} scenes")
    print(f"best epoch {best['epoch']} ({'val' if val_set else 'train'} "
          f"mIoU {best['miou']:.9g})")
    print(f"wrote {out / 'final.ckpt'}, {out / 'best.ckpt'}, {out / 'metrics.log'}")
    return 0


def cmd_eval(args) -> int:
    net, _, _ = load_checkpoint(args.checkpoint)
    clouds = _load_scenes(Path(args.data))
    report = evaluate(
        clouds,
        net,
        perturb_flip=args.perturb_flip,
        perturb_exchange=args.perturb_exchange,
        force_mask=args.force_mask,
        seed=args.seed,
    )
    for line in report.lines():
        print(line)
    return 0


def cmd_boundary(args) -> int:
    cloud = load_cloud(args.cloud)
    if args.checkpoint:
        net, _, _ = load_checkpoint(args.checkpoint)
        k = min(net.arch.bpm_k, cloud.n - 1)
        idx = knn_index(cloud, k)
        field = bpm_forward(cloud, idx, net.bpm)
        if args.fld:
            save_field(field.soft, args.fld)
        if args.hard:
            field = binarize(field)
    else:
        if not cloud.has_labels:
            raise RuntimeError("ground-truth boundary mode needs a labeled cloud")
        if cloud.n <= args.k:
            raise RuntimeError(f"rule k={args.k} needs more than {args.k} points, "
                               f"cloud has {cloud.n}")
        rule = BoundaryRule(args.k, args.ratio)
        idx = knn_index(cloud, rule.k)
        field = annotate_boundary_gt(cloud, idx, rule)
        if args.fld:
            save_field(field.hard.astype(np.float64), args.fld)
    save_boundary(field, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_kernel_field(args) -> int:
    net, _, _ = load_checkpoint(args.checkpoint)
    if not 0 <= args.layer < len(net.enc):
        raise UsageError(f"layer must lie in [0, {len(net.enc)}), got {args.layer}")
    bank = net.enc[args.layer].bank
    if bank is None:
        raise UsageError(f"encoder layer {args.layer} has no geometric kernels")
    if not 0 <= args.kernel < bank.channels:
        raise UsageError(f"kernel must lie in [0, {bank.channels}), got {args.kernel}")
    cloud = load_cloud(args.cloud)
    values = kernel_response_field(cloud, bank.kernel(args.kernel))
    save_field(values, args.out)
    print(f"wrote {args.out}")
    return 0


def _tiny_arch() -> ArchConfig:
    return ArchConfig(
        depth=2, downsample=4, agg_k=8, c_mid=4, c_feat=8, base_width=8,
        max_width=16, c_geo=4, m=2, mask_layers=1, mask_min_points=16,
        bpm_hidden=(8,), head_hidden=8, phi_hidden=8,
    )


def _random_labeled_cloud(n: int, classes: int, seed: int) -> PointCloud:
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-1.0, 1.0, (n, 3))
    colors = rng.uniform(0.0, 1.0, (n, 3))
    labels = rng.integers(0, classes, n)
    labels[:classes] = np.arange(classes)  # every class occurs
    return PointCloud(positions, colors, classes, labels)


def cmd_grad_check(args) -> int:
    if args.points > 64:
        raise UsageError("gradient checking is limited to 64 points")
    rule = BoundaryRule(min(32, args.points - 1), 0.4)
    # redraw until the instance sits safely away from kernel ties and relu
    # kinks; finite differences are meaningless at either
    cloud = net = None
    best_km = -1.0
    for attempt in range(20):
        cand_cloud = _random_labeled_cloud(args.points, args.classes, args.seed + attempt)
        cand_net = init_network(_tiny_arch(), args.classes, seed=args.seed + attempt,
                                rule=rule)
        pm, km = forward_margins(cand_net, cand_cloud)
        if pm > 1e-3 and km > best_km:
            cloud, net, best_km = cand_cloud, cand_net, km
        if pm > 1e-3 and km > 2e-4:
            break
    report = grad_check(net, cloud, tolerance=args.tolerance)
    for line in report.lines():
        print(line)
    if report.passed:
        print("all parameter blocks passed")
        return 0
    print(f"FAILED blocks: {', '.join(report.failed_blocks)}", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cloudseg",
        description="Boundary-aware point cloud segmentation: data generation, "
                    "training, evaluation, and inspection tools.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate labeled synthetic scenes")
    g.add_argument("--scenes", type=int, default=30, help="number of scenes")
    g.add_argument("--seed", type=int, default=7, help="master seed")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--classes", type=int, default=4, help="semantic classes per scene (2-5)")
    g.add_argument("--points", type=int, default=4096, help="approximate points per scene")
    g.add_argument("--noise", type=float, default=0.08, help="color noise sigma")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a segmentation network")
    t.add_argument("--config", required=True, help="INI config file")
    t.add_argument("--data", help="scene directory (default: config paths.data_dir)")
    t.add_argument("--out", help="output directory (default: config paths.out_dir)")
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. train.lr=0.01 or mask=off (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on labeled scenes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="scene file or directory")
    e.add_argument("--perturb-flip", type=float, default=None, metavar="F",
                   help="flip this fraction of binarized boundary predictions")
    e.add_argument("--perturb-exchange", type=float, default=None, metavar="F",
                   help="exchange this fraction of boundary points with their nearest neighbor")
    e.add_argument("--force-mask", choices=["off", "on", "augmented"], default=None,
                   help="override the mask mode of the checkpointed architecture")
    e.add_argument("--seed", type=int, default=0, help="perturbation seed")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("boundary", help="export ground-truth or predicted boundaries")
    b.add_argument("--cloud", required=True, help="input .pts file")
    b.add_argument("--out", required=True, help="output .bnd file")
    b.add_argument("--checkpoint", help="predict with this checkpoint (default: rule mode)")
    b.add_argument("--hard", action="store_true",
                   help="binarize the prediction at 0.5 before writing")
    b.add_argument("--fld", help="also export the values as a .fld scalar field")
    b.add_argument("--k", type=int, default=32, help="rule mode: neighbor count")
    b.add_argument("--ratio", type=float, default=0.4, help="rule mode: disagreement ratio")
    b.set_defaults(func=cmd_boundary)

    k = sub.add_parser("kernel-field", help="export one geometric kernel's response field")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--cloud", required=True, help="input .pts file")
    k.add_argument("--layer", type=int, required=True, help="encoder layer index")
    k.add_argument("--kernel", type=int, required=True, help="kernel channel index")
    k.add_argument("--out", required=True, help="output .fld file")
    k.set_defaults(func=cmd_kernel_field)

    c = sub.add_parser("grad-check", help="finite-difference check of a tiny network")
    c.add_argument("--points", type=int, default=48, help="cloud size (max 64)")
    c.add_argument("--classes", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAbort, CheckpointError, CloudFormatError, RuntimeError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())