"""Shared helpers: random clouds, scene shortcuts, rotations, tiny networks."""

import numpy as np

from cloudseg import ArchConfig, PointCloud
from cloudseg.scenes import generate_scene, sample_scene_spec

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criteria verdicts even when output is captured."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_cloud(seed, n=64, classes=3, labeled=True, spread=1.0):
    """Uniform random labeled cloud with every class present."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-spread, spread, (n, 3))
    colors = rng.uniform(0.0, 1.0, (n, 3))
    labels = None
    if labeled:
        labels = rng.integers(0, classes, n)
        labels[:classes] = np.arange(classes)
    return PointCloud(positions, colors, classes, labels)


def make_scene(seed, points=512, classes=4):
    return generate_scene(sample_scene_spec(seed, classes=classes, target_points=points))


def random_rotation(rng):
    """Uniform random rotation: QR of a gaussian matrix, determinant +1."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, [0, 1]] = q[:, [1, 0]]
    return q


def tiny_arch(**over):
    base = dict(depth=2, downsample=4, agg_k=8, c_mid=4, c_feat=8, base_width=8,
                max_width=16, c_geo=4, m=2, mask_layers=1, mask_min_points=16,
                bpm_hidden=(8,), head_hidden=8, phi_hidden=8)
    base.update(over)
    return ArchConfig(**base)
