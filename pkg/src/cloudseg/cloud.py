"""Point cloud container and its plain-text file format.

A scene sample is ``n`` points with xyz positions in meters, RGB colors in
[0, 1], and optionally one semantic class id per point. The text format
(extension ``.pts``) is line oriented:

    line 1:       ``n C has_labels``   (has_labels is 0 or 1)
    lines 2..n+1: ``x y z r g b [label]``

Reals are printed with 9 significant digits, so a save/load round trip is
lossless at that precision and re-saving a loaded file reproduces it byte
for byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CloudFormatError(ValueError):
    """Malformed ``.pts`` content; message carries the file line number."""


@dataclass
class PointCloud:
    """Positions, colors and optional per-point labels of one scene sample."""

    positions: np.ndarray
    colors: np.ndarray
    num_classes: int
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {self.positions.shape}")
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("a point cloud needs at least one point")
        if self.colors.shape != (n, 3):
            raise ValueError(f"colors must be ({n}, 3), got {self.colors.shape}")
        if np.any(self.colors < 0.0) or np.any(self.colors > 1.0):
            raise ValueError("colors must lie in [0, 1]")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(f"labels must be ({n},), got {self.labels.shape}")
            if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
                raise ValueError(
                    f"labels must lie in [0, {self.num_classes}), "
                    f"got range [{self.labels.min()}, {self.labels.max()}]"
                )

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def save_cloud(cloud: PointCloud, path) -> None:
    """Write ``cloud`` in the text format described in the module docstring."""
    has_labels = 1 if cloud.has_labels else 0
    lines = [f"{cloud.n} {cloud.num_classes} {has_labels}"]
    for i in range(cloud.n):
        parts = [_fmt(v) for v in cloud.positions[i]] + [_fmt(v) for v in cloud.colors[i]]
        if has_labels:
            parts.append(str(int(cloud.labels[i])))
        lines.append(" ".join(parts))
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines))
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write point cloud to {path}: {exc}") from exc


def load_cloud(path) -> PointCloud:
    """Parse a ``.pts`` file. Errors name the offending 1-based line."""
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise CloudFormatError(f"{path}: empty file")

    header = lines[0].split()
    if len(header) != 3:
        raise CloudFormatError(
            f"{path}: line 1: header must be 'n C has_labels', got {lines[0]!r}"
        )
    try:
        n, num_classes, has_labels = (int(tok) for tok in header)
    except ValueError as exc:
        raise CloudFormatError(f"{path}: line 1: non-integer header field") from exc
    if n < 1 or num_classes < 1 or has_labels not in (0, 1):
        raise CloudFormatError(f"{path}: line 1: invalid header values {header}")
    expected_fields = 7 if has_labels else 6
    if len(lines) < n + 1:
        raise CloudFormatError(
            f"{path}: expected {n} data lines, found {len(lines) - 1}"
        )

    positions = np.empty((n, 3))
    colors = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64) if has_labels else None
    for i in range(n):
        lineno = i + 2
        fields = lines[i + 1].split()
        if len(fields) != expected_fields:
            raise CloudFormatError(
                f"{path}: line {lineno}: expected {expected_fields} fields, "
                f"got {len(fields)}"
            )
        try:
            values = [float(tok) for tok in fields[:6]]
        except ValueError as exc:
            raise CloudFormatError(
                f"{path}: line {lineno}: non-numeric field"
            ) from exc
        positions[i] = values[:3]
        colors[i] = values[3:6]
        if has_labels:
            try:
                label = int(fields[6])
            except ValueError as exc:
                raise CloudFormatError(
                    f"{path}: line {lineno}: non-integer label"
                ) from exc
            if not 0 <= label < num_classes:
                raise CloudFormatError(
                    f"{path}: line {lineno}: label {label} outside [0, {num_classes})"
                )
            labels[i] = label
    try:
        return PointCloud(positions, colors, num_classes, labels)
    except ValueError as exc:
        raise CloudFormatError(f"{path}: {exc}") from exc
