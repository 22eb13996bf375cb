"""Labeled synthetic indoor scenes sampled from geometric primitives.

Scenes stand in for scanned rooms: a floor, walls and a few pieces of
furniture, each primitive carrying one semantic class. Points are sampled
on primitive surfaces, so touching primitives (a box resting on the floor)
produce genuine class boundaries where neighborhoods mix labels. Colors are
per-class base colors plus Gaussian noise, which keeps the classes
correlated with appearance without making them trivially separable.

Generation is bit-deterministic for a fixed seed: one ``default_rng(seed)``
stream drives every draw in a fixed primitive order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud

SHAPES = ("floor-plane", "wall-plane", "box", "cylinder")

# base colors per class id; ids beyond the palette wrap around with a shade shift
_PALETTE = np.array(
    [
        [0.55, 0.45, 0.35],  # wooden floor
        [0.75, 0.73, 0.68],  # plaster wall
        [0.35, 0.30, 0.55],  # upholstered box
        [0.30, 0.55, 0.35],  # painted cylinder
        [0.60, 0.30, 0.30],  # extra furniture class
        [0.25, 0.50, 0.60],
    ]
)


def class_base_color(class_id: int) -> np.ndarray:
    base = _PALETTE[class_id % len(_PALETTE)].copy()
    wrap = class_id // len(_PALETTE)
    if wrap:
        base = np.clip(base + 0.13 * wrap, 0.0, 1.0)
    return base


@dataclass
class Primitive:
    """One surface in the scene.

    ``size`` meaning per shape: floor/wall planes (width, height) of the
    rectangle, box (sx, sy, sz) edge lengths, cylinder (radius, height).
    ``yaw`` rotates the primitive about the vertical axis; planes are
    horizontal (floor) or vertical (wall).
    """

    shape: str
    center: tuple[float, float, float]
    size: tuple[float, ...]
    class_id: int
    yaw: float = 0.0

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        expected = {"floor-plane": 2, "wall-plane": 2, "box": 3, "cylinder": 2}[self.shape]
        if len(self.size) != expected:
            raise ValueError(f"{self.shape} needs {expected} size values, got {len(self.size)}")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"{self.shape} size must be positive, got {self.size}")
        if self.class_id < 0:
            raise ValueError("class id must be nonnegative")

    def area(self) -> float:
        if self.shape in ("floor-plane", "wall-plane"):
            return self.size[0] * self.size[1]
        if self.shape == "box":
            sx, sy, sz = self.size
            return 2.0 * (sx * sy + sx * sz + sy * sz)
        r, h = self.size
        return 2.0 * math.pi * r * h + math.pi * r * r  # lateral plus top cap


@dataclass
class SceneSpec:
    """Recipe for one deterministic synthetic scene."""

    seed: int
    extent: tuple[float, float, float]
    primitives: list[Primitive] = field(default_factory=list)
    density: float = 200.0  # points per square meter of primitive surface
    color_noise: float = 0.05

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.color_noise < 0:
            raise ValueError("color noise must be nonnegative")
        if any(e <= 0 for e in self.extent):
            raise ValueError("extent must be positive")
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for prim in self.primitives:
            prim.validate()
        if len({p.class_id for p in self.primitives}) < 2:
            raise ValueError("scene needs at least two distinct class ids")

    @property
    def num_classes(self) -> int:
        return max(p.class_id for p in self.primitives) + 1


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _sample_plane(rng, prim: Primitive, count: int, vertical: bool) -> np.ndarray:
    w, h = prim.size
    u = rng.uniform(-0.5 * w, 0.5 * w, count)
    v = rng.uniform(-0.5 * h, 0.5 * h, count)
    if vertical:
        local = np.column_stack([u, np.zeros(count), v])
    else:
        local = np.column_stack([u, v, np.zeros(count)])
    return local @ _yaw_matrix(prim.yaw).T + np.asarray(prim.center)


def _sample_box(rng, prim: Primitive, count: int) -> np.ndarray:
    sx, sy, sz = prim.size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, count)
    v = rng.uniform(-0.5, 0.5, count)
    local = np.empty((count, 3))
    half = np.array([sx, sy, sz]) * 0.5
    for f in range(6):
        sel = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        pts = np.empty((int(sel.sum()), 3))
        others = [a for a in range(3) if a != axis]
        pts[:, axis] = sign * half[axis]
        pts[:, others[0]] = u[sel] * prim.size[others[0]]
        pts[:, others[1]] = v[sel] * prim.size[others[1]]
        local[sel] = pts
    return local @ _yaw_matrix(prim.yaw).T + np.asarray(prim.center)


def _sample_cylinder(rng, prim: Primitive, count: int) -> np.ndarray:
    r, h = prim.size
    lateral = 2.0 * math.pi * r * h
    cap = math.pi * r * r
    on_cap = rng.random(count) < cap / (lateral + cap)
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    local = np.empty((count, 3))
    n_cap = int(on_cap.sum())
    rad = r * np.sqrt(rng.random(n_cap))
    local[on_cap, 0] = rad * np.cos(theta[on_cap])
    local[on_cap, 1] = rad * np.sin(theta[on_cap])
    local[on_cap, 2] = 0.5 * h
    side = ~on_cap
    local[side, 0] = r * np.cos(theta[side])
    local[side, 1] = r * np.sin(theta[side])
    local[side, 2] = rng.uniform(-0.5 * h, 0.5 * h, int(side.sum()))
    return local + np.asarray(prim.center)


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample the scene surface by surface into one labeled point cloud."""
    rng = np.random.default_rng(spec.seed)
    all_points, all_labels = [], []
    for prim in spec.primitives:
        count = max(1, int(round(spec.density * prim.area())))
        if prim.shape == "floor-plane":
            pts = _sample_plane(rng, prim, count, vertical=False)
        elif prim.shape == "wall-plane":
            pts = _sample_plane(rng, prim, count, vertical=True)
        elif prim.shape == "box":
            pts = _sample_box(rng, prim, count)
        else:
            pts = _sample_cylinder(rng, prim, count)
        all_points.append(pts)
        all_labels.append(np.full(count, prim.class_id, dtype=np.int64))
    positions = np.vstack(all_points)
    labels = np.concatenate(all_labels)
    base = np.vstack([class_base_color(c) for c in labels])
    colors = base + rng.normal(0.0, spec.color_noise, base.shape)
    np.clip(colors, 0.0, 1.0, out=colors)
    return PointCloud(positions, colors, spec.num_classes, labels)


def sample_scene_spec(
    seed: int,
    classes: int = 4,
    target_points: int = 4096,
    extent: tuple[float, float, float] = (4.0, 4.0, 2.5),
    color_noise: float = 0.08,
) -> SceneSpec:
    """Randomized room layout: floor, walls, and boxes/cylinders on the floor.

    Class ids: 0 floor, 1 wall, 2 box furniture, 3 cylinder, 4 thin slab on
    top of a box. ``classes`` in [2, 5] selects how many of those appear;
    primitive poses and sizes are drawn from ``seed``. ``target_points``
    controls the sampling density, not an exact count.
    """
    if not 2 <= classes <= 5:
        raise ValueError("classes must lie in [2, 5]")
    rng = np.random.default_rng(seed)
    ex, ey, ez = extent
    prims: list[Primitive] = [
        Primitive("floor-plane", (0.0, 0.0, 0.0), (ex, ey), class_id=0),
        Primitive("wall-plane", (0.0, -0.5 * ey, 0.5 * ez), (ex, ez), class_id=1),
        Primitive(
            "wall-plane",
            (-0.5 * ex, 0.0, 0.5 * ez),
            (ey, ez),
            class_id=1,
            yaw=0.5 * math.pi,
        ),
    ]
    if classes >= 3:
        for _ in range(int(rng.integers(2, 4))):
            sx, sy = rng.uniform(0.4, 1.0, 2)
            sz = rng.uniform(0.3, 0.9)
            cx = rng.uniform(-0.5 * ex + 0.8, 0.5 * ex - 0.8)
            cy = rng.uniform(-0.5 * ey + 0.8, 0.5 * ey - 0.8)
            prims.append(
                Primitive(
                    "box",
                    (cx, cy, 0.5 * sz),  # resting on the floor
                    (sx, sy, sz),
                    class_id=2,
                    yaw=rng.uniform(0.0, math.pi),
                )
            )
    if classes >= 4:
        for _ in range(int(rng.integers(1, 3))):
            r = rng.uniform(0.12, 0.3)
            h = rng.uniform(0.3, 0.8)
            cx = rng.uniform(-0.5 * ex + 0.6, 0.5 * ex - 0.6)
            cy = rng.uniform(-0.5 * ey + 0.6, 0.5 * ey - 0.6)
            prims.append(Primitive("cylinder", (cx, cy, 0.5 * h), (r, h), class_id=3))
    if classes >= 5:
        host = next(p for p in prims if p.shape == "box")
        sx, sy, sz = host.size
        prims.append(
            Primitive(
                "box",
                (host.center[0], host.center[1], sz + 0.025),
                (sx * 1.3, sy * 1.3, 0.05),  # slab overhanging the host box
                class_id=4,
                yaw=host.yaw,
            )
        )
    area = sum(p.area() for p in prims)
    density = target_points / area
    return SceneSpec(
        seed=int(rng.integers(0, 2**31)),
        extent=extent,
        primitives=prims,
        density=density,
        color_noise=color_noise,
    )
