"""Orthographic RGB-D projection of unit-cube point clouds.

The image plane covers ``[-0.75, 0.75]^2`` of rotated model space. Points that
rotate outside that window (only possible near cube corners) are dropped.
Depth uses the fixed range ``[-sqrt(3)/2, sqrt(3)/2]`` so values compare across
views; the viewer sits at +z, so nearer points get larger D.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pcio import PointCloud

WINDOW = 0.75
DEPTH_HALF_RANGE = math.sqrt(3.0) / 2.0
# smallest depth code for a covered pixel; keeps D > 0 after 16-bit export
MIN_DEPTH = 1.0 / 65535.0


@dataclass(frozen=True)
class Viewpoint:
    rotation: tuple  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        n = np.linalg.norm(q)
        if q.shape != (4,) or abs(n - 1.0) > 1e-9:
            raise ValueError(f"rotation must be a unit quaternion, got norm {n}")
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )


@dataclass(eq=False)
class Projection:
    channels: np.ndarray  # (4, H, W) float32: R, G, B, D
    viewpoint: Viewpoint


@dataclass(eq=False)
class ProjectionSet:
    views: list

    def __post_init__(self):
        if len(self.views) < 1:
            raise ValueError("a projection set needs at least one view")
        shapes = {v.channels.shape for v in self.views}
        if len(shapes) != 1:
            raise ValueError(f"views have differing shapes {shapes}")

    def __len__(self):
        return len(self.views)

    def stack(self) -> np.ndarray:
        """(N_v, 4, H, W) float32 array."""
        return np.stack([v.channels for v in self.views])


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """(n, 4) unit quaternions (w, x, y, z), uniform over rotations.

    Shoemake's three-uniform construction.
    """
    u1, u2, u3 = rng.random((3, n))
    a, b = np.sqrt(1 - u1), np.sqrt(u1)
    q = np.stack(
        [
            b * np.cos(2 * np.pi * u3),
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
        ],
        axis=1,
    )
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def sample_viewpoint(rng: np.random.Generator) -> Viewpoint:
    return Viewpoint(tuple(random_quaternions(rng, 1)[0]))


def _facing(axis) -> Viewpoint:
    """Rotation that turns the direction ``axis`` toward the viewer (+z)."""
    a = np.asarray(axis, dtype=np.float64)
    zhat = np.array([0.0, 0.0, 1.0])
    c = float(a @ zhat)
    if c > 1 - 1e-12:
        return Viewpoint((1.0, 0.0, 0.0, 0.0))
    if c < -1 + 1e-12:
        return Viewpoint((0.0, 1.0, 0.0, 0.0))
    k = np.cross(a, zhat)
    k /= np.linalg.norm(k)
    half = math.acos(c) / 2
    return Viewpoint((math.cos(half), *(math.sin(half) * k)))


CANONICAL_AXES = [
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
]


def canonical_viewpoints(n_v: int) -> list:
    return [_facing(CANONICAL_AXES[i % len(CANONICAL_AXES)]) for i in range(n_v)]


def _disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dx * dx + dy * dy <= r * r
    return np.stack([dy[keep], dx[keep]], axis=1)


def render_rgbd(
    pc: PointCloud, vp: Viewpoint, h: int, w: int, splat_radius: int = 0
) -> Projection:
    if h < 1 or w < 1:
        raise ValueError("projection size must be positive")
    m = vp.matrix()
    x, y, z = pc.points.T
    # elementwise rather than BLAS so each point's result is order-independent
    p = np.stack([m[i, 0] * x + m[i, 1] * y + m[i, 2] * z for i in range(3)], axis=1)
    n = len(p)
    col = np.floor((p[:, 0] + WINDOW) / (2 * WINDOW) * w).astype(np.int64)
    row = np.floor((WINDOW - p[:, 1]) / (2 * WINDOW) * h).astype(np.int64)
    visible = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    depth = (p[:, 2] + DEPTH_HALF_RANGE) / (2 * DEPTH_HALF_RANGE)
    depth = np.clip(depth, MIN_DEPTH, 1.0)

    off = _disc_offsets(splat_radius)
    rr = (row[:, None] + off[None, :, 0]).ravel()
    cc = (col[:, None] + off[None, :, 1]).ravel()
    owner = np.repeat(np.arange(n), len(off))
    inside = np.repeat(visible, len(off)) & (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    rr, cc, owner = rr[inside], cc[inside], owner[inside]
    pix = rr * w + cc
    # z-buffer: per pixel keep the largest z, exact ties go to the lower index
    order = np.lexsort((owner, -p[owner, 2], pix))
    pix, owner = pix[order], owner[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, owner = pix[first], owner[first]

    img = np.zeros((4, h * w), dtype=np.float32)
    img[:3, pix] = (pc.colors[owner].T / 255.0).astype(np.float32)
    img[3, pix] = depth[owner].astype(np.float32)
    return Projection(img.reshape(4, h, w), vp)


def render_views(
    pc: PointCloud,
    n_v: int,
    h: int,
    w: int,
    rng: np.random.Generator | None = None,
    fixed: bool = False,
    splat_radius: int | None = None,
    no_depth: bool = False,
) -> ProjectionSet:
    """Render ``n_v`` views; random viewpoints are drawn sequentially from ``rng``."""
    if n_v < 1:
        raise ValueError("n_v must be >= 1")
    if splat_radius is None:
        splat_radius = default_splat_radius(h, w)
    if fixed:
        vps = canonical_viewpoints(n_v)
    else:
        if rng is None:
            raise ValueError("random viewpoints need an rng")
        vps = [sample_viewpoint(rng) for _ in range(n_v)]
    views = [render_rgbd(pc, vp, h, w, splat_radius) for vp in vps]
    if no_depth:
        for v in views:
            v.channels[3] = 0.0
    return ProjectionSet(views)


def default_splat_radius(h: int, w: int) -> int:
    return 0 if max(h, w) <= 64 else 1


def dump_projections(ps: ProjectionSet, out_dir, stem: str = "view") -> list:
    """Write each view as an 8-bit RGB PNG plus a 16-bit depth PNG, and a
    JSON sidecar with viewpoints and depth normalization constants."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "window": WINDOW,
        "depth_range": [-DEPTH_HALF_RANGE, DEPTH_HALF_RANGE],
        "depth_encoding": "uint16 = round(D * 65535); nearer is larger; 0 = background",
        "views": [],
    }
    written = []
    for i, v in enumerate(ps.views):
        rgb = np.round(np.transpose(v.channels[:3], (1, 2, 0)) * 255).astype(np.uint8)
        d16 = np.round(v.channels[3] * 65535).astype(np.uint16)
        rgb_path = out_dir / f"{stem}{i}_rgb.png"
        d_path = out_dir / f"{stem}{i}_depth.png"
        Image.fromarray(rgb, mode="RGB").save(rgb_path)
        Image.fromarray(d16).save(d_path)
        meta["views"].append(
            {"rgb": rgb_path.name, "depth": d_path.name, "quaternion_wxyz": list(v.viewpoint.rotation)}
        )
        written += [rgb_path, d_path]
    side = out_dir / f"{stem}s.json"
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    written.append(side)
    return written
