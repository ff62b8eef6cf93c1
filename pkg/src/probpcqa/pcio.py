"""Point cloud I/O, normalization and synthetic distortions.

Only a small PLY subset is supported: one ``vertex`` element with
``float x, float y, float z, uchar red, uchar green, uchar blue`` in that
order, stored as ``ascii 1.0`` or ``binary_little_endian 1.0``. Anything else
is rejected with the offending line or byte position.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

_PROPS = [
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
]
_VERTEX_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
)


class PLYError(ValueError):
    """Raised for PLY files outside the supported subset or with corrupt bodies."""


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray  # (n, 3) float64
    colors: np.ndarray  # (n, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        colors = np.asarray(self.colors)
        if colors.dtype != np.uint8:
            if colors.size and (colors.min() < 0 or colors.max() > 255):
                raise ValueError("color components must lie in [0, 255]")
            colors = colors.astype(np.uint8)
        self.colors = colors.reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("a point cloud needs at least one point")
        if len(self.points) != len(self.colors):
            raise ValueError(
                f"{len(self.points)} points but {len(self.colors)} colors"
            )
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points) and np.array_equal(
            self.colors, other.colors
        )

    def copy(self) -> "PointCloud":
        return PointCloud(self.points.copy(), self.colors.copy())


# --------------------------------------------------------------------------
# PLY


def _parse_header(f, path):
    """Return (format, vertex_count, body_offset, header_line_count)."""
    raw = f.readline()
    if raw.rstrip(b"\r\n") != b"ply":
        raise PLYError(f"{path}: line 1: missing 'ply' magic")
    fmt = None
    count = None
    props = []
    in_vertex = False
    lineno = 1
    while True:
        raw = f.readline()
        lineno += 1
        if not raw:
            raise PLYError(f"{path}: line {lineno}: header ended before 'end_header'")
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PLYError(f"{path}: line {lineno}: non-ASCII header line") from None
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0]
        if key in ("comment", "obj_info"):
            continue
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) != 3 or tokens[2] != "1.0" or tokens[1] not in (
                "ascii",
                "binary_little_endian",
            ):
                raise PLYError(f"{path}: line {lineno}: unsupported format '{line}'")
            fmt = tokens[1]
        elif key == "element":
            if len(tokens) != 3:
                raise PLYError(f"{path}: line {lineno}: malformed element line")
            if tokens[1] != "vertex" or count is not None:
                raise PLYError(
                    f"{path}: line {lineno}: only a single 'vertex' element is supported"
                )
            try:
                count = int(tokens[2])
            except ValueError:
                raise PLYError(f"{path}: line {lineno}: bad vertex count") from None
            if count < 1:
                raise PLYError(f"{path}: line {lineno}: vertex count must be >= 1")
            in_vertex = True
        elif key == "property":
            if not in_vertex:
                raise PLYError(f"{path}: line {lineno}: property outside an element")
            if len(tokens) != 3:
                raise PLYError(f"{path}: line {lineno}: unsupported property '{line}'")
            props.append((tokens[1], tokens[2]))
        else:
            raise PLYError(f"{path}: line {lineno}: unexpected header keyword '{key}'")
    if fmt is None:
        raise PLYError(f"{path}: header has no format line")
    if count is None:
        raise PLYError(f"{path}: header has no vertex element")
    if props != _PROPS:
        raise PLYError(
            f"{path}: unsupported property layout {props}; expected "
            "float x/y/z followed by uchar red/green/blue"
        )
    return fmt, count, f.tell(), lineno


def load_ply(path) -> PointCloud:
    path = os.fspath(path)
    with open(path, "rb") as f:
        fmt, count, offset, header_lines = _parse_header(f, path)
        body = f.read()
    if fmt == "binary_little_endian":
        need = count * _VERTEX_DTYPE.itemsize
        if len(body) < need:
            raise PLYError(
                f"{path}: truncated body at byte {offset + len(body)}: "
                f"expected {count} vertices ({need} bytes), got {len(body)} bytes"
            )
        rec = np.frombuffer(body, dtype=_VERTEX_DTYPE, count=count)
        points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    else:
        lines = [ln for ln in body.decode("ascii", errors="replace").splitlines()]
        points = np.empty((count, 3), dtype=np.float64)
        colors = np.empty((count, 3), dtype=np.uint8)
        i = 0
        for k, ln in enumerate(lines):
            lineno = header_lines + 1 + k
            tokens = ln.split()
            if not tokens:
                continue
            if i == count:
                break
            if len(tokens) != 6:
                raise PLYError(f"{path}: line {lineno}: expected 6 values, got {len(tokens)}")
            try:
                xyz = [float(np.float32(t)) for t in tokens[:3]]
                rgb = [int(t) for t in tokens[3:]]
            except ValueError:
                raise PLYError(f"{path}: line {lineno}: unparsable vertex '{ln}'") from None
            if any(c < 0 or c > 255 for c in rgb):
                raise PLYError(f"{path}: line {lineno}: color outside [0, 255]")
            points[i] = xyz
            colors[i] = rgb
            i += 1
        if i < count:
            raise PLYError(
                f"{path}: truncated body at line {header_lines + len(lines) + 1}: "
                f"expected {count} vertices, found {i}"
            )
    if not np.all(np.isfinite(points)):
        raise PLYError(f"{path}: non-finite coordinates")
    return PointCloud(points, colors)


def save_ply(pc: PointCloud, path, binary: bool = True, precision: int = 6) -> None:
    """Write ``pc``. Coordinates are stored as 32-bit floats.

    Binary round trips are exact for float32-representable coordinates; ASCII
    keeps ``precision`` decimals.
    """
    path = os.fspath(path)
    if not path:
        raise OSError("empty output path")
    n = len(pc)
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {n}",
    ]
    header += [f"property {t} {name}" for t, name in _PROPS]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    with open(path, "wb") as f:
        f.write(head)
        if binary:
            rec = np.empty(n, dtype=_VERTEX_DTYPE)
            for j, name in enumerate("xyz"):
                rec[name] = pc.points[:, j]
            for j, name in enumerate(("red", "green", "blue")):
                rec[name] = pc.colors[:, j]
            f.write(rec.tobytes())
        else:
            pts = pc.points.astype(np.float32)
            lines = [
                f"{x:.{precision}f} {y:.{precision}f} {z:.{precision}f} {r} {g} {b}"
                for (x, y, z), (r, g, b) in zip(pts.tolist(), pc.colors.tolist())
            ]
            f.write(("\n".join(lines) + "\n").encode("ascii"))


# --------------------------------------------------------------------------
# geometry


def normalize_unit_cube(pc: PointCloud) -> PointCloud:
    """Center the bounding box at the origin and scale its longest side to 1."""
    lo = pc.points.min(axis=0)
    hi = pc.points.max(axis=0)
    center = (lo + hi) / 2
    extent = (hi - lo).max()
    pts = pc.points - center
    if extent > 0:
        pts = pts / extent
    return PointCloud(pts, pc.colors.copy())


def bbox_diagonal(pc: PointCloud) -> float:
    return float(np.linalg.norm(pc.points.max(axis=0) - pc.points.min(axis=0)))


# --------------------------------------------------------------------------
# distortions


class DistortionKind(str, Enum):
    GEOMETRY_NOISE = "geometry_noise"
    DOWNSAMPLE = "downsample"
    COLOR_QUANTIZE = "color_quantize"
    COMPOUND = "compound"


@dataclass(frozen=True)
class DistortionSpec:
    kind: DistortionKind
    severity: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", DistortionKind(self.kind))
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must be in [0, 1], got {self.severity}")


def noise_std(pc: PointCloud, severity: float) -> float:
    return severity * 0.05 * bbox_diagonal(pc)


def keep_count(n: int, severity: float) -> int:
    # rounding guards against e.g. 0.9 * 5/9 landing a hair above 0.5
    return max(1, math.ceil(round((1.0 - 0.9 * severity) * n, 9)))


def quantize_bits(severity: float) -> int:
    return max(1, round(8 - 7 * severity))


def _geometry_noise(pc, severity, rng):
    std = noise_std(pc, severity)
    if std == 0:
        return pc.copy()
    return PointCloud(pc.points + rng.normal(0.0, std, size=pc.points.shape), pc.colors.copy())


def _downsample(pc, severity, rng):
    n = len(pc)
    k = keep_count(n, severity)
    if k >= n:
        return pc.copy()
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return PointCloud(pc.points[idx], pc.colors[idx])


def _color_quantize(pc, severity):
    bits = quantize_bits(severity)
    if bits >= 8:
        return pc.copy()
    levels = (1 << bits) - 1
    q = np.round(pc.colors.astype(np.float64) / 255.0 * levels)
    colors = np.round(q * 255.0 / levels).astype(np.uint8)
    return PointCloud(pc.points.copy(), colors)


def apply_distortion(pc: PointCloud, spec: DistortionSpec) -> PointCloud:
    if spec.severity == 0:
        return pc.copy()
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    if spec.kind is DistortionKind.GEOMETRY_NOISE:
        return _geometry_noise(pc, spec.severity, np.random.default_rng(seeds[0]))
    if spec.kind is DistortionKind.DOWNSAMPLE:
        return _downsample(pc, spec.severity, np.random.default_rng(seeds[1]))
    if spec.kind is DistortionKind.COLOR_QUANTIZE:
        return _color_quantize(pc, spec.severity)
    out = _geometry_noise(pc, spec.severity, np.random.default_rng(seeds[0]))
    out = _downsample(out, spec.severity, np.random.default_rng(seeds[1]))
    return _color_quantize(out, spec.severity)
