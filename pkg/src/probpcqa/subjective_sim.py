"""Synthetic stimuli with known quality and simulated subjective tests.

Each stimulus is a procedurally colored base shape degraded by one
``DistortionSpec``. Its latent quality is ``exp(-3 * severity)``; a panel of
simulated subjects rates it with a per-subject bias plus per-judgment noise,
and the MOS is the plain mean of those judgments.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pcio import (
    DistortionKind,
    DistortionSpec,
    PointCloud,
    apply_distortion,
    load_ply,
    normalize_unit_cube,
    save_ply,
)

BASE_SHAPES = ("sphere", "cube", "torus", "gaussian_blob")
MANIFEST_VERSION = 1


def true_quality(severity: float) -> float:
    return math.exp(-3.0 * severity)


@dataclass(eq=False)
class Stimulus:
    id: str
    cloud: PointCloud
    spec: DistortionSpec
    true_quality: float


@dataclass
class JudgmentSet:
    judgments: list
    mos: float

    def __post_init__(self):
        if len(self.judgments) < 1:
            raise ValueError("need at least one judgment")


# --------------------------------------------------------------------------
# stimuli


def _sample_shape(shape, n, rng):
    if shape == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if shape == "cube":
        # uniform over the surface: pick a face, then a point on it
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            m = axis == a
            others = [b for b in range(3) if b != a]
            pts[m, a] = sign[m]
            pts[m, others[0]] = uv[m, 0]
            pts[m, others[1]] = uv[m, 1]
        return pts
    if shape == "torus":
        big, small = 1.0, 0.4
        # rejection sampling on the tube angle gives area-uniform samples
        out = np.empty((0, 2))
        while len(out) < n:
            u = rng.uniform(0, 2 * np.pi, size=2 * n)
            v = rng.uniform(0, 2 * np.pi, size=2 * n)
            w = rng.uniform(0, 1, size=2 * n)
            keep = w <= (big + small * np.cos(v)) / (big + small)
            out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
        u, v = out[:n, 0], out[:n, 1]
        r = big + small * np.cos(v)
        return np.stack([r * np.cos(u), r * np.sin(u), small * np.sin(v)], axis=1)
    if shape == "gaussian_blob":
        return rng.normal(scale=0.5, size=(n, 3))
    raise ValueError(f"unknown base shape {shape!r}")


def _procedural_colors(points, palette, rng):
    phase = rng.uniform(0, 2 * np.pi, size=3)
    freq = 3.0 + palette
    t = points @ np.array([1.0, 0.7, 0.4])
    r = 0.5 + 0.5 * np.sin(freq * points[:, 0] + phase[0])
    g = 0.5 + 0.5 * np.sin(freq * points[:, 1] + phase[1])
    b = 0.5 + 0.5 * np.sin(0.5 * freq * t + phase[2])
    rgb = np.stack([r, g, b], axis=1)
    return np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)


def base_cloud(base_shape: str, n_points: int, seed: int, palette: int = 0) -> PointCloud:
    rng = np.random.default_rng([seed, 17])
    pts = _sample_shape(base_shape, n_points, rng)
    cloud = PointCloud(pts, _procedural_colors(pts, palette, rng))
    return normalize_unit_cube(cloud)


def gen_stimulus(
    base_shape: str,
    n_points: int,
    spec: DistortionSpec,
    seed: int,
    palette: int = 0,
    stimulus_id: str | None = None,
) -> Stimulus:
    if n_points < 100:
        raise ValueError("n_points must be >= 100")
    cloud = apply_distortion(base_cloud(base_shape, n_points, seed, palette), spec)
    # snap to float32 so the stored PLY reproduces the cloud exactly
    cloud = PointCloud(cloud.points.astype(np.float32).astype(np.float64), cloud.colors)
    sid = stimulus_id or f"{base_shape}-{spec.kind.value}-{spec.severity:g}-{seed}"
    return Stimulus(sid, cloud, spec, true_quality(spec.severity))


def simulate_judgments(
    true_quality: float,
    n_subjects: int,
    subject_bias_std: float,
    noise_std: float,
    seed: int,
) -> JudgmentSet:
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    if subject_bias_std < 0 or noise_std < 0:
        raise ValueError("standard deviations must be non-negative")
    rng = np.random.default_rng(seed)
    bias = rng.normal(0.0, subject_bias_std, size=n_subjects)
    noise = rng.normal(0.0, noise_std, size=n_subjects)
    j = np.clip(true_quality + bias + noise, 0.0, 1.0)
    return JudgmentSet(j.tolist(), float(np.mean(j)))


# --------------------------------------------------------------------------
# datasets


@dataclass
class SourceSpec:
    name: str
    shape: str
    palette: int = 0


@dataclass
class GenConfig:
    sources: list = field(
        default_factory=lambda: [
            SourceSpec("sphere", "sphere", 0),
            SourceSpec("cube", "cube", 0),
            SourceSpec("torus", "torus", 0),
            SourceSpec("blob", "gaussian_blob", 0),
            SourceSpec("sphere2", "sphere", 2),
            SourceSpec("torus2", "torus", 2),
        ]
    )
    kinds: list = field(default_factory=lambda: [k.value for k in DistortionKind])
    severities: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    n_points: int = 4000
    n_subjects: int = 37
    subject_bias_std: float = 0.1
    noise_std: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.sources = [s if isinstance(s, SourceSpec) else SourceSpec(**s) for s in self.sources]

    def to_dict(self):
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "desk": GenConfig(),
    "tiny": GenConfig(
        sources=[SourceSpec("sphere", "sphere"), SourceSpec("cube", "cube")],
        kinds=["geometry_noise", "downsample", "color_quantize"],
        severities=[0.1, 0.5, 0.9],
        n_points=600,
    ),
}


@dataclass
class ManifestRecord:
    id: str
    path: str
    mos: float
    split: str
    judgments: list | None = None


@dataclass
class DatasetManifest:
    records: list
    mos_min: float = 0.0
    mos_max: float = 1.0
    config_hash: str = ""
    root: Path = Path(".")

    def __post_init__(self):
        if not self.mos_min < self.mos_max:
            raise ValueError("mos_min must be < mos_max")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")
        for r in self.records:
            if not self.mos_min <= r.mos <= self.mos_max:
                raise ValueError(f"{r.id}: mos {r.mos} outside [{self.mos_min}, {self.mos_max}]")

    def split(self, tag: str) -> list:
        return [r for r in self.records if r.split == tag]

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def normalize(self, mos: float) -> float:
        return (mos - self.mos_min) / (self.mos_max - self.mos_min)

    def denormalize(self, value: float) -> float:
        return self.mos_min + value * (self.mos_max - self.mos_min)

    def load_cloud(self, record: ManifestRecord) -> PointCloud:
        return load_ply(self.resolve(record))


def write_manifest(manifest: DatasetManifest, path, config: dict | None = None) -> None:
    header = {
        "type": "header",
        "version": MANIFEST_VERSION,
        "mos_min": manifest.mos_min,
        "mos_max": manifest.mos_max,
        "config_hash": manifest.config_hash,
    }
    if config is not None:
        header["config"] = config
    lines = [json.dumps(header, sort_keys=True)]
    for r in manifest.records:
        rec = {"id": r.id, "path": r.path, "mos": r.mos, "split": r.split}
        if r.judgments is not None:
            rec["judgments"] = r.judgments
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise ValueError(f"{path}: line 1: missing manifest header")
    records = []
    for k, ln in enumerate(lines[1:], start=2):
        try:
            d = json.loads(ln)
            records.append(
                ManifestRecord(
                    id=str(d["id"]),
                    path=d["path"],
                    mos=float(d["mos"]),
                    split=d.get("split", "train"),
                    judgments=d.get("judgments"),
                )
            )
        except (KeyError, ValueError, TypeError) as e:
            raise ValueError(f"{path}: line {k}: bad record ({e})") from None
    return DatasetManifest(
        records,
        mos_min=float(header["mos_min"]),
        mos_max=float(header["mos_max"]),
        config_hash=header.get("config_hash", ""),
        root=path.parent,
    )


def build_dataset(config: GenConfig, out_dir) -> DatasetManifest:
    """Generate every (source, kind, severity) stimulus, judge it, split, and
    write PLYs plus ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    master = np.random.SeedSequence(config.seed)
    cells = [
        (src, kind, sev)
        for src in config.sources
        for kind in config.kinds
        for sev in config.severities
    ]
    child = master.spawn(len(cells))
    records = []
    for (src, kind, sev), ss in zip(cells, child):
        s_dist, s_judge = (int(x) for x in ss.generate_state(2))
        sid = f"{src.name}_{kind}_{sev:g}"
        stim = gen_stimulus(
            src.shape,
            config.n_points,
            DistortionSpec(kind, sev, s_dist),
            seed=_source_seed(config.seed, src),
            palette=src.palette,
            stimulus_id=sid,
        )
        js = simulate_judgments(
            stim.true_quality,
            config.n_subjects,
            config.subject_bias_std,
            config.noise_std,
            s_judge,
        )
        rel = f"clouds/{sid}.ply"
        save_ply(stim.cloud, out_dir / rel, binary=True)
        records.append(ManifestRecord(sid, rel, js.mos, "train", js.judgments))

    n_test = int(round(config.test_fraction * len(records)))
    order = np.random.default_rng([config.seed, 99]).permutation(len(records))
    for i in order[:n_test]:
        records[i].split = "test"
    manifest = DatasetManifest(records, 0.0, 1.0, config.hash(), out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl", config.to_dict())
    return manifest


def _source_seed(master_seed: int, src: SourceSpec) -> int:
    # every distorted version of a source shares the same pristine cloud
    digest = hashlib.sha256(f"{master_seed}:{src.name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
