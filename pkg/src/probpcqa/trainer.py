"""Training loop, Adam, learning-rate schedule and checkpoint container."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ndiff
from .model import ModelConfig, ProbQualityModel
from .objective import deterministic_loss, lambda_schedule, overall_loss
from .latent import encode_prior, expand_spatial, reparameterize
from .pcio import normalize_unit_cube
from .render import render_views
from .subjective_sim import DatasetManifest

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PPQACKPT"
CHECKPOINT_VERSION = 1
THREADS_ENV = "PROBPCQA_THREADS"


class DivergenceError(FloatingPointError):
    def __init__(self, message, epoch=None, step=None, sample_ids=()):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.sample_ids = list(sample_ids)


class ConfigError(ValueError):
    pass


def configure_threads():
    n = os.environ.get(THREADS_ENV)
    torch.set_num_threads(int(n) if n else 1)


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch: int = 8
    alpha: float = 0.4
    n_v: int = 2
    h: int = 64
    w: int = 64
    k1: int = 3
    k2: int = 32
    encoder_channels: list = field(default_factory=lambda: [8, 16, 32, 64, 64])
    encoder_hidden: int = 32
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 1
    splat_radius: int | None = None
    seed: int = 0
    # "epoch": fresh random viewpoints every epoch; "run": one draw per sample
    viewpoints_per: str = "epoch"
    clip_grad_norm: float | None = None
    probe_size: int = 4
    probe_samples: int = 8
    # ablations
    no_stochastic: bool = False
    no_annealing: bool = False
    alpha_override: float | None = None
    no_depth: bool = False
    fixed_viewpoint: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch", "n_v", "h", "w", "k1", "k2", "encoder_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.effective_alpha <= 1:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.viewpoints_per not in ("epoch", "run"):
            raise ConfigError("viewpoints_per must be 'epoch' or 'run'")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.alpha_override is None else self.alpha_override

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            k1=self.k1,
            k2=self.k2,
            encoder_channels=list(self.encoder_channels),
            encoder_hidden=self.encoder_hidden,
            stage_channels=list(self.stage_channels),
            blocks_per_stage=self.blocks_per_stage,
            stochastic=not self.no_stochastic,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "desk": TrainConfig(),
    "paper": TrainConfig(
        lr=2.5e-5, epochs=200, batch=8, n_v=4, h=480, w=480, splat_radius=1
    ),
    "tiny": TrainConfig(
        epochs=2,
        batch=4,
        n_v=2,
        h=32,
        w=32,
        k2=4,
        encoder_channels=[4, 4, 4, 4, 4],
        encoder_hidden=4,
        stage_channels=[4, 4, 4, 4],
        probe_size=2,
        probe_samples=4,
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name].replace(**overrides)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments). Values are JSON literals
    or bare strings; ``preset = name`` picks the starting point."""
    values = {}
    start = base
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        if key == "preset":
            try:
                start = preset(parsed)
            except ConfigError as e:
                raise ConfigError(f"line {lineno}: {e}") from None
            continue
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = (lineno, parsed)
    cfg = start or TrainConfig()
    for key, (lineno, v) in values.items():
        try:
            cfg = cfg.replace(**{key: v})
        except (ConfigError, TypeError) as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def format_config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in cfg.to_dict().items())


# --------------------------------------------------------------------------
# optimization


class Adam:
    """Adaptive moments with bias correction, over named parameters."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.t = 0

    @torch.no_grad()
    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise RuntimeError(f"adam step before backward: {name} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            self.m[name].mul_(b1).add_(g, alpha=1 - b1)
            self.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.sub_(lr * m_hat / (v_hat.sqrt() + self.eps))


def adam_step(opt: Adam, lr: float) -> None:
    opt.step(lr)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if not 1 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {config.epochs}]")
    return config.lr if epoch <= config.epochs / 2 else config.lr * 0.5


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict  # name -> float32 ndarray
    moments_m: dict = field(default_factory=dict)
    moments_v: dict = field(default_factory=dict)
    epoch: int = 0
    adam_step: int = 0
    mos_min: float = 0.0
    mos_max: float = 1.0

    def build_model(self) -> ProbQualityModel:
        model = ProbQualityModel(self.config.model_config())
        names = {n for n, _ in model.named_parameters()}
        if names != set(self.params):
            missing = sorted(names - set(self.params))
            extra = sorted(set(self.params) - names)
            raise ValueError(
                f"checkpoint does not match its config (missing {missing[:3]}, extra {extra[:3]})"
            )
        with torch.no_grad():
            for n, p in model.named_parameters():
                if tuple(p.shape) != self.params[n].shape:
                    raise ValueError(f"shape mismatch for {n}")
                p.copy_(torch.from_numpy(self.params[n]))
        return model

    def header(self) -> dict:
        return {
            "format": "probpcqa-checkpoint",
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "adam_step": self.adam_step,
            "mos_min": self.mos_min,
            "mos_max": self.mos_max,
            # all randomness derives from (seed, epoch, step)
            "rng": {"scheme": "seed-epoch-step", "seed": self.config.seed, "next_epoch": self.epoch + 1},
        }


def _named_tensors(ck: Checkpoint):
    yield from sorted(ck.params.items())
    yield from ((f"adam.m/{n}", t) for n, t in sorted(ck.moments_m.items()))
    yield from ((f"adam.v/{n}", t) for n, t in sorted(ck.moments_v.items()))


def save_checkpoint(ck: Checkpoint, path) -> None:
    header = json.dumps(ck.header(), sort_keys=True).encode()
    tensors = list(_named_tensors(ck))
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off : off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    try:
        config = TrainConfig(**header["config"])
    except TypeError as e:
        raise ValueError(f"{path}: incompatible checkpoint config ({e})") from None
    return Checkpoint(
        config, params, m, v, header["epoch"], header["adam_step"], header["mos_min"], header["mos_max"]
    )


def snapshot(model, opt: Adam | None, config, epoch, mos_min, mos_max) -> Checkpoint:
    params = {n: p.detach().numpy().copy() for n, p in model.named_parameters()}
    m = {n: t.numpy().copy() for n, t in opt.m.items()} if opt else {}
    v = {n: t.numpy().copy() for n, t in opt.v.items()} if opt else {}
    return Checkpoint(config, params, m, v, epoch, opt.t if opt else 0, mos_min, mos_max)


# --------------------------------------------------------------------------
# training


def _seed_for(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def render_sample(cloud, config: TrainConfig, seed_keys) -> np.ndarray:
    rng = np.random.default_rng([int(k) for k in seed_keys])
    ps = render_views(
        cloud,
        config.n_v,
        config.h,
        config.w,
        rng,
        fixed=config.fixed_viewpoint,
        splat_radius=config.splat_radius,
        no_depth=config.no_depth,
    )
    return ps.stack()


def probe_variance(model, probe_views: torch.Tensor, n_samples: int, gen) -> float:
    """Mean over probe stimuli of the rating variance across prior samples."""
    if not model.stochastic:
        return 0.0
    with torch.no_grad():
        h, w = probe_views.shape[-2:]
        stat = encode_prior(probe_views, model.prior)
        ratings = []
        for _ in range(n_samples):
            z = reparameterize(stat, gen)
            ratings.append(model.qrg(probe_views, expand_spatial(z, h, w)))
        r = torch.stack(ratings)
        return float(r.var(dim=0, unbiased=False).mean())


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    checkpoint_every: int | None = None,
):
    """Train on the manifest's ``train`` split.

    Returns ``(checkpoint, log_records)``. With ``out_dir`` the per-epoch log
    is appended to ``train_log.jsonl`` and the final checkpoint written to
    ``checkpoint.ckpt``. ``stop_after`` ends early after that epoch (used to
    produce resumable mid-run checkpoints); ``checkpoint_every`` also writes
    ``checkpoint_eNNNN.ckpt`` every that many epochs. Raises :class:`DivergenceError`
    on a non-finite loss, gradient or parameter.
    """
    configure_threads()
    records = manifest.split("train")
    if not records:
        raise ValueError("manifest has an empty train split")
    index = {r.id: i for i, r in enumerate(manifest.records)}
    clouds = []
    for r in records:
        try:
            clouds.append(normalize_unit_cube(manifest.load_cloud(r)))
        except (OSError, ValueError) as e:
            raise ValueError(f"cannot read sample {r.id}: {e}") from e
    # only the MOS is used for supervision; raw judgments stay unread
    mos = torch.tensor([manifest.normalize(r.mos) for r in records], dtype=torch.float32)

    if resume is not None:
        if resume.config != config:
            raise ValueError("resume checkpoint was produced with a different config")
        model = resume.build_model()
    else:
        model = ProbQualityModel(config.model_config())
    opt = Adam(model.named_parameters(), config.beta1, config.beta2, config.eps)
    start = 1
    if resume is not None:
        for n in opt.m:
            opt.m[n].copy_(torch.from_numpy(resume.moments_m[n]))
            opt.v[n].copy_(torch.from_numpy(resume.moments_v[n]))
        opt.t = resume.adam_step
        start = resume.epoch + 1

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume is None:
            (out_dir / "train_log.jsonl").write_text("")

    def emit(rec):
        log_records.append(rec)
        if out_dir is not None:
            with open(out_dir / "train_log.jsonl", "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    n_probe = min(config.probe_size, len(records))
    probe_views = torch.from_numpy(
        np.stack(
            [render_sample(clouds[i], config, (config.seed, 0, index[records[i].id], 1)) for i in range(n_probe)]
        )
    )

    alpha = config.effective_alpha
    log_records = []
    step = opt.t
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(start, last + 1):
        lr = lr_at(epoch, config)
        lam = 1.0 if config.no_annealing else lambda_schedule(epoch, config.epochs)
        view_epoch = epoch if config.viewpoints_per == "epoch" else 0
        order = np.random.default_rng([config.seed, epoch, 2]).permutation(len(records))
        sums = {"recon_post": 0.0, "kl": 0.0, "recon_prior": 0.0, "total": 0.0}
        n_seen = 0
        for b0 in range(0, len(order), config.batch):
            idx = order[b0 : b0 + config.batch]
            views = torch.from_numpy(
                np.stack(
                    [
                        render_sample(clouds[i], config, (config.seed, view_epoch, index[records[i].id], 0))
                        for i in idx
                    ]
                )
            )
            target = mos[idx]
            step += 1
            gen = torch.Generator().manual_seed(_seed_for(config.seed, epoch, step))
            ndiff.zero_grad(model.parameters())
            try:
                if model.stochastic:
                    lb = overall_loss(model, views, target, lam, alpha, gen)
                else:
                    lb = deterministic_loss(model, views, target)
            except ndiff.NonFiniteError as e:
                _diverge(emit, f"forward: {e}", epoch, step, [records[i].id for i in idx])
            if not torch.isfinite(lb.total):
                bad = [records[i].id for i, v in zip(idx, lb.per_sample) if not torch.isfinite(v)]
                _diverge(emit, "non-finite loss", epoch, step, bad or [records[i].id for i in idx])
            ndiff.backward(lb.total)
            grads_ok = all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None)
            if not grads_ok:
                _diverge(emit, "non-finite gradient", epoch, step, [records[i].id for i in idx])
            for p in model.parameters():
                if p.grad is None:
                    p.grad = torch.zeros_like(p)
            if config.clip_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(list(model.parameters()), config.clip_grad_norm)
            opt.step(lr)
            if not all(torch.isfinite(p).all() for p in model.parameters()):
                _diverge(emit, "non-finite parameters after update", epoch, step, [records[i].id for i in idx])
            k = len(idx)
            for key in sums:
                sums[key] += float(getattr(lb, key).detach()) * k
            n_seen += k

        probe_gen = torch.Generator().manual_seed(_seed_for(config.seed, epoch, 3))
        rec = {
            "epoch": epoch,
            "lr": lr,
            "lambda": lam,
            "alpha": alpha if model.stochastic else None,
            **{k: v / n_seen for k, v in sums.items()},
            "probe_rating_var": probe_variance(model, probe_views, config.probe_samples, probe_gen),
        }
        emit(rec)
        log.info("epoch %d: %s", epoch, rec)
        if out_dir is not None and checkpoint_every and epoch % checkpoint_every == 0 and epoch < last:
            ck = snapshot(model, opt, config, epoch, manifest.mos_min, manifest.mos_max)
            save_checkpoint(ck, out_dir / f"checkpoint_e{epoch:04d}.ckpt")

    ck = snapshot(model, opt, config, last, manifest.mos_min, manifest.mos_max)
    if out_dir is not None:
        save_checkpoint(ck, out_dir / "checkpoint.ckpt")
    return ck, log_records


def _diverge(emit, what, epoch, step, ids):
    emit({"event": "divergence", "reason": what, "epoch": epoch, "step": step, "sample_ids": ids})
    raise DivergenceError(f"{what} at epoch {epoch}, step {step} (samples {ids})", epoch, step, ids)
