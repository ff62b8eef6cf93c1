"""Stochastic inference, correlation metrics and logistic range alignment."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import optimize, stats

from .latent import encode_prior, expand_spatial, reparameterize
from .model import ProbQualityModel
from .pcio import PointCloud, normalize_unit_cube
from .render import render_views

DEFAULT_SAMPLES = 37


@dataclass
class QualityPrediction:
    id: str
    final: float
    ratings: list
    mode: str

    @property
    def std(self) -> float:
        return float(np.std(self.ratings))


@dataclass
class MetricReport:
    srcc: float
    plcc: float
    krcc: float
    rmse: float
    beta: list = field(default_factory=list)
    converged: bool = True

    def as_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# inference


def predict_views(
    model: ProbQualityModel,
    views: torch.Tensor,
    t: int = DEFAULT_SAMPLES,
    mode: str = "late",
    gen: torch.Generator | None = None,
):
    """Normalized-scale ratings for one stimulus; ``views`` is (N_v, 4, H, W).

    Returns ``(final, ratings)``. Both modes draw the same ``t`` noise
    vectors, so they coincide exactly when ``t == 1``.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if mode not in ("late", "early"):
        raise ValueError(f"mode must be 'late' or 'early', got {mode!r}")
    views = views.unsqueeze(0)
    h, w = views.shape[-2:]
    with torch.no_grad():
        if not model.stochastic:
            r = float(model.qrg(views, model.zero_feature(views))[0])
            return r, [r] * (t if mode == "late" else 1)
        stat = encode_prior(views, model.prior)
        eps = torch.randn((t, stat.k1), generator=gen, dtype=views.dtype)
        if mode == "late":
            z = reparameterize(stat, epsilon=eps).z  # (t, K1)
            reps = views.expand(t, *views.shape[1:])
            ratings = model.qrg(reps, expand_spatial(z, h, w)).double().tolist()
            return float(np.mean(ratings)), ratings
        z = reparameterize(stat, epsilon=eps).z.mean(dim=0, keepdim=True)
        r = float(model.qrg(views, expand_spatial(z, h, w))[0])
        return r, [r]


def predict(
    model: ProbQualityModel,
    pc: PointCloud,
    t: int = DEFAULT_SAMPLES,
    mode: str = "late",
    seed: int = 0,
    *,
    n_v: int,
    h: int,
    w: int,
    mos_range=(0.0, 1.0),
    stimulus_id: str = "",
    fixed_viewpoint: bool = False,
    no_depth: bool = False,
    splat_radius: int | None = None,
) -> QualityPrediction:
    """Render ``n_v`` random views once, then rate with ``t`` prior samples.

    Ratings and the final score are de-normalized to ``mos_range``.
    """
    rng = np.random.default_rng([seed, 0])
    ps = render_views(
        normalize_unit_cube(pc), n_v, h, w, rng, fixed_viewpoint, splat_radius, no_depth
    )
    gen = torch.Generator().manual_seed(seed)
    final, ratings = predict_views(model, torch.from_numpy(ps.stack()), t, mode, gen)
    lo, hi = mos_range
    scale = hi - lo
    return QualityPrediction(
        stimulus_id, lo + final * scale, [lo + r * scale for r in ratings], mode
    )


# --------------------------------------------------------------------------
# metrics


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise ValueError("need at least two observations")
    return x, y


def pearson(x, y) -> float:
    x, y = _check_pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        raise ValueError("zero variance")
    return float(np.clip(float(dx @ dy) / den, -1.0, 1.0))


plcc = pearson


def srcc(x, y) -> float:
    x, y = _check_pair(x, y)
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    try:
        return pearson(rx, ry)
    except ValueError:
        raise ValueError("zero rank variance") from None


def krcc(x, y) -> float:
    """Kendall tau-b."""
    x, y = _check_pair(x, y)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("zero rank variance")
    return float(stats.kendalltau(x, y, variant="b").statistic)


def rmse(x, y) -> float:
    x, y = _check_pair(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def logistic4(s, b1, b2, b3, b4):
    return (b1 - b2) / (1 + np.exp(-(s - b3) / b4)) + b2


@dataclass
class LogisticFit:
    beta: list
    mapped: np.ndarray
    converged: bool
    cost: float


def logistic_fit(pred, mos, max_nfev: int = 20000) -> LogisticFit:
    """Least-squares four-parameter logistic (Levenberg-Marquardt).

    Starts from beta = (max mos, min mos, median pred, std pred).
    """
    pred, mos = _check_pair(pred, mos)
    if len(pred) < 5:
        raise ValueError("logistic fit needs at least 5 points")
    if np.all(mos == mos[0]):
        raise ValueError("mos is constant")
    b4 = float(np.std(pred)) or 1.0
    beta0 = np.array([mos.max(), mos.min(), float(np.median(pred)), b4])

    def resid(b):
        with np.errstate(over="ignore"):
            return logistic4(pred, *b) - mos

    res = optimize.least_squares(
        resid, beta0, method="lm", max_nfev=max_nfev, xtol=1e-15, ftol=1e-15, gtol=1e-15
    )
    beta = res.x
    mapped = logistic4(pred, *beta)
    ok = bool(res.status > 0 and np.all(np.isfinite(mapped)))
    if not np.all(np.isfinite(mapped)):
        beta, mapped = beta0, logistic4(pred, *beta0)
    return LogisticFit([float(b) for b in beta], mapped, ok, float(np.sum((mapped - mos) ** 2)))


def report(pred, mos) -> MetricReport:
    pred, mos = _check_pair(pred, mos)
    if len(pred) < 5:
        raise ValueError("report needs at least 5 points")
    fit = logistic_fit(pred, mos)
    return MetricReport(
        srcc=srcc(pred, mos),
        plcc=pearson(fit.mapped, mos),
        krcc=krcc(pred, mos),
        rmse=rmse(fit.mapped, mos),
        beta=fit.beta,
        converged=fit.converged,
    )


# --------------------------------------------------------------------------
# tables


# the averaging mode is recorded by the caller, so T = 1 tables coincide
PRED_FIELDS = ["id", "mos", "final", "rating_mean", "rating_std", "n_ratings"]


def predictions_csv(preds, mos_by_id=None, dump_ratings=False) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(PRED_FIELDS + (["ratings"] if dump_ratings else []))
    for p in preds:
        mos = "" if mos_by_id is None or p.id not in mos_by_id else repr(float(mos_by_id[p.id]))
        row = [
            p.id,
            mos,
            repr(float(p.final)),
            repr(float(np.mean(p.ratings))),
            repr(float(np.std(p.ratings))),
            len(p.ratings),
        ]
        if dump_ratings:
            row.append(" ".join(repr(float(r)) for r in p.ratings))
        wr.writerow(row)
    return buf.getvalue()


def read_predictions_csv(text: str) -> dict:
    """id -> final score."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and ("id" not in rows[0] or "final" not in rows[0]):
        raise ValueError("predictions file needs 'id' and 'final' columns")
    out = {}
    for k, row in enumerate(rows, start=2):
        if row["id"] in out:
            raise ValueError(f"line {k}: duplicate id {row['id']!r}")
        out[row["id"]] = float(row["final"])
    return out


def histogram_csv(values, bins: int = 20, range_=(0.0, 1.0)) -> str:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=range_)
    lines = ["bin_lo,bin_hi,count"]
    lines += [f"{edges[i]!r},{edges[i + 1]!r},{int(c)}" for i, c in enumerate(counts)]
    return "\n".join(lines) + "\n"


def report_json(rep: MetricReport) -> str:
    return json.dumps(rep.as_dict(), indent=2, sort_keys=True) + "\n"
