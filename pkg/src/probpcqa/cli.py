"""Command-line frontend: gen-data, render, train, score, eval, ablate.

Exit codes: 0 success, 1 usage (bad flags or config text), 2 data error
(unreadable or inconsistent inputs), 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .evalkit import (
    DEFAULT_SAMPLES,
    histogram_csv,
    predict,
    predictions_csv,
    read_predictions_csv,
    report,
    report_json,
)
from .pcio import PLYError, load_ply, normalize_unit_cube
from .render import dump_projections, render_views
from .subjective_sim import PRESETS as DATA_PRESETS
from .subjective_sim import build_dataset, read_manifest
from .trainer import (
    ConfigError,
    DivergenceError,
    load_checkpoint,
    parse_config_text,
    preset,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("probpcqa")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def write_header(out_dir: Path, command: str, args: argparse.Namespace, **extra) -> None:
    """Reproducibility header: everything needed to rerun the command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    header = {
        "tool": "probpcqa",
        "version": __version__,
        "command": command,
        "flags": flags,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        **extra,
    }
    (out_dir / "run.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def _read_manifest(path):
    try:
        return read_manifest(path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e


def _train_config(args):
    if args.config is not None:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise DataError(f"cannot read config {args.config}: {e}") from e
        base = preset(args.preset) if args.preset else None
        cfg = parse_config_text(text, base)
    else:
        cfg = preset(args.preset or "desk")
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.no_stochastic:
        over["no_stochastic"] = True
    if args.no_annealing:
        over["no_annealing"] = True
    if args.alpha is not None:
        over["alpha_override"] = args.alpha
    if args.no_depth:
        over["no_depth"] = True
    if args.fixed_viewpoint:
        over["fixed_viewpoint"] = True
    return cfg.replace(**over) if over else cfg


def _stimulus_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0] >> 1)


def score_records(ck, manifest, records, t, mode, seed):
    model = ck.build_model().eval()
    cfg = ck.config
    index = {r.id: i for i, r in enumerate(manifest.records)}
    preds = []
    for r in records:
        try:
            pc = manifest.load_cloud(r)
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read sample {r.id}: {e}") from e
        preds.append(
            predict(
                model,
                pc,
                t,
                mode,
                _stimulus_seed(seed, index[r.id]),
                n_v=cfg.n_v,
                h=cfg.h,
                w=cfg.w,
                mos_range=(ck.mos_min, ck.mos_max),
                stimulus_id=r.id,
                fixed_viewpoint=cfg.fixed_viewpoint,
                no_depth=cfg.no_depth,
                splat_radius=cfg.splat_radius,
            )
        )
    return preds


def evaluate(preds_by_id: dict, manifest, split: str):
    records = manifest.records if split == "all" else manifest.split(split)
    mos = {r.id: r.mos for r in records}
    missing = sorted(set(mos) - set(preds_by_id))
    extra = sorted(set(preds_by_id) - set(mos))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing predictions for {', '.join(missing)}")
        if extra:
            parts.append(f"unknown ids {', '.join(extra)}")
        raise DataError("id mismatch: " + "; ".join(parts))
    ids = [r.id for r in records]
    try:
        return report([preds_by_id[i] for i in ids], [mos[i] for i in ids])
    except ValueError as e:
        raise DataError(str(e)) from e


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = DATA_PRESETS[args.preset]
    over = {
        k: v
        for k, v in {
            "seed": args.seed,
            "n_points": args.n_points,
            "n_subjects": args.n_subjects,
            "subject_bias_std": args.bias_std,
            "noise_std": args.noise_std,
            "test_fraction": args.test_fraction,
        }.items()
        if v is not None
    }
    try:
        cfg = dataclasses.replace(cfg, **over)
        out = Path(args.out)
        write_header(out, "gen-data", args, gen_config=cfg.to_dict(), config_hash=cfg.hash())
        m = build_dataset(cfg, out)
    except (ValueError, OSError) as e:
        raise DataError(str(e)) from e
    n_train, n_test = len(m.split("train")), len(m.split("test"))
    print(f"wrote {len(m.records)} stimuli ({n_train} train / {n_test} test) to {out}")
    return EXIT_OK


def cmd_render(args):
    try:
        pc = load_ply(args.ply)
    except (OSError, PLYError) as e:
        raise DataError(str(e)) from e
    out = Path(args.out)
    write_header(out, "render", args)
    ps = render_views(
        normalize_unit_cube(pc),
        args.views,
        args.size,
        args.size,
        np.random.default_rng(args.seed),
        fixed=args.fixed_viewpoint,
        splat_radius=args.splat,
        no_depth=args.no_depth,
    )
    files = dump_projections(ps, out)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _train_config(args)
    manifest = _read_manifest(args.manifest)
    out = Path(args.out)
    write_header(
        out,
        "train",
        args,
        train_config=cfg.to_dict(),
        manifest_hash=manifest.config_hash,
        eval_mode="early" if args.early_average else "late",
    )
    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except (OSError, ValueError) as e:
            raise DataError(f"cannot load checkpoint {args.resume}: {e}") from e
    try:
        ck, logs = train(manifest, cfg, out_dir=out, resume=resume, checkpoint_every=args.checkpoint_every)
    except ValueError as e:
        raise DataError(str(e)) from e
    last = logs[-1] if logs else {}
    print(f"trained {ck.epoch} epochs; final loss {last.get('total', float('nan')):.6f}; checkpoint in {out}")
    return EXIT_OK


def cmd_score(args):
    try:
        ck = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    mode = "early" if args.early_average else args.mode
    out = Path(args.out)
    if args.ply:
        try:
            pc = load_ply(args.ply)
        except (OSError, PLYError) as e:
            raise DataError(str(e)) from e
        cfg = ck.config
        try:
            model = ck.build_model().eval()
        except ValueError as e:
            raise DataError(str(e)) from e
        preds = [
            predict(
                model, pc, args.samples, mode, _stimulus_seed(args.seed, 0),
                n_v=cfg.n_v, h=cfg.h, w=cfg.w, mos_range=(ck.mos_min, ck.mos_max),
                stimulus_id=Path(args.ply).stem, fixed_viewpoint=cfg.fixed_viewpoint,
                no_depth=cfg.no_depth, splat_radius=cfg.splat_radius,
            )
        ]
        mos_by_id = None
    else:
        manifest = _read_manifest(args.manifest)
        records = manifest.records if args.split == "all" else manifest.split(args.split)
        try:
            preds = score_records(ck, manifest, records, args.samples, mode, args.seed)
        except ValueError as e:
            raise DataError(str(e)) from e
        mos_by_id = {r.id: r.mos for r in records}
    write_header(out, "score", args, mode=mode, checkpoint_config=ck.config.to_dict())
    (out / "predictions.csv").write_text(predictions_csv(preds, mos_by_id, args.dump_ratings))
    if args.dump_ratings:
        hist = out / "histograms"
        hist.mkdir(exist_ok=True)
        for p in preds:
            (hist / f"{p.id}.csv").write_text(histogram_csv(p.ratings, args.bins, (ck.mos_min, ck.mos_max)))
    print(f"scored {len(preds)} stimuli ({mode}, T={args.samples}) into {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_eval(args):
    manifest = _read_manifest(args.manifest)
    try:
        preds = read_predictions_csv(Path(args.predictions).read_text())
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read predictions {args.predictions}: {e}") from e
    rep = evaluate(preds, manifest, args.split)
    text = report_json(rep)
    if args.out:
        out = Path(args.out)
        write_header(out, "eval", args)
        (out / "report.json").write_text(text)
    print(f"SRCC {rep.srcc:.4f}  PLCC {rep.plcc:.4f}  KRCC {rep.krcc:.4f}  RMSE {rep.rmse:.4f}")
    return EXIT_OK


ABLATION_CELLS = {
    "full": {},
    "no_stochastic": {"no_stochastic": True},
    "no_annealing": {"no_annealing": True},
    "alpha_0.2": {"alpha_override": 0.2},
    "alpha_0.6": {"alpha_override": 0.6},
    "no_depth": {"no_depth": True},
    "fixed_viewpoint": {"fixed_viewpoint": True},
}
ABLATION_FIELDS = [
    "cell", "mode", "status", "alpha", "srcc", "plcc", "krcc", "rmse",
    "mean_rating_std", "frac_std_positive", "diverged_epoch", "diverged_step", "detail",
]


def run_ablation(manifest, base_cfg, out: Path, cells, t: int, seed: int):
    """Train and evaluate every cell; returns (rows, checks, train_seconds)."""
    rows, checks, seconds = [], {}, {}
    test = manifest.split("test")
    mos = [r.mos for r in test]
    for name in cells:
        cfg = base_cfg.replace(**ABLATION_CELLS[name])
        cell_dir = out / "cells" / name
        base = {"cell": name, "alpha": cfg.effective_alpha if not cfg.no_stochastic else ""}
        t0 = time.perf_counter()
        try:
            ck, _ = train(manifest, cfg, out_dir=cell_dir)
        except DivergenceError as e:
            seconds[name] = time.perf_counter() - t0
            rows.append({**base, "mode": "late", "status": "diverged", "diverged_epoch": e.epoch,
                         "diverged_step": e.step, "detail": str(e)})
            log.warning("cell %s diverged: %s", name, e)
            continue
        seconds[name] = time.perf_counter() - t0
        modes = ["late", "early"] if name == "full" else ["late"]
        for mode in modes:
            preds = score_records(ck, manifest, test, t, mode, seed)
            (cell_dir / f"predictions_{mode}.csv").write_text(
                predictions_csv(preds, {r.id: r.mos for r in test}, dump_ratings=True)
            )
            row = {**base, "mode": mode, "status": "ok"}
            try:
                rep = report([p.final for p in preds], mos)
                row.update(srcc=rep.srcc, plcc=rep.plcc, krcc=rep.krcc, rmse=rep.rmse)
            except ValueError as e:
                row.update(status="degenerate", detail=str(e))
            stds = [p.std for p in preds]
            row.update(mean_rating_std=float(np.mean(stds)), frac_std_positive=float(np.mean([s > 0 for s in stds])))
            rows.append(row)
            if mode == "late":
                checks.setdefault("late_final_is_mean", True)
                checks["late_final_is_mean"] &= all(p.final == float(np.mean(p.ratings)) for p in preds)
        if not cfg.no_stochastic:
            one_late = score_records(ck, manifest, test, 1, "late", seed)
            one_early = score_records(ck, manifest, test, 1, "early", seed)
            ok = all(a.final == b.final for a, b in zip(one_late, one_early))
            checks.setdefault("t1_late_equals_early", True)
            checks["t1_late_equals_early"] &= ok
    return rows, checks, seconds


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, ABLATION_FIELDS, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_ablate(args):
    cfg = _train_config(args)
    manifest = _read_manifest(args.manifest)
    cells = args.cells.split(",") if args.cells else list(ABLATION_CELLS)
    unknown = [c for c in cells if c not in ABLATION_CELLS]
    if unknown:
        raise UsageError(f"unknown cells {unknown}; choose from {list(ABLATION_CELLS)}")
    out = Path(args.out)
    write_header(out, "ablate", args, train_config=cfg.to_dict(), cells=cells)
    try:
        rows, checks, seconds = run_ablation(manifest, cfg, out, cells, args.samples, args.eval_seed)
    except ValueError as e:
        raise DataError(str(e)) from e
    (out / "ablation.csv").write_text(ablation_csv(rows))
    (out / "checks.json").write_text(json.dumps(checks, indent=2, sort_keys=True) + "\n")
    # wall-clock only; the one output that is not reproducible byte for byte
    (out / "timings.json").write_text(json.dumps(seconds, indent=2, sort_keys=True) + "\n")
    for r in rows:
        if r["status"] == "ok":
            print(f"{r['cell']:>16} {r['mode']:>5}  SRCC {r['srcc']:.4f}  PLCC {r['plcc']:.4f}")
        else:
            print(f"{r['cell']:>16} {r['mode']:>5}  {r['status']}")
    print("checks: " + ", ".join(f"{k}={'pass' if v else 'FAIL'}" for k, v in sorted(checks.items())))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, help="key = value text file")
    p.add_argument("--preset", choices=["desk", "paper", "tiny"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-stochastic", action="store_true")
    p.add_argument("--no-annealing", action="store_true")
    p.add_argument("--alpha", type=float)
    p.add_argument("--no-depth", action="store_true")
    p.add_argument("--fixed-viewpoint", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="probpcqa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="synthesize distorted clouds and simulated MOS")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--preset", choices=sorted(DATA_PRESETS), default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-points", type=int)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--bias-std", type=float)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--test-fraction", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("render", help="render RGB-D projections of one cloud")
    p.add_argument("--ply", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splat", type=int)
    p.add_argument("--fixed-viewpoint", action="store_true")
    p.add_argument("--no-depth", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--early-average", action="store_true", help="record early averaging as the eval mode")
    p.add_argument("--resume", type=Path)
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="predict quality with T prior samples")
    p.add_argument("--checkpoint", required=True, type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ply", type=Path)
    src.add_argument("--manifest", type=Path)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--mode", choices=["late", "early"], default="late")
    p.add_argument("--early-average", action="store_true", help="same as --mode early")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-ratings", action="store_true")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="metrics of a predictions file against a manifest")
    p.add_argument("--predictions", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    _add_train_flags(p)
    p.add_argument("--cells", help=f"comma-separated subset of {','.join(ABLATION_CELLS)}")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--eval-seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "samples", 1) < 1:
        parser.error("--samples must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"probpcqa: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"probpcqa: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"probpcqa: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
