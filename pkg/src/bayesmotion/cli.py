"""Command-line entry point: ``bayesmotion <command> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import data as md
from .checkpoint import CheckpointError, load_checkpoint, model_hash, save_checkpoint
from .evaluation import DEFAULT_MILESTONES_MS, STANDARD_METHODS, evaluate, report_render
from .io import atomic_write_text, parse_key_values
from .model import mc_sample
from .synthetic import FAMILIES, synth_generate
from .training import TrainConfig, TrainingDiverged, format_curve_csv, train
from .trajectory import (
    PlanConfig, Trajectory, UncertaintyField, optimize, parse_scene, plan_csv,
)
from .uncertainty import (
    ACCEPT, DEFAULT_E_MAX, DEFAULT_LAMBDA, DEFAULT_QUANTILE, CalibrationError, DetectorCalibration,
    calibrate_threshold, detect_unseen, epistemic_variance, select_and_truncate,
)

log = logging.getLogger("bayesmotion")


class CommandError(Exception):
    """A user-facing failure reported as one line on stderr."""


class Outputs:
    """Tracks files written by a command so a failed run leaves nothing behind."""

    def __init__(self, out_dir: Path):
        self.dir = Path(out_dir)
        self.written: list[Path] = []

    def write(self, name: str, text: str) -> Path:
        path = self.dir / name
        atomic_write_text(path, text)
        self.written.append(path)
        return path

    def write_checkpoint(self, name: str, params, extra=None) -> Path:
        path = self.dir / name
        save_checkpoint(params, path, extra)
        self.written.append(path)
        return path

    def discard(self):
        for p in self.written:
            p.unlink(missing_ok=True)


def _seed_seq(seed: int, n: int) -> int:
    return seed * 10_000 + n


def _read_config(path) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return parse_key_values(Path(path).read_text())
    except OSError as exc:
        raise CommandError(f"cannot read config {path}: {exc.strerror}") from None


def _load_model(path):
    if path is None:
        raise CommandError("--checkpoint is required")
    try:
        params, extra = load_checkpoint(path)
    except FileNotFoundError:
        raise CommandError(f"checkpoint {path} does not exist") from None
    return params, extra


def _load_calibration(path, params):
    if path is None:
        raise CommandError("--calibration is required")
    try:
        calib = DetectorCalibration.from_text(Path(path).read_text())
    except OSError as exc:
        raise CommandError(f"cannot read calibration {path}: {exc.strerror}") from None
    calib.check_model(model_hash(params))
    return calib


def _load_sequences(directory) -> list[md.MotionSequence]:
    if directory is None:
        raise CommandError("--data is required")
    if not Path(directory).is_dir():
        raise CommandError(f"data directory {directory} does not exist")
    seqs = md.load_motion_dir(directory)
    if not seqs:
        raise CommandError(f"no .motion files in {directory}")
    return seqs


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, out: Outputs) -> dict:
    if args.family not in FAMILIES:
        raise CommandError(f"unknown family {args.family!r}; expected one of {', '.join(FAMILIES)}")
    if args.n_sequences < 1 or args.n_frames < 1:
        raise CommandError("n_sequences and n_frames must be positive")
    for i in range(args.n_sequences):
        seq = synth_generate(args.family, _seed_seq(args.seed, i), args.n_frames, args.rate)
        out.write(f"{args.family}_{args.seed}_{i:04d}.motion", md.format_motion(seq))
    return {"seeds": {"seed": args.seed, "sequence_seeds": [_seed_seq(args.seed, i) for i in range(args.n_sequences)]}}


def _split(seqs, val_fraction, seed):
    if len(seqs) < 2 or val_fraction <= 0:
        return seqs, []
    order = np.random.default_rng(seed).permutation(len(seqs))
    n_val = max(1, int(round(val_fraction * len(seqs))))
    val = {int(i) for i in order[:n_val]}
    return [s for i, s in enumerate(seqs) if i not in val], [s for i, s in enumerate(seqs) if i in val]


def cmd_train(args, out: Outputs) -> dict:
    values = _read_config(args.config)
    if args.seed is not None:
        values["rng_seed"] = str(args.seed)
    config = TrainConfig.from_mapping(values)
    seqs = _load_sequences(args.data)
    if args.val_data:
        train_seqs, val_seqs = seqs, _load_sequences(args.val_data)
    else:
        train_seqs, val_seqs = _split(seqs, args.val_fraction, config.rng_seed)
    train_w = md.window_many(train_seqs, config.t_p, config.t_f, config.stride)
    val_w = md.window_many(val_seqs, config.t_p, config.t_f, config.stride)
    if not train_w:
        raise CommandError(f"training sequences are shorter than t_p + t_f = {config.t_p + config.t_f} frames")
    stats = md.fit_normalization(train_seqs)
    result = train(config, train_w, val_w, stats)
    label = train_seqs[0].label
    out.write_checkpoint("checkpoint.npz", result.params, {"train_set": label, "best_epoch": result.best_epoch})
    out.write("loss_curve.csv", format_curve_csv(result.curve))
    return {
        "config": config.to_dict(),
        "seeds": {"rng_seed": config.rng_seed},
        "checkpoint_hash": model_hash(result.params),
        "windows": {"train": len(train_w), "val": len(val_w)},
    }


def cmd_calibrate(args, out: Outputs) -> dict:
    params, _ = _load_model(args.checkpoint)
    seqs = _load_sequences(args.data)
    windows = [w.observed for w in md.window_many(seqs, params.t_p, params.t_f, args.stride)]
    h = model_hash(params)
    calib = calibrate_threshold(params, windows, args.n_samples, args.quantile, args.seed, h)
    out.write("calibration.txt", calib.to_text())
    return {"seeds": {"seed": args.seed}, "checkpoint_hash": h, "threshold": calib.threshold, "M": calib.calibration_size}


def cmd_predict(args, out: Outputs) -> dict:
    params, _ = _load_model(args.checkpoint)
    calib = _load_calibration(args.calibration, params)
    seq = md.load_motion_file(args.input)
    if args.start < 0 or args.start + params.t_p > len(seq):
        raise CommandError(f"input needs {params.t_p} frames from frame {args.start}, has {len(seq)}")
    observed = seq.slice(args.start, args.start + params.t_p)
    t_f = params.t_f
    dt = 1000.0 / seq.frame_rate_hz
    ens = mc_sample(params, observed, args.n_samples, t_f, args.seed)
    report = epistemic_variance(ens)
    verdict = detect_unseen(report, calib)

    rows = ["sample,seed,frame,t_ms,joint,x,y,z,sigma"]
    sig_rows = ["sample,frame,t_ms,max_sigma,mean_sigma"]
    for i, m in enumerate(ens.members):
        for t in range(t_f):
            for j in range(params.n_joints):
                x, y, z = m.mean_frames[t, j]
                rows.append(f"{i},{m.mask_seed},{t + 1},{(t + 1) * dt:g},{j},{x:.9g},{y:.9g},{z:.9g},{m.sigma[t, j]:.9g}")
            sig_rows.append(f"{i},{t + 1},{(t + 1) * dt:g},{m.sigma[t].max():.9g},{m.sigma[t].mean():.9g}")
    out.write("samples.csv", "\n".join(rows) + "\n")
    out.write("sigma.csv", "\n".join(sig_rows) + "\n")
    eu = report.elementwise_variance
    out.write("eu.csv", "frame,t_ms,eu_mean,eu_max\n" + "".join(
        f"{t + 1},{(t + 1) * dt:g},{eu[t].mean():.9g},{eu[t].max():.9g}\n" for t in range(t_f)
    ))

    summary = {
        "status": "accepted" if verdict == ACCEPT else "rejected",
        "verdict": verdict,
        "scalar_eu": repr(report.scalar_eu),
        "threshold": repr(calib.threshold),
        "n_samples": str(args.n_samples),
        "selected": "-",
        "trustworthy_length": "-",
        "trustworthy_ms": "-",
    }
    if verdict == ACCEPT:
        sel = select_and_truncate(ens, args.lam, args.e_max)
        member = ens.members[sel.optimal_index]
        summary.update(
            selected=str(sel.optimal_index),
            trustworthy_length=str(sel.trustworthy_length),
            trustworthy_ms=f"{sel.trustworthy_length * dt:g}",
        )
        lines = ["frame,t_ms,joint,x,y,z,sigma,trusted"]
        for t in range(t_f):
            for j in range(params.n_joints):
                x, y, z = member.mean_frames[t, j]
                lines.append(f"{t + 1},{(t + 1) * dt:g},{j},{x:.9g},{y:.9g},{z:.9g},{member.sigma[t, j]:.9g},{int(t < sel.trustworthy_length)}")
        out.write("selected.csv", "\n".join(lines) + "\n")
    out.write("summary.txt", "".join(f"{k}={v}\n" for k, v in summary.items()))
    return {"seeds": {"seed": args.seed}, "checkpoint_hash": model_hash(params), "status": summary["status"]}


def cmd_evaluate(args, out: Outputs) -> dict:
    params, extra = _load_model(args.checkpoint)
    methods = [m for m in args.methods.split(",") if m]
    unknown = [m for m in methods if m not in STANDARD_METHODS]
    if unknown:
        raise CommandError(f"unknown methods {unknown}; choose from {sorted(STANDARD_METHODS)}")
    calib = None
    if any(STANDARD_METHODS[m].gate for m in methods):
        calib = _load_calibration(args.calibration, params)
    seqs = _load_sequences(args.data)
    windows = md.window_many(seqs, params.t_p, params.t_f, args.stride)
    if not windows:
        raise CommandError("no test windows: sequences are too short for the model's t_p + t_f")
    milestones = [int(m) for m in args.milestones.split(",")]
    train_label = args.train_set or extra.get("train_set", "-")
    test_label = args.test_set or seqs[0].label or "-"
    report = evaluate(
        methods, windows, params, calib, milestones, args.n_samples, args.seed,
        train_label, test_label, args.lam, args.e_max, args.truncate, not args.member_errors,
    )
    for row in report.rows:
        if row.method == "zerovel":
            row.train_set = "-"
    table, csv_text = report_render(report)
    out.write("report.csv", csv_text)
    out.write("report.txt", table)
    print(table, end="")
    return {"seeds": {"seed": args.seed}, "checkpoint_hash": model_hash(params), "windows": len(windows)}


def _read_selected(pred_dir: Path):
    try:
        summary = parse_key_values((pred_dir / "summary.txt").read_text())
        if summary.get("status") == "rejected":
            raise CommandError(f"prediction in {pred_dir} was rejected as unseen motion; there is no selected sample to plan around")
        rows = list(csv.DictReader(io.StringIO((pred_dir / "selected.csv").read_text())))
    except OSError as exc:
        raise CommandError(f"cannot read prediction in {pred_dir}: {exc.strerror}") from None
    frames = max(int(r["frame"]) for r in rows)
    joints = max(int(r["joint"]) for r in rows) + 1
    means = np.zeros((frames, joints, 3))
    sigma = np.zeros((frames, joints))
    for r in rows:
        t, j = int(r["frame"]) - 1, int(r["joint"])
        means[t, j] = [float(r["x"]), float(r["y"]), float(r["z"])]
        sigma[t, j] = float(r["sigma"])
    return means, sigma, int(summary["trustworthy_length"])


def cmd_plan(args, out: Outputs) -> dict:
    try:
        scene = parse_scene(Path(args.scene).read_text())
    except OSError as exc:
        raise CommandError(f"cannot read scene {args.scene}: {exc.strerror}") from None
    except ValueError as exc:
        raise CommandError(f"malformed scene file {args.scene}: {exc}") from None
    overrides = _read_config(args.config)
    if overrides:
        merged = {k: str(v) for k, v in vars(scene.config).items()} | overrides
        scene.config = PlanConfig.from_mapping(merged)
    if args.max_iterations is not None:
        scene.config.max_iterations = args.max_iterations
    cfg = scene.config
    if args.prediction:
        means, sigma, trust = _read_selected(Path(args.prediction))
        field = UncertaintyField.from_prediction(means, sigma, trust, cfg.safety_radius, cfg.growth)
    elif scene.obstacles:
        field = UncertaintyField.static([c for c, _ in scene.obstacles], [s for _, s in scene.obstacles], cfg.safety_radius)
    else:
        field = UncertaintyField.empty(1, cfg.safety_radius)
    start = Trajectory.straight_line(scene.start, scene.goal, scene.n_waypoints)
    result = optimize(start, field, cfg)
    out.write("plan.csv", plan_csv(result.trajectory, field, cfg))
    out.write("cost_log.csv", "iteration,cost\n" + "".join(f"{i},{c!r}\n" for i, c in enumerate(result.costs)))
    return {"config": vars(cfg), "iterations": result.iterations, "final_cost": result.costs[-1]}


_TIME_COLUMNS = ("t_ms", "frame", "step", "epoch", "iteration")
_ID_COLUMNS = ("sample", "seed", "joint", "method", "train_set", "test_set", "series")
_WIDE = re.compile(r"^(.*)_(\d+)$")


def _is_number(v: str) -> bool:
    try:
        return math.isfinite(float(v))
    except ValueError:
        return False


def export_plot_rows(text: str, frame_ms: float) -> list[tuple[str, float, float]]:
    reader = csv.DictReader(io.StringIO(text))
    cols = reader.fieldnames or []
    rows = list(reader)
    out = []
    time_col = next((c for c in _TIME_COLUMNS if c in cols), None)
    if time_col is None:
        wide = [c for c in cols if _WIDE.match(c)]
        if not wide:
            raise CommandError("CSV has no time column and no <name>_<ms> columns")
        ids = [c for c in cols if c in _ID_COLUMNS]
        for r in rows:
            prefix = "/".join(r[c] for c in ids)
            for c in wide:
                name, ms = _WIDE.match(c).groups()
                if _is_number(r[c]):
                    out.append((f"{prefix}:{name}" if prefix else name, float(ms), float(r[c])))
        return out
    ids = [c for c in cols if c in _ID_COLUMNS]
    values = [c for c in cols if c not in ids and c not in _TIME_COLUMNS]
    for r in rows:
        t = float(r[time_col])
        t_ms = t * frame_ms if time_col in ("frame", "step") else t
        prefix = "/".join(f"{c}={r[c]}" for c in ids)
        for c in values:
            if _is_number(r[c]):
                out.append((f"{prefix}:{c}" if prefix else c, t_ms, float(r[c])))
    return out


def cmd_export_plot(args, out: Outputs) -> dict:
    try:
        text = Path(args.input).read_text()
    except OSError as exc:
        raise CommandError(f"cannot read {args.input}: {exc.strerror}") from None
    rows = export_plot_rows(text, 1000.0 / args.rate)
    name = Path(args.input).stem + "_plot.csv"
    out.write(name, "series,t_ms,value\n" + "".join(f"{s},{t:g},{v!r}\n" for s, t, v in rows))
    return {"rows": len(rows)}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayesmotion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic motion files")
    g.add_argument("family")
    g.add_argument("seed", type=int)
    g.add_argument("n_sequences", type=int)
    g.add_argument("n_frames", type=int)
    g.add_argument("--rate", type=float, default=md.DEFAULT_RATE_HZ)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the predictor")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--val-fraction", type=float, default=0.2)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="fit the unseen-motion threshold")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--n-samples", type=int, default=30)
    c.add_argument("--quantile", type=float, default=DEFAULT_QUANTILE)
    c.add_argument("--stride", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    pr = sub.add_parser("predict", help="sample futures for one observed window")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--calibration", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--start", type=int, default=0)
    pr.add_argument("--n-samples", type=int, default=30)
    pr.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    pr.add_argument("--e-max", type=float, default=DEFAULT_E_MAX)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="MPJPE / detection-rate table")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--calibration")
    e.add_argument("--data", required=True)
    e.add_argument("--methods", default="zerovel,fmp,fmp_umd,fmp_umd_oms")
    e.add_argument("--milestones", default=",".join(str(m) for m in DEFAULT_MILESTONES_MS))
    e.add_argument("--train-set")
    e.add_argument("--test-set")
    e.add_argument("--stride", type=int, default=10)
    e.add_argument("--n-samples", type=int, default=30)
    e.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    e.add_argument("--e-max", type=float, default=DEFAULT_E_MAX)
    e.add_argument("--truncate", action="store_true", help="score the selected member only inside its trustworthy length")
    e.add_argument("--member-errors", action="store_true", help="average member errors instead of the ensemble-mean error")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("plan", help="optimize a robot path around the predicted human")
    pl.add_argument("--scene", required=True)
    pl.add_argument("--prediction", help="predict output directory providing the field")
    pl.add_argument("--config")
    pl.add_argument("--max-iterations", type=int)
    pl.add_argument("--seed", type=int, default=0, help="recorded only; planning is deterministic")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plan)

    x = sub.add_parser("export-plot", help="convert an output CSV to long format (series, t_ms, value)")
    x.add_argument("--input", required=True)
    x.add_argument("--rate", type=float, default=md.DEFAULT_RATE_HZ)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_plot)
    return p


_EXPECTED_ERRORS = (
    CommandError, CheckpointError, CalibrationError, md.MotionFormatError, TrainingDiverged, ValueError, OSError,
)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Outputs(Path(args.out))
    started = time.perf_counter()
    try:
        info = args.func(args, out)
        manifest = {
            "command": args.command,
            "argv": argv,
            "inputs": {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")},
            "outputs": sorted(p.name for p in out.written),
            "wall_clock_s": round(time.perf_counter() - started, 3),
            **info,
        }
        out.write(f"{args.command}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    except _EXPECTED_ERRORS as exc:
        out.discard()
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"bayesmotion {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except BaseException:
        out.discard()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
