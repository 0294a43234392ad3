"""Command-line entry point: gen, train-keyframe, train-extrap, eval, run, inspect.

Exit codes: 0 success, 2 configuration or usage error, 3 data error, 4 runtime error.
"""
import argparse
import csv
import dataclasses
import json
import logging
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import protocol
from .config import ConfigError, load_config
from .depth import ELDR_MAGIC, decode_depth
from .errors import ParseError
from .events import EVT_MAGIC, decode_events
from .extrap import train_extrapolator
from .keyframe import DetectorTrainConfig, eval_detector, predict_proba, train_detector
from .metrics import CSV_COLUMNS, write_csv
from .nn.checkpoint import NLNN_MAGIC, NLOS_MAGIC, decode_optimizer, decode_params
from .pipeline import (GroundTruthExtrapolator, ModelDetector, ModelExtrapolator,
                       RepeatExtrapolator, RuleOracleDetector, frame_metrics,
                       latency_budget_check, run_adaptive)
from .scene import Sequence, generate_sequence, random_scene
from .store import load_model, save_model

log = logging.getLogger("neurolidar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


def _out_dir(args):
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    probe = out / ".write-test"
    try:
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def _load_corpus(path):
    try:
        return protocol.load_corpus(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {exc.filename}") from None
    except (json.JSONDecodeError, KeyError, ValueError, ParseError) as exc:
        raise DataError(f"corrupt dataset {path}: {exc}") from None


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return "" if v is None else (f"{v:.9g}" if isinstance(v, float) else v)


# ---------------------------------------------------------------------------
# gen

def _gen_one(job):
    scene, corpus, child = job
    rng = np.random.default_rng(child)
    cfg = dataclasses.replace(scene, seed=int(child.generate_state(1)[0]))
    prims, ego = random_scene(cfg, rng, speed_range=(corpus.speed_min, corpus.speed_max),
                              max_objects=corpus.max_objects)
    return generate_sequence(cfg, prims, ego)


def cmd_gen(args, cfg):
    out = _out_dir(args)
    scene, corpus = cfg.scene, cfg.corpus
    children = np.random.SeedSequence(cfg.seed).spawn(corpus.count)
    jobs = [(scene, corpus, c) for c in children]
    if args.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.threads) as pool:
            seqs = list(pool.map(_gen_one, jobs))
    else:
        seqs = [_gen_one(j) for j in jobs]
    for i, seq in enumerate(seqs):
        seq.meta = {"index": i, "corpus_seed": cfg.seed}
        log.info("sequence %d: %d frames, %d events", i, len(seq.depth), len(seq.events))
    protocol.save_corpus(seqs, out, {"seed": cfg.seed, "config_text": cfg.text})
    return EXIT_OK


# ---------------------------------------------------------------------------
# training

def cmd_train_keyframe(args, cfg):
    seqs, manifest = _load_corpus(args.dataset)
    out = _out_dir(args)
    det = cfg.detector
    train_seqs, val_seqs = protocol.split(seqs, det.val_fraction)
    tr = protocol.detector_corpus(train_seqs, det.delta_us, cfg.keyframe)
    va = protocol.detector_corpus(val_seqs, det.delta_us, cfg.keyframe) if val_seqs else None
    if len(tr) == 0:
        raise DataError("dataset yields no detector windows")
    names = manifest["sequences"]
    (out / "labels.json").write_text(json.dumps(
        {"train": tr.manifest(names[:len(train_seqs)]),
         "val": va.manifest(names[len(train_seqs):]) if va is not None else []},
        separators=(",", ":")) + "\n")
    log.info("detector windows: %d train (%.1f%% positive)", len(tr), 100 * tr.labels.mean())
    try:
        model, history = train_detector(
            tr.frames, tr.labels, DetectorTrainConfig(det.epochs, det.batch_size, det.lr,
                                                      cfg.seed, det.balance_classes),
            val=(va.frames, va.labels) if va is not None and len(va) else None,
            log_fn=lambda r: log.info("epoch %d loss %.5f val F1 %.4f", r["epoch"],
                                      r["train_loss"], r["val_f1"]))
    except ValueError as exc:
        raise DataError(str(exc)) from None
    save_model(model, out / "detector.nlnn", {"seed": cfg.seed, "config_text": cfg.text})
    _write_rows(out / "train_log.csv", ("epoch", "lr", "train_loss", "val_metric"),
                [(r["epoch"], _fmt(r["lr"]), _fmt(r["train_loss"]), _fmt(r["val_f1"]))
                 for r in history])
    if va is not None and len(va):
        ev = eval_detector(predict_proba(model, va.frames), va.labels, va.times, va.rules,
                           cfg.pipeline.lidar_period_us)
        (out / "eval.json").write_text(json.dumps(ev.as_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_train_extrap(args, cfg):
    seqs, _ = _load_corpus(args.dataset)
    out = _out_dir(args)
    ex = cfg.extrapolator
    train_seqs, val_seqs = protocol.split(seqs, ex.val_fraction)
    tr = protocol.extrap_corpus(train_seqs, ex.fps, cfg.seed, ex.bins, ex.repeats)
    va = protocol.extrap_corpus(val_seqs, ex.fps, cfg.seed + 1, ex.bins) if val_seqs else None
    if len(tr) == 0:
        raise DataError("dataset yields no extrapolation samples; sequences too short")
    variant = args.variant or ex.variant
    model_cfg = ex.model_config(cfg.scene if "scene" in cfg.sections else _scene_of(seqs),
                                variant)
    _check_geometry(model_cfg, seqs[0])
    model, history = train_extrapolator(
        tr.dataset(), model_cfg, ex.train_config(cfg.seed),
        log_fn=lambda r: log.info("epoch %d loss %.5f", r["epoch"], r["train_loss"]),
        val=va.dataset() if va is not None and len(va) else None)
    save_model(model, out / "extrapolator.nlnn",
               {"name": "ours" if variant == "full" else variant, "seed": cfg.seed,
                "config_text": cfg.text})
    _write_rows(out / "train_log.csv", ("epoch", "lr", "train_loss", "val_metric"),
                [(r["epoch"], _fmt(r["lr"]), _fmt(r["train_loss"]), _fmt(r.get("val_rmse")))
                 for r in history])
    return EXIT_OK


def _scene_of(seqs):
    return seqs[0].config


def _check_geometry(model_cfg, seq):
    geom = (seq.config.height, seq.config.width)
    if (model_cfg.height, model_cfg.width) != geom:
        raise DataError(f"model geometry {(model_cfg.height, model_cfg.width)} does not "
                        f"match dataset {geom}")


# ---------------------------------------------------------------------------
# eval / run

def _load_checkpoint(path, kind):
    try:
        model, desc = load_model(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {exc.filename}") from None
    except (ValueError, KeyError, ParseError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from None
    if desc["kind"] != kind:
        raise DataError(f"{path} holds a {desc['kind']}, expected {kind}")
    return model, desc


def cmd_eval(args, cfg):
    ev = cfg.eval
    fps = tuple(args.fps) if args.fps is not None else ev.fps
    if not fps:
        raise UsageError("fps list is empty")
    mode = args.mode or ev.mode
    seqs, _ = _load_corpus(args.dataset)
    out = _out_dir(args)
    if args.split == "val":
        seqs = protocol.split(seqs, cfg.extrapolator.val_fraction)[1]
    if not seqs:
        raise DataError("no sequences to evaluate")
    models = {}
    for path in args.checkpoints or ():
        model, desc = _load_checkpoint(path, "extrapolator")
        if seqs:
            try:
                _check_geometry(model.config, seqs[0])
            except DataError as exc:
                raise DataError(f"{path}: {exc}") from None
        name = desc.get("name", Path(path).stem)
        if name in models:
            name = f"{name}:{Path(path).parent.name}"
        models[name] = model
    settings = [("adaptive", fps)] if mode == "adaptive" else [(f"{f:g}", f) for f in fps]
    bins = cfg.extrapolator.bins
    rows = []
    for label, rate in settings:
        samples = protocol.extrap_corpus(seqs, rate, cfg.seed, bins,
                                         ev.repeats if mode == "adaptive" else 1)
        if len(samples) == 0:
            raise DataError(f"no evaluation samples at {label} fps")
        for name, m in protocol.compare(samples, models).items():
            rows.append((name, label, m))
            log.info("%-12s %-8s rmse %.4f", name, label, m.rmse)
    write_csv(rows, out / "metrics.csv")
    return EXIT_OK


def cmd_run(args, cfg):
    try:
        seq = Sequence.load(args.sequence)
    except FileNotFoundError as exc:
        raise DataError(f"sequence not found: {exc.filename}") from None
    except (json.JSONDecodeError, KeyError, ValueError, ParseError) as exc:
        raise DataError(f"corrupt sequence {args.sequence}: {exc}") from None
    out = _out_dir(args)
    if args.detector == "oracle":
        detector = RuleOracleDetector(cfg.keyframe)
    else:
        detector = ModelDetector(_load_checkpoint(args.detector, "detector")[0])
    if args.extrapolator == "truth":
        extrapolator = GroundTruthExtrapolator()
    elif args.extrapolator == "repeat":
        extrapolator = RepeatExtrapolator()
    else:
        extrapolator = ModelExtrapolator(_load_checkpoint(args.extrapolator, "extrapolator")[0])
    try:
        report, _ = run_adaptive(seq, cfg.pipeline, detector, extrapolator)
    except KeyError as exc:
        raise DataError(f"sequence lacks ground truth needed by the pipeline: {exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    budget = latency_budget_check(report, cfg.pipeline)
    (out / "report.json").write_text(report.to_json(cfg.text, budget))
    rows = []
    for t, source, m in frame_metrics(seq, report):
        vals = [""] * (len(CSV_COLUMNS) - 2) if m is None else \
            [f"{m.rmse:.6f}", f"{m.log_rmse:.6f}", f"{m.abs_rel:.6f}", f"{m.sq_rel:.6f}",
             f"{m.d1:.6f}", f"{m.d2:.6f}", f"{m.d3:.6f}", m.valid_px]
        rows.append([t, source] + vals)
    _write_rows(out / "frames.csv", ("t", "source") + CSV_COLUMNS[2:], rows)
    log.info("%d frames (%d extrapolated), mean rate %.2f Hz", len(report.frames),
             report.triggers, report.rate.mean if report.rate else float("nan"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect

def describe(path):
    """Human-readable summary of a file in one of the package's binary formats."""
    data = Path(path).read_bytes()
    magic = data[:4]
    if magic == EVT_MAGIC:
        s = decode_events(data)
        lines = [f"EVT1 event stream {s.height}x{s.width}, {len(s)} events"]
        if len(s):
            lines.append(f"  t: {int(s.t[0])} .. {int(s.t[-1])} us")
            lines.append(f"  polarity: {int((s.p > 0).sum())} on, {int((s.p < 0).sum())} off")
        return "\n".join(lines)
    if magic == ELDR_MAGIC:
        lines, off = [], 0
        while off < len(data):
            f, off = decode_depth(data, off)
            v = f.values[f.values > 0]
            rng_txt = f"{v.min():.3f}..{v.max():.3f} m" if v.size else "no valid pixels"
            lines.append(f"  t={f.timestamp:>10d} us  valid {v.size:6d}  {rng_txt}")
        h, w = f.geometry if lines else (0, 0)
        return "\n".join([f"ELDR depth frames {h}x{w}, {len(lines)} frames"] + lines)
    if magic == NLNN_MAGIC:
        state = decode_params(data)
        total = sum(a.size for a in state.values())
        lines = [f"NLNN parameters: {len(state)} tensors, {total} values"]
        lines += [f"  {name:40s} {tuple(a.shape)}" for name, a in state.items()]
        return "\n".join(lines)
    if magic == NLOS_MAGIC:
        st = decode_optimizer(data)
        return (f"NLOS optimizer state: step {st.step}, lr {st.lr:g} (base {st.base_lr:g}), "
                f"{len(st.m)} moment pairs")
    try:
        obj = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: unrecognized format (magic {magic!r})") from None
    return json.dumps(obj, indent=2)


def cmd_inspect(args, cfg):
    try:
        print(describe(args.file))
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {exc.filename}") from None
    except (ParseError, struct.error) as exc:
        raise DataError(f"{args.file}: {exc}") from None
    return EXIT_OK


# ---------------------------------------------------------------------------

def _global_flags(parser, suppress=False):
    # subcommand copies use SUPPRESS so they do not reset flags given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="overrides [run] seed")
    parser.add_argument("--config", default=d(None), help="INI run configuration")
    parser.add_argument("--out", default=d(None), help="output directory")
    parser.add_argument("--threads", type=int, default=d(1), help="worker processes for gen")
    parser.add_argument("--quiet", action="store_true", default=d(False),
                        help="only log warnings and errors")
    return parser


def build_parser():
    common = _global_flags(argparse.ArgumentParser(add_help=False), suppress=True)
    p = _global_flags(argparse.ArgumentParser(
        prog="neurolidar", description="Event-guided adaptive depth frame rate toolkit"))
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    s = sub.add_parser("train-keyframe", parents=[common], help="train the keyframe detector")
    s.add_argument("dataset")
    s = sub.add_parser("train-extrap", parents=[common], help="train the depth extrapolator")
    s.add_argument("dataset")
    s.add_argument("--variant", default=None,
                   choices=("full", "no_event", "event_frame", "data_concat", "no_skip",
                            "separable"))
    s = sub.add_parser("eval", parents=[common], help="compare baselines and checkpoints")
    s.add_argument("dataset")
    s.add_argument("--checkpoints", nargs="*", default=None)
    s.add_argument("--mode", choices=("adaptive", "fixed"), default=None)
    s.add_argument("--fps", type=float, nargs="*", default=None)
    s.add_argument("--split", choices=("val", "all"), default="val")
    s = sub.add_parser("run", parents=[common], help="run the adaptive pipeline on a sequence")
    s.add_argument("sequence")
    s.add_argument("--detector", default="oracle", help="checkpoint path or 'oracle'")
    s.add_argument("--extrapolator", default="truth",
                   help="checkpoint path, 'truth' or 'repeat'")
    s = sub.add_parser("inspect", parents=[common], help="pretty-print a package file")
    s.add_argument("file")
    return p


COMMANDS = {"gen": cmd_gen, "train-keyframe": cmd_train_keyframe,
            "train-extrap": cmd_train_extrap, "eval": cmd_eval, "run": cmd_run,
            "inspect": cmd_inspect}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # anything else is a runtime failure with a clean exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
