"""Acceptance suite: each test prints one PASS/FAIL line for its numbered criterion.

The learned criteria (5 to 8 and 11) train on seeded desk-scale datasets and
take most of the suite's runtime; trained models are cached per module so
criteria sharing a model train it once.
"""
import itertools
import json
import math
import statistics
import time

import numpy as np
import pytest

from neurolidar import nn
from neurolidar.cli import main as cli_main
from neurolidar.depth import DepthFrame
from neurolidar.events import EventStream, build_event_frame, build_voxel_grid, slice_stream
from neurolidar.extrap import (ExtrapolatorConfig, ResConv, TrainConfig, baseline_linear,
                               baseline_repeat, total_loss, train_extrapolator)
from neurolidar.keyframe import (DetectorTrainConfig, KeyframeRuleConfig, eval_detector,
                                 label_keyframe, predict_proba, train_detector)
from neurolidar.metrics import evaluate
from neurolidar.nn import functional as F
from neurolidar.nn.losses import bce_loss, masked_mean, mse_loss, ssim
from neurolidar.nn.tensor import Tensor, concat, relu, sigmoid, softplus
from neurolidar.pipeline import effective_frame_rate, frame_metrics, run_adaptive
from neurolidar.protocol import (FPS_SET, compare, detector_corpus, extrap_corpus,
                                 extrap_samples, generate_corpus, split)
from neurolidar.scene import (Primitive, SceneConfig, SceneState, Trajectory, generate_sequence,
                              ground_plane)

SEEDS = (0, 1, 2)

# ---------------------------------------------------------------------------
# 1

def test_c01_voxel_conservation(verdict):
    rng = np.random.default_rng(2024)
    sizes = np.concatenate([[0, 100_000], rng.integers(0, 100_001, 998)])
    start = time.perf_counter()
    bad = 0
    for n in sizes:
        h, w = (int(v) for v in rng.integers(1, 129, 2))
        bins = int(rng.choice([1, 3, 5, 10]))
        t = np.sort(rng.integers(0, 10_000_000, n))
        stream = EventStream(h, w, t, rng.integers(0, w, n), rng.integers(0, h, n),
                             rng.choice(np.array([-1, 1], np.int8), n))
        sl = slice_stream(stream, 0, 10_000_000)
        frame = build_event_frame(sl).values
        vox = build_voxel_grid(sl, bins).values
        if vox.shape != (bins, h, w) or not np.array_equal(vox.sum(axis=0), frame):
            bad += 1
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < 10.0
    verdict(1, ok, f"{len(sizes)} slices, {bad} mismatches, {elapsed:.1f} s (< 10 s)")
    assert ok


# ---------------------------------------------------------------------------
# 2

def _shape(rng, lo, hi, n=1):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, n))


def _layer_cases(rng):
    """(name, callable or module, inputs) for one random shape of every layer and loss."""
    n, c = _shape(rng, 1, 2)[0], _shape(rng, 1, 3)[0]
    h, w = _shape(rng, 4, 7, 2)
    cout = _shape(rng, 1, 4)[0]
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, min(k, 2)))
    x = rng.standard_normal((n, c, h, w))
    wr = np.random.default_rng(rng.integers(1 << 31))
    yield "conv2d", nn.Conv2d(c, cout, k, wr, stride=stride, padding=pad), [Tensor(x)]
    yield "conv2d_depthwise", nn.Conv2d(c, c, 3, wr, padding=1, groups=c, bias=False), \
        [Tensor(x)]
    yield "conv_transpose2d", nn.ConvTranspose2d(c, cout, k, wr, stride=stride), [Tensor(x)]
    yield "linear", nn.Linear(c * 2, cout, wr), [Tensor(rng.standard_normal((n + 1, c * 2)))]
    even = rng.standard_normal((n, c, 2 * (h // 2), 2 * (w // 2)))
    yield "maxpool2d", (lambda t: F.maxpool2d(t, 2)), [Tensor(even)]
    yield "global_avg_pool", F.global_avg_pool, [Tensor(x)]
    yield "box_mean", (lambda t: F.box_mean(t, 3)), [Tensor(x)]
    yield "relu", relu, [Tensor(x + 0.01)]
    yield "sigmoid", sigmoid, [Tensor(3 * x)]
    yield "softplus", softplus, [Tensor(3 * x)]
    yield "concat", (lambda a, b: concat([a, b], axis=1)), [Tensor(x), Tensor(x[:, :1] * 2)]
    yield "resconv", ResConv(c, cout, wr), [Tensor(x)]
    size = _shape(rng, 8, 10, 2)
    pos = lambda: rng.uniform(0.1, 1.0, (n, 1) + size)  # noqa: E731
    target, mask = pos(), rng.random((n, 1) + size) > 0.2
    yield "mse_loss", (lambda p: mse_loss(p, target, mask)), [Tensor(pos())]
    yield "masked_mean", (lambda p: masked_mean(p * p, mask)), [Tensor(pos())]
    labels = (rng.random((n + 3, 1)) > 0.5).astype(float)
    weights = rng.uniform(0.5, 2.0, labels.shape)
    yield "bce_loss", (lambda z: bce_loss(sigmoid(z), labels, weights)), \
        [Tensor(rng.standard_normal(labels.shape))]
    other = pos()
    yield "ssim", (lambda p: ssim(p, Tensor(other), 7)), [Tensor(pos())]
    dense = pos()
    yield "total_loss", (lambda p: total_loss(p, dense)), [Tensor(pos())]


def test_c02_gradient_checks(verdict):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst, counts = {}, {}
    for _ in range(20):
        for name, fn, inputs in _layer_cases(rng):
            rep = nn.finite_diff_check(fn, inputs, tolerance=1e-5)
            worst[name] = max(worst.get(name, 0.0), rep.worst)
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    failed = sorted(n for n, e in worst.items() if e > 1e-5)
    ok = not failed and min(counts.values()) >= 20 and elapsed < 60.0
    verdict(2, ok, f"{len(worst)} layers/losses x 20 shapes, worst rel err "
                   f"{max(worst.values()):.1e} (<= 1e-5), {elapsed:.1f} s (< 60 s)"
                   + (f", failing: {failed}" if failed else ""))
    assert ok


# ---------------------------------------------------------------------------
# 3

def _metric_reference(p, t):
    rows = [(tv - pv, math.log(tv) - math.log(max(pv, 1e-3)),
             max(tv / max(pv, 1e-3), max(pv, 1e-3) / tv), tv)
            for pv, tv in zip(p.ravel().tolist(), t.ravel().tolist()) if tv > 0 and pv > 0]
    n = len(rows)
    return {"rmse": math.sqrt(sum(e * e for e, *_ in rows) / n),
            "log_rmse": math.sqrt(sum(le * le for _, le, *_ in rows) / n),
            "abs_rel": sum(abs(e) / tv for e, _, _, tv in rows) / n,
            "sq_rel": sum(e * e / tv for e, _, _, tv in rows) / n,
            "d1": sum(r < 1.25 for _, _, r, _ in rows) / n,
            "d2": sum(r < 1.25 ** 2 for _, _, r, _ in rows) / n,
            "d3": sum(r < 1.25 ** 3 for _, _, r, _ in rows) / n}


def test_c03_metric_oracle(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(500):
        t = rng.uniform(0.5, 80.0, (8, 8)) * (rng.random((8, 8)) > 0.15)
        p = rng.uniform(0.0005, 90.0, (8, 8)) * (rng.random((8, 8)) > 0.15)
        t[0, 0], p[0, 0] = 10.0, 9.0
        got = evaluate(p, t)
        for k, v in _metric_reference(p, t).items():
            worst = max(worst, abs(getattr(got, k) - v) / max(abs(v), 1e-300))
    edge = evaluate(np.array([[4.0]]), np.array([[5.0]]))
    edge_ok = (edge.d1, edge.d2, edge.d3) == (0.0, 1.0, 1.0)
    ok = worst <= 1e-6 and edge_ok
    verdict(3, ok, f"500 pairs, worst rel diff {worst:.1e} (<= 1e-6); 4 vs 5 m gives "
                   f"d1={edge.d1:g} (ratio 1.25 not < 1.25)")
    assert ok


# ---------------------------------------------------------------------------
# 4

def test_c04_keyframe_truth_table(verdict):
    rules = KeyframeRuleConfig()
    correct = 0
    cases = list(itertools.product((9.0, 10.0, 11.0), (7.0, 8.0, 9.0), (True, False)))
    for speed, dist, new in cases:
        prev = SceneState(0, speed, (dist,), (not new,))
        now = SceneState(20_000, speed, (dist,), (True,))
        expect = speed > 10 or dist < 8 or new
        correct += label_keyframe(prev, now, rules).label == expect
    ok = correct == len(cases) == 18
    verdict(4, ok, f"{correct}/{len(cases)} cases match speed > 10 OR distance < 8 OR new")
    assert ok


# ---------------------------------------------------------------------------
# 5

@pytest.mark.slow
def test_c05_detector_quality(verdict):
    start = time.perf_counter()
    cfg = SceneConfig(height=64, width=64, duration_s=4.0)
    seqs = generate_corpus(cfg, 48, seed=1, speed_range=(0.0, 16.0))
    tr_seqs, va_seqs = split(seqs, 0.25)
    tr, va = detector_corpus(tr_seqs), detector_corpus(va_seqs)
    total = len(tr) + len(va)
    pos = float(np.concatenate([tr.labels, va.labels]).mean())
    f1s = []
    for seed in SEEDS:
        model, _ = train_detector(tr.frames, tr.labels, DetectorTrainConfig(epochs=20, seed=seed))
        f1s.append(eval_detector(predict_proba(model, va.frames), va.labels).f1)
    elapsed = time.perf_counter() - start
    med = statistics.median(f1s)
    data_ok = total >= 2000 and 0.3 <= pos <= 0.7
    ok = data_ok and med >= 0.75 and elapsed < 900
    verdict(5, ok, f"{total} frames ({100 * pos:.0f}% positive), held-out F1 median {med:.3f} "
                   f"(>= 0.75) over seeds {[round(f, 3) for f in f1s]}, {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# 6, 7, 8, 11 share one desk dataset and its trained models

class Desk:
    def __init__(self):
        start = time.perf_counter()
        cfg = SceneConfig(height=32, width=32, duration_s=4.0, max_range=50.0)
        seqs = generate_corpus(cfg, 50, seed=7)
        self.train_seqs, self.val_seqs = split(seqs, 0.2)
        self.train = extrap_corpus(self.train_seqs, FPS_SET, seed=1)
        self.val = extrap_corpus(self.val_seqs, FPS_SET, seed=2, repeats=3)
        self.baselines = compare(self.val)
        self.setup_s = time.perf_counter() - start
        self.models, self.rmse, self.train_s = {}, {}, {}

    def model_rmse(self, variant, seed):
        key = (variant, seed)
        if key not in self.rmse:
            start = time.perf_counter()
            mc = ExtrapolatorConfig.variant(variant, height=32, width=32, max_range=50.0)
            model, _ = train_extrapolator(self.train.dataset(), mc,
                                          TrainConfig(epochs=30, seed=seed))
            self.rmse[key] = compare(self.val, {"m": model}, ())["m"].rmse
            self.train_s[key] = time.perf_counter() - start
        return self.rmse[key]


@pytest.fixture(scope="module")
def desk():
    return Desk()


@pytest.mark.slow
def test_c06_extrapolation_beats_repeat(desk, verdict):
    repeat = desk.baselines["repeat"].rmse
    ours = [desk.model_rmse("full", s) for s in SEEDS]
    med = statistics.median(ours)
    gain = 1 - med / repeat
    minutes = (desk.setup_s + sum(desk.train_s[("full", s)] for s in SEEDS)) / 60
    ok = gain >= 0.10 and minutes < 45
    verdict(6, ok, f"adaptive RMSE median {med:.3f} m vs Repeat {repeat:.3f} m: "
                   f"{100 * gain:.1f}% lower (>= 10%), seeds {[round(r, 3) for r in ours]}, "
                   f"{minutes:.1f} min")
    assert ok


@pytest.mark.slow
def test_c07_ablation_ordering(desk, verdict):
    med = {v: statistics.median(desk.model_rmse(v, s) for s in SEEDS)
           for v in ("full", "data_concat", "no_event")}
    first = med["full"] <= med["data_concat"] * 1.02
    second = med["data_concat"] <= med["no_event"] * 1.02
    ok = first and second
    verdict(7, ok, f"median RMSE full {med['full']:.3f} <= data_concat {med['data_concat']:.3f}"
                   f" <= no_event {med['no_event']:.3f} (2% tie tolerance)")
    assert ok


def _approaching_wall(speed=5.0):
    cfg = SceneConfig(height=16, width=16, duration_s=1.0, max_range=100.0)
    wall = Primitive("box", Trajectory.fixed((0.0, 0.0, 40.0)), (200.0, 200.0, 1.0), 0.7, 1.0)
    return generate_sequence(cfg, [wall], Trajectory.linear((0, 0, 0), (0, 0, speed), 1.0))


@pytest.mark.slow
def test_c08_baseline_sanity(desk, verdict):
    # a fronto-parallel wall approached at 5 m/s: z-depth falls by 0.5 m every 100 ms
    s = extrap_samples(_approaching_wall(), 10)
    lin_err, rep_min = 0.0, math.inf
    for k in range(len(s)):
        frames = [DepthFrame(v, int(t)) for v, t in zip(s.history[k], s.history_t[k])]
        target = s.target[k].astype(np.float64)
        lin = baseline_linear(frames, int(s.t_target[k])).values
        rep = baseline_repeat(DepthFrame(s.prior[k], int(s.t_prior[k]))).values
        lin_err = max(lin_err, float(np.abs(lin - target).max()))
        rep_min = min(rep_min, float(np.abs(rep - target).min()))
    step = 5.0 * 0.1
    exp_rmse = desk.baselines["exponential"].rmse
    rep_rmse = desk.baselines["repeat"].rmse
    ok = len(s) > 0 and lin_err <= 1e-5 and rep_min >= step - 1e-5 and exp_rmse > rep_rmse
    verdict(8, ok, f"affine motion: linear max err {lin_err:.1e} m (<= 1e-5), Repeat min err "
                   f"{rep_min:.4f} m (>= step {step} m); desk RMSE exponential {exp_rmse:.3g} "
                   f"> Repeat {rep_rmse:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 9

def test_c09_frame_rate_arithmetic(verdict):
    r15 = effective_frame_rate(np.arange(0, 1_500_001, 15_000)).mean
    r100 = effective_frame_rate(np.arange(0, 1_500_001, 100_000)).mean
    ok = abs(r15 - 66.67) <= 0.01 and abs(r100 - 10.0) <= 0.01
    verdict(9, ok, f"15 ms -> {r15:.2f} Hz, 100 ms -> {r100:.2f} Hz")
    assert ok


# ---------------------------------------------------------------------------
# 10

@pytest.mark.slow
def test_c10_pipeline_oracle(desk, verdict):
    worst, frames, interval_ok, extrapolated = 0.0, 0, True, 0
    for seq in desk.val_seqs[:4]:
        report, _ = run_adaptive(seq)
        period = report.config.lidar_period_us
        for t, source, m in frame_metrics(seq, report):
            frames += 1
            if m is not None:
                worst = max(worst, m.rmse)
        for f in report.frames:
            if f.source == "extrapolated":
                extrapolated += 1
                interval_ok &= f.voxel_interval == (f.t // period * period, f.t)
    static_cfg = SceneConfig(height=32, width=32, duration_s=1.0)
    static = generate_sequence(static_cfg, [ground_plane()], Trajectory.fixed((0, 0, 0)))
    static_report, _ = run_adaptive(static)
    zero_ok = len(static.events) == 0 and static_report.triggers == 0
    ok = worst == 0.0 and interval_ok and extrapolated > 0 and zero_ok
    verdict(10, ok, f"{frames} frames ({extrapolated} extrapolated), max RMSE {worst:g}; "
                    f"intervals anchored at LiDAR: {interval_ok}; zero-event triggers: "
                    f"{static_report.triggers}")
    assert ok


# ---------------------------------------------------------------------------
# 11

@pytest.mark.slow
def test_c11_repeat_rate_monotonicity(desk, verdict):
    rmse = [compare(extrap_corpus(desk.val_seqs, f), methods=("repeat",))["repeat"].rmse
            for f in FPS_SET]
    ok = all(a > b for a, b in zip(rmse, rmse[1:]))
    verdict(11, ok, "Repeat RMSE " + ", ".join(f"{f} fps {r:.3f}" for f, r in zip(FPS_SET, rmse)))
    assert ok


# ---------------------------------------------------------------------------
# 12

TINY = """[scene]
height = 16
width = 16
duration_s = 0.6
max_range = 50
[corpus]
count = 3
speed_min = 5
speed_max = 15
[detector]
epochs = 1
val_fraction = 0.34
[extrapolator]
epochs = 1
widths = 4 8
bottleneck = 8
val_fraction = 0.34
"""


def _tree(path, skip_measured=False):
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if skip_measured and p.name == "report.json":
                doc = json.loads(data)
                doc.pop("measured")
                data = json.dumps(doc, sort_keys=True).encode()
            out[p.relative_to(path).as_posix()] = data
    return out


def test_c12_cli_determinism(tmp_path, verdict):
    (tmp_path / "run.ini").write_text(TINY)
    trees = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        common = ["--config", str(tmp_path / "run.ini"), "--seed", "11", "--quiet"]
        codes = [cli_main(["gen", "--out", str(root / "data")] + common),
                 cli_main(["train-keyframe", str(root / "data"), "--out", str(root / "kf")]
                          + common),
                 cli_main(["train-extrap", str(root / "data"), "--out", str(root / "ex")]
                          + common),
                 cli_main(["run", str(root / "data" / "seq_0000"), "--out", str(root / "run"),
                           "--detector", str(root / "kf" / "detector.nlnn"),
                           "--extrapolator", str(root / "ex" / "extrapolator.nlnn")] + common)]
        assert codes == [0, 0, 0, 0]
        trees.append({d: _tree(root / d, skip_measured=True)
                      for d in ("data", "kf", "ex", "run")})
    same = {d: trees[0][d] == trees[1][d] for d in trees[0]}
    files = sum(len(t) for t in trees[0].values())
    ok = all(same.values()) and files > 10
    verdict(12, ok, f"{files} output files byte-identical across two runs: {same}")
    assert ok
