"""Adaptive frame-rate loop: LiDAR frames at a base rate plus event-triggered extrapolations.

Three worker threads joined by single-slot queues: the slicer cuts detector
windows and emits LiDAR frames, the detector classifies each window and decides
triggers, the extrapolator builds the voxel grid since the latest LiDAR frame
and predicts depth at the trigger time.

Scheduling runs in simulated time, so the emitted frames depend only on the
inputs. Wall-clock stage latencies are recorded separately.
"""
import json
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import extrap
from .events import build_event_frame, build_voxel_grid, slice_stream
from .keyframe import KeyframeRuleConfig, detector_forward, label_keyframe
from .metrics import evaluate
from .scene import US_PER_S, scene_state_at

STAGES = ("slicer", "detector", "extrapolator")
_DONE = object()


@dataclass(frozen=True)
class PipelineConfig:
    base_rate_hz: float = 10.0
    delta_us: int = 20_000
    bins: int = 5
    max_window_us: int = 500_000
    # simulated inference time; triggers inside it are coalesced into the next window
    extrap_latency_us: int = 0

    def __post_init__(self):
        if self.base_rate_hz <= 0:
            raise ValueError("base_rate_hz must be positive")
        if self.delta_us <= 0:
            raise ValueError("delta_us must be positive")
        if self.bins < 1:
            raise ValueError("bins must be at least 1")
        if self.max_window_us <= 0:
            raise ValueError("max_window_us must be positive")
        if self.extrap_latency_us < 0:
            raise ValueError("extrap_latency_us must be non-negative")

    @property
    def lidar_period_us(self):
        return int(round(US_PER_S / self.base_rate_hz))


# ---------------------------------------------------------------------------
# pluggable stages

class ModelDetector:
    def __init__(self, model, threshold=0.5):
        self.model = model
        self.threshold = threshold

    def check(self, geometry):
        if tuple(geometry) != self.model.geometry:
            raise ValueError(f"detector geometry {self.model.geometry} does not match "
                             f"sequence {tuple(geometry)}")

    def __call__(self, sequence, t0, t1, frame):
        return detector_forward(self.model, frame) >= self.threshold


class RuleOracleDetector:
    """Ground-truth keyframe rules evaluated across the window."""

    def __init__(self, rules=KeyframeRuleConfig()):
        self.rules = rules

    def check(self, geometry):
        pass

    def __call__(self, sequence, t0, t1, frame):
        return label_keyframe(_state(sequence, t0), _state(sequence, t1), self.rules).label


class ModelExtrapolator:
    def __init__(self, model):
        self.model = model

    def check(self, geometry):
        cfg = self.model.config
        if tuple(geometry) != (cfg.height, cfg.width):
            raise ValueError(f"extrapolator geometry {(cfg.height, cfg.width)} does not match "
                             f"sequence {tuple(geometry)}")

    def __call__(self, sequence, prior, voxel, t1):
        return extrap.extrapolate(self.model, prior, voxel, t1)


class GroundTruthExtrapolator:
    def check(self, geometry):
        pass

    def __call__(self, sequence, prior, voxel, t1):
        return sequence.depth_at(t1)


class RepeatExtrapolator:
    def check(self, geometry):
        pass

    def __call__(self, sequence, prior, voxel, t1):
        return extrap.baseline_repeat(prior, t1)


def _state(sequence, t_us):
    try:
        return sequence.states[sequence.index_of(t_us)]
    except KeyError:
        return scene_state_at(sequence, t_us)


# ---------------------------------------------------------------------------
# report

@dataclass
class EmittedFrame:
    frame: object
    source: str                     # "lidar" or "extrapolated"
    voxel_interval: tuple = None    # (t_lidar, t1) for extrapolated frames
    latency_us: dict = field(default_factory=dict)

    @property
    def t(self):
        return self.frame.timestamp


@dataclass(frozen=True)
class FrameRate:
    mean: float
    min: float
    max: float


@dataclass
class PipelineReport:
    config: PipelineConfig
    frames: list
    decisions: list
    stage_latency_us: dict
    rate: FrameRate = None
    missed_deadlines: int = 0

    @property
    def timestamps(self):
        return [f.t for f in self.frames]

    @property
    def triggers(self):
        return sum(1 for d in self.decisions if d["triggered"])

    def to_json(self, config_text=None, budget=None):
        """Deterministic content at the top level; wall-clock data under "measured"."""
        out = {
            "config": {k: getattr(self.config, k) for k in self.config.__dataclass_fields__},
            "frames": [{"t": f.t, "source": f.source,
                        "voxel_interval": list(f.voxel_interval) if f.voxel_interval else None}
                       for f in self.frames],
            "decisions": self.decisions,
            "triggers": self.triggers,
            "effective_rate_hz": None if self.rate is None else
            {"mean": self.rate.mean, "min": self.rate.min, "max": self.rate.max},
            "measured": {
                "stage_latency_us": {s: percentiles(v) for s, v in self.stage_latency_us.items()},
                "frame_latency_us": [f.latency_us for f in self.frames],
                "missed_deadlines": self.missed_deadlines,
                "budget": budget,
            },
        }
        if config_text is not None:
            out["config_text"] = config_text
        return json.dumps(out, indent=2) + "\n"


def percentiles(values):
    if not values:
        return {"p50": 0.0, "p95": 0.0, "max": 0.0, "count": 0}
    v = np.asarray(values, dtype=np.float64)
    return {"p50": float(np.percentile(v, 50)), "p95": float(np.percentile(v, 95)),
            "max": float(v.max()), "count": int(v.size)}


def effective_frame_rate(timestamps, window_us=US_PER_S):
    """Mean (n - 1) / span plus min / max over consecutive full windows.

    Windowed rates count frames in half-open windows starting at the first
    frame; with no full window the extremes equal the mean.
    """
    t = np.sort(np.asarray(timestamps, dtype=np.int64))
    if t.size < 2:
        raise ValueError("effective frame rate needs at least two frames")
    span = int(t[-1] - t[0])
    if span <= 0:
        raise ValueError("frames share one timestamp")
    mean = (t.size - 1) * US_PER_S / span
    rates = []
    start = int(t[0])
    while start + window_us <= t[-1]:
        lo, hi = np.searchsorted(t, [start, start + window_us], side="left")
        rates.append((hi - lo) * US_PER_S / window_us)
        start += window_us
    if not rates:
        return FrameRate(mean, mean, mean)
    return FrameRate(mean, float(min(min(rates), mean)), float(max(max(rates), mean)))


def latency_budget_check(report, config=None):
    """Compare each emitted frame's stage-latency sum with the gap since the previous frame."""
    results = []
    prev = None
    for f in report.frames:
        total = float(sum(f.latency_us.values()))
        budget = None if prev is None else float(f.t - prev)
        ok = budget is None or total <= budget
        results.append({"t": f.t, "latency_us": total, "budget_us": budget, "ok": ok})
        prev = f.t
    stages = {}
    for s in STAGES:
        worst = [(f.latency_us.get(s, 0.0), r["budget_us"]) for f, r in zip(report.frames, results)
                 if r["budget_us"] is not None]
        stages[s] = all(lat <= b for lat, b in worst)
    return {"passed": all(r["ok"] for r in results), "stages": stages,
            "violations": [r["t"] for r in results if not r["ok"]], "frames": results}


# ---------------------------------------------------------------------------
# run

def _lidar_times(sequence, config):
    period = config.lidar_period_us
    last = sequence.times[-1]
    times = list(range(0, last + 1, period))
    for t in times:
        sequence.index_of(t)
    return times


def run_adaptive(sequence, config=PipelineConfig(), detector=None, extrapolator=None,
                 timeout_s=600.0):
    """Run the three-stage loop over ``sequence``; returns (report, emitted DepthFrames)."""
    detector = detector or RuleOracleDetector()
    extrapolator = extrapolator or GroundTruthExtrapolator()
    geometry = (sequence.config.height, sequence.config.width)
    detector.check(geometry)
    extrapolator.check(geometry)
    lidar = _lidar_times(sequence, config)
    if len(lidar) < 1:
        raise ValueError("sequence shorter than one LiDAR period")
    delta = config.delta_us
    q_windows = queue.Queue(maxsize=1)
    q_jobs = queue.Queue(maxsize=1)
    emitted, decisions = [], []
    latencies = {s: [] for s in STAGES}
    lock = threading.Lock()
    errors = []

    def emit(item):
        with lock:
            emitted.append(item)

    class _Abort(Exception):
        pass

    def put(q, item):
        # poll so a failure in another stage cannot leave this one blocked
        while True:
            if errors:
                raise _Abort
            try:
                q.put(item, timeout=0.05)
                return
            except queue.Full:
                pass

    def get(q):
        while True:
            if errors:
                raise _Abort
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                pass

    def guarded(fn):
        def run():
            try:
                fn()
            except _Abort:
                pass
            except BaseException as exc:  # surfaced in the caller
                errors.append(exc)
        return run

    def slicer():
        for k, t_lidar in enumerate(lidar):
            emit(EmittedFrame(sequence.depth_at(t_lidar), "lidar"))
            t_next = lidar[k + 1] if k + 1 < len(lidar) else sequence.times[-1]
            t0 = t_lidar
            while t0 + delta <= t_next:
                if errors:
                    return
                start = time.perf_counter()
                sl = slice_stream(sequence.events, t0, t0 + delta)
                frame = build_event_frame(sl, geometry)
                lat = (time.perf_counter() - start) * 1e6
                latencies["slicer"].append(lat)
                put(q_windows, (t_lidar, t0, t0 + delta, t_next, frame, len(sl), lat))
                t0 += delta
        put(q_windows, _DONE)

    def detect():
        busy_until = -1
        pending = False
        current_lidar = None
        last_emit = 0
        while True:
            item = get(q_windows)
            if item is _DONE:
                break
            t_lidar, t0, t1, t_next, frame, n_events, slice_lat = item
            if t_lidar != current_lidar:
                current_lidar, pending, last_emit = t_lidar, False, t_lidar
            start = time.perf_counter()
            # the opening window and event-free windows are never classified
            positive = False if t0 == 0 or n_events == 0 else bool(
                detector(sequence, t0, t1, frame))
            lat = (time.perf_counter() - start) * 1e6
            latencies["detector"].append(lat)
            want = positive or pending
            reason = "detector" if positive else ("coalesced" if pending else None)
            if not want and t1 - last_emit >= config.max_window_us:
                want, reason = True, "max_window"
            triggered = False
            if want and t1 < t_next:
                if t1 >= busy_until:
                    triggered, pending = True, False
                    busy_until = t1 + config.extrap_latency_us
                    last_emit = t1
                    put(q_jobs, (t_lidar, t1, {"slicer": slice_lat, "detector": lat}))
                else:
                    pending = True
            decisions.append({"t0": t0, "t1": t1, "positive": positive, "triggered": triggered,
                              "reason": reason if triggered else None})
        put(q_jobs, _DONE)

    def extrapolate():
        while True:
            item = get(q_jobs)
            if item is _DONE:
                break
            t_lidar, t1, lat = item
            start = time.perf_counter()
            prior = sequence.depth_at(t_lidar)
            voxel = build_voxel_grid(slice_stream(sequence.events, t_lidar, t1), config.bins,
                                     geometry)
            pred = extrapolator(sequence, prior, voxel, t1).retimed(t1)
            lat = dict(lat, extrapolator=(time.perf_counter() - start) * 1e6)
            latencies["extrapolator"].append(lat["extrapolator"])
            emit(EmittedFrame(pred, "extrapolated", (t_lidar, t1), lat))

    threads = [threading.Thread(target=guarded(fn), name=f"neurolidar-{name}", daemon=True)
               for fn, name in ((slicer, "slicer"), (detect, "detector"),
                                (extrapolate, "extrapolator"))]
    for th in threads:
        th.start()
    deadline = time.monotonic() + timeout_s
    for th in threads:
        th.join(max(0.0, deadline - time.monotonic()))
        if th.is_alive():
            raise RuntimeError(f"pipeline stage {th.name} did not finish")
    if errors:
        raise errors[0]
    emitted.sort(key=lambda f: f.t)
    ts = [f.t for f in emitted]
    if len(set(ts)) != len(ts):
        raise RuntimeError("two emitted frames share a timestamp")
    report = PipelineReport(config, emitted, decisions, latencies)
    if len(emitted) >= 2:
        report.rate = effective_frame_rate(ts)
    report.missed_deadlines = len(latency_budget_check(report)["violations"])
    return report, [f.frame for f in emitted]


def frame_metrics(sequence, report):
    """Per emitted frame: (t, source, DepthMetrics or None when nothing is valid)."""
    rows = []
    for f in report.frames:
        target = sequence.depth_at(f.t)
        try:
            m = evaluate(f.frame, target)
        except ValueError:
            m = None
        rows.append((f.t, f.source, m))
    return rows
