"""Corpus generation and the sampling protocols used for training and evaluation.

Detector samples are consecutive fixed-length event windows labeled from the
scene state at the window edges. Extrapolation samples follow a LiDAR sampling
schedule: either a fixed rate or gaps drawn uniformly from a set of rates
("adaptive"). Each sample pairs the prior frame, the events since it, the
target frame and the preceding sampled frames used by the analytic baselines.
"""
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import extrap
from .depth import DepthFrame
from .events import build_event_frame, build_voxel_grid, slice_stream
from .keyframe import KeyframeRuleConfig, label_keyframe
from .metrics import Accumulator
from .scene import US_PER_S, Sequence, generate_sequence, random_scene, scene_state_at

FPS_SET = (2, 5, 10, 20, 50)
HISTORY = 3


def generate_corpus(config, count, seed=0, speed_range=(0.0, 20.0), max_objects=6,
                    backend=None):
    """``count`` independent random sequences; each draws from its own child seed."""
    seqs = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(child)
        cfg = dataclasses.replace(config, seed=int(child.generate_state(1)[0]))
        prims, ego = random_scene(cfg, rng, speed_range=speed_range, max_objects=max_objects)
        seqs.append(generate_sequence(cfg, prims, ego, backend=backend,
                                      meta={"index": i, "corpus_seed": seed}))
    return seqs


def save_corpus(seqs, directory, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, seq in enumerate(seqs):
        name = f"seq_{i:04d}"
        seq.save(directory / name)
        names.append(name)
    manifest = {"format": "neurolidar-corpus/1", "sequences": names}
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_corpus(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "neurolidar-corpus/1":
        raise ValueError(f"{directory}: not a corpus manifest")
    return [Sequence.load(directory / name) for name in manifest["sequences"]], manifest


def split(items, val_fraction=0.2):
    """Deterministic tail split by sequence so no scene leaks across the split."""
    if len(items) < 2 or val_fraction <= 0:
        return items[:], items[:0]
    n_val = max(1, int(round(len(items) * val_fraction)))
    return items[:len(items) - n_val], items[len(items) - n_val:]


# ---------------------------------------------------------------------------
# detector windows

@dataclass
class DetectorSamples:
    frames: np.ndarray      # (N, H, W) int32 polarity sums
    labels: np.ndarray      # (N,) bool
    rules: list             # frozensets of fired rules
    times: np.ndarray       # (N,) window end, us
    source: np.ndarray      # (N, 2) sequence index, window index

    def __len__(self):
        return len(self.labels)

    def manifest(self, names):
        return [{"sequence": names[int(s)], "window": int(w), "t": int(t), "label": bool(y),
                 "rules": sorted(r)}
                for (s, w), t, y, r in zip(self.source, self.times, self.labels, self.rules)]

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(np.concatenate([p.frames for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   [r for p in parts for r in p.rules],
                   np.concatenate([p.times for p in parts]),
                   np.concatenate([p.source for p in parts]))


def _state(seq, t_us):
    try:
        return seq.states[seq.index_of(t_us)]
    except KeyError:
        return scene_state_at(seq, t_us)


def detector_samples(seq, delta=20_000, rules=KeyframeRuleConfig(), seq_index=0):
    """Window k covers [k*delta, (k+1)*delta) and is labeled by the state change across it."""
    last = seq.times[-1]
    n = last // delta
    h, w = seq.config.height, seq.config.width
    frames = np.zeros((n, h, w), np.int32)
    labels = np.zeros(n, bool)
    rule_sets, times = [], np.zeros(n, np.int64)
    prev = _state(seq, 0)
    for k in range(n):
        t0, t1 = k * delta, (k + 1) * delta
        frames[k] = build_event_frame(slice_stream(seq.events, t0, t1)).values
        now = _state(seq, t1)
        lab = label_keyframe(prev, now, rules)
        labels[k] = lab.label
        rule_sets.append(lab.rules)
        times[k] = t1
        prev = now
    source = np.stack([np.full(n, seq_index), np.arange(n)], axis=1)
    return DetectorSamples(frames, labels, rule_sets, times, source)


def detector_corpus(seqs, delta=20_000, rules=KeyframeRuleConfig()):
    return DetectorSamples.concat(detector_samples(s, delta, rules, i) for i, s in enumerate(seqs))


# ---------------------------------------------------------------------------
# extrapolation samples

def sample_times(seq, fps, rng=None):
    """LiDAR sampling instants on the ground-truth grid.

    ``fps`` is one rate (fixed protocol) or a collection of rates, in which case
    every gap is drawn uniformly from it (adaptive protocol).
    """
    period = US_PER_S / seq.config.rate_hz
    rates = [fps] if np.isscalar(fps) else list(fps)
    if not rates:
        raise ValueError("empty fps list")
    steps = []
    for r in rates:
        s = US_PER_S / r / period if r > 0 else 0.0
        if r <= 0 or abs(s - round(s)) > 1e-9 or round(s) < 1:
            raise ValueError(f"{r} fps is not a multiple of the ground-truth period")
        steps.append(int(round(s)))
    if len(steps) > 1 and rng is None:
        raise ValueError("adaptive sampling needs an rng")
    n = len(seq.depth)
    idx = [0]
    while True:
        step = steps[0] if len(steps) == 1 else steps[int(rng.integers(len(steps)))]
        if idx[-1] + step >= n:
            break
        idx.append(idx[-1] + step)
    return idx


@dataclass
class ExtrapSamples:
    prior: np.ndarray       # (N, H, W) metres
    voxel: np.ndarray       # (N, B, H, W)
    target: np.ndarray      # (N, H, W)
    history: np.ndarray     # (N, K, H, W), oldest first, last entry == prior
    history_t: np.ndarray   # (N, K) us
    t_prior: np.ndarray     # (N,)
    t_target: np.ndarray    # (N,)
    fps: np.ndarray         # (N,) rate that produced the gap

    def __len__(self):
        return len(self.t_target)

    @property
    def gap_us(self):
        return self.t_target - self.t_prior

    def dataset(self):
        return extrap.ExtrapDataset(self.prior, self.voxel, self.target, self.gap_us)

    def subset(self, idx):
        return ExtrapSamples(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))

    @classmethod
    def concat(cls, parts):
        if not parts:
            raise ValueError("nothing to concatenate")
        parts = [p for p in parts if len(p)] or parts[:1]
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts])
                     for f in dataclasses.fields(cls)))


def extrap_samples(seq, fps, rng=None, bins=5, history=HISTORY):
    """One sample per sampled interval whose prior has ``history - 1`` earlier samples."""
    idx = sample_times(seq, fps, rng)
    times = seq.times
    rows = []
    for i in range(history, len(idx)):
        a, b = idx[i - 1], idx[i]
        t0, t1 = times[a], times[b]
        hist = idx[i - history:i]
        rows.append((seq.depth[a].values,
                     build_voxel_grid(slice_stream(seq.events, t0, t1), bins).values,
                     seq.depth[b].values,
                     np.stack([seq.depth[j].values for j in hist]),
                     np.array([times[j] for j in hist], np.int64),
                     t0, t1, seq.config.rate_hz / (b - a)))
    h, w = seq.config.height, seq.config.width
    if not rows:
        return ExtrapSamples(np.zeros((0, h, w), np.float32), np.zeros((0, bins, h, w), np.int32),
                             np.zeros((0, h, w), np.float32),
                             np.zeros((0, history, h, w), np.float32),
                             np.zeros((0, history), np.int64), np.zeros(0, np.int64),
                             np.zeros(0, np.int64), np.zeros(0))
    cols = list(zip(*rows))
    return ExtrapSamples(np.stack(cols[0]), np.stack(cols[1]), np.stack(cols[2]),
                         np.stack(cols[3]), np.stack(cols[4]), np.array(cols[5], np.int64),
                         np.array(cols[6], np.int64), np.array(cols[7]))


def extrap_corpus(seqs, fps, seed=0, bins=5, repeats=1):
    """Samples from every sequence; adaptive draws use one child rng per (repeat, sequence)."""
    parts = []
    children = np.random.SeedSequence(seed).spawn(repeats * len(seqs))
    for r in range(repeats):
        for i, seq in enumerate(seqs):
            rng = np.random.default_rng(children[r * len(seqs) + i])
            parts.append(extrap_samples(seq, fps, rng, bins))
    return ExtrapSamples.concat(parts)


# ---------------------------------------------------------------------------
# method comparison

BASELINES = ("repeat", "linear", "exponential")


def _frames(values, times):
    return [DepthFrame(v, int(t)) for v, t in zip(values, times)]


def predict(method, samples, model=None):
    """(N, H, W) predictions for a baseline name or a trained model."""
    if method == "repeat":
        return samples.prior.copy()
    if method == "linear":
        return np.stack([extrap.baseline_linear(_frames(h, ht), int(t)).values
                         for h, ht, t in zip(samples.history, samples.history_t,
                                             samples.t_target)])
    if method == "exponential":
        return np.stack([extrap.baseline_exponential(_frames(h[-2:], ht[-2:]), int(t)).values
                         for h, ht, t in zip(samples.history, samples.history_t,
                                             samples.t_target)])
    if model is None:
        raise ValueError(f"method {method!r} needs a model")
    cfg = model.config
    if samples.prior.shape[1:] != (cfg.height, cfg.width):
        raise ValueError(f"model geometry {(cfg.height, cfg.width)} does not match samples "
                         f"{samples.prior.shape[1:]}")
    return extrap.predict_batch(model, samples.prior, samples.voxel)


def score(pred, target):
    acc = Accumulator()
    for p, t in zip(pred, target):
        if (t > 0).any() and (p > 0).any() and ((t > 0) & (p > 0)).any():
            acc.add(p, t)
    return acc.result()


def compare(samples, models=None, methods=BASELINES):
    """{method: DepthMetrics} over the same samples; ``models`` maps extra names to models."""
    out = {m: score(predict(m, samples), samples.target) for m in methods}
    for name, model in (models or {}).items():
        out[name] = score(predict(name, samples, model), samples.target)
    return out
