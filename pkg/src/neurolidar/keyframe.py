"""Keyframe labels from scene state and a small CNN that predicts them from event frames."""
import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import functional as F
from .nn.losses import bce_loss
from .nn.tensor import Tensor, no_grad, relu, sigmoid

log = logging.getLogger(__name__)

RULES = ("speed", "proximity", "new_object")
FRAME_CLIP = 10.0


@dataclass(frozen=True)
class KeyframeRuleConfig:
    speed: float = 10.0
    distance: float = 8.0
    new_object: bool = True

    def __post_init__(self):
        if not (self.speed > 0 and self.distance > 0):
            raise ValueError("rule thresholds must be positive")


@dataclass(frozen=True)
class KeyframeLabel:
    t: int
    label: bool
    rules: frozenset

    def __post_init__(self):
        if self.label != bool(self.rules):
            raise ValueError("label must be true exactly when some rule fired")


def label_keyframe(prev, now, rules=KeyframeRuleConfig()):
    if now.t <= prev.t:
        raise ValueError("states must be strictly time-ordered")
    fired = set()
    if now.ego_speed > rules.speed:
        fired.add("speed")
    near = [d for d, vis in zip(now.distances, now.visible) if vis]
    if near and min(near) < rules.distance:
        fired.add("proximity")
    if rules.new_object and any(v and not pv for v, pv in zip(now.visible, prev.visible)):
        fired.add("new_object")
    return KeyframeLabel(now.t, bool(fired), frozenset(fired))


# ---------------------------------------------------------------------------
# detector

class DetectorModel(nn.Module):
    """Three stride-2 3x3 conv + ReLU blocks, global average pool, dense, sigmoid."""

    def __init__(self, height=64, width=64, widths=(16, 32, 64), seed=0):
        rng = np.random.default_rng(seed)
        self.height = height
        self.width = width
        self.widths = tuple(widths)
        self.convs = []
        c = 1
        for w in widths:
            self.convs.append(nn.Conv2d(c, w, 3, rng, stride=2, padding=1))
            c = w
        self.fc = nn.Linear(c, 1, rng)

    @property
    def geometry(self):
        return (self.height, self.width)

    def forward(self, x):
        for conv in self.convs:
            x = relu(conv(x))
        return sigmoid(self.fc(F.global_avg_pool(x)))


def detector_input(frames):
    """Event-frame counts (N, H, W) -> clipped, scaled float32 (N, 1, H, W)."""
    v = np.asarray(frames, dtype=np.float32)
    return (np.clip(v, -FRAME_CLIP, FRAME_CLIP) / FRAME_CLIP)[:, None]


def _check_geometry(model, shape):
    if tuple(shape) != model.geometry:
        raise ValueError(f"frame geometry {tuple(shape)} does not match detector "
                         f"{model.geometry}")


def detector_forward(model, frame):
    values = frame.values if hasattr(frame, "values") else np.asarray(frame)
    _check_geometry(model, values.shape)
    with no_grad():
        return float(model(Tensor(detector_input(values[None]))).data[0, 0])


def predict_proba(model, frames, batch_size=256):
    frames = np.asarray(frames)
    _check_geometry(model, frames.shape[1:])
    out = []
    with no_grad():
        for s in range(0, len(frames), batch_size):
            out.append(model(Tensor(detector_input(frames[s:s + batch_size]))).data[:, 0])
    return np.concatenate(out) if out else np.empty(0, np.float32)


@dataclass
class DetectorTrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    balance_classes: bool = False   # inverse-frequency BCE weights instead of plain BCE


def class_weights(labels):
    """Inverse-frequency weights so both classes carry equal total weight."""
    y = np.asarray(labels, bool)
    n, npos = len(y), int(y.sum())
    if npos == 0 or npos == n:
        raise ValueError("training set must contain both classes")
    return np.where(y, n / (2.0 * npos), n / (2.0 * (n - npos)))


def train_detector(frames, labels, config=None, val=None, log_fn=None):
    """BCE NAdam training. ``val`` is an optional (frames, labels) pair.

    Returns (model, history); each history row holds epoch, lr, train_loss and
    val_f1 (computed on the training set when ``val`` is None).
    """
    cfg = config or DetectorTrainConfig()
    frames = np.asarray(frames)
    y = np.asarray(labels, bool)
    if len(frames) == 0:
        raise ValueError("empty training set")
    if len(frames) != len(y):
        raise ValueError("frames and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("training set must contain both classes")
    weights = class_weights(y) if cfg.balance_classes else np.ones(len(y))
    model = DetectorModel(frames.shape[1], frames.shape[2], seed=cfg.seed)
    opt = nn.NAdam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    x_all = detector_input(frames)
    target = y.astype(np.float32)[:, None]
    vf, vy = val if val is not None else (frames, y)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        total, wsum = 0.0, 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            w = weights[idx][:, None]
            opt.zero_grad()
            loss = bce_loss(model(Tensor(x_all[idx])), target[idx], w)
            loss.backward()
            opt.step()
            total += loss.item() * w.sum()
            wsum += w.sum()
        f1 = eval_detector(predict_proba(model, vf), vy).f1
        row = {"epoch": epoch + 1, "lr": opt.state.lr, "train_loss": total / wsum, "val_f1": f1}
        history.append(row)
        if log_fn:
            log_fn(row)
        log.debug("detector epoch %d loss %.5f f1 %.4f", epoch + 1, row["train_loss"], f1)
    return model, history


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class DetectorEval:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    fp_gaps_us: tuple = ()
    per_rule_f1: dict = None

    def as_dict(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "fp_gaps_us": list(self.fp_gaps_us), "per_rule_f1": self.per_rule_f1}


def _prf(pred, y):
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1, tp, fp, tn, fn


def fp_gaps(pred, y, times, lidar_period_us):
    """Per false positive: distance to the nearest true positive or the next LiDAR frame."""
    times = np.asarray(times, np.int64)
    tps = times[pred & y]
    gaps = []
    for t in times[pred & ~y]:
        gap = lidar_period_us - t % lidar_period_us
        if len(tps):
            gap = min(gap, int(np.min(np.abs(tps - t))))
        gaps.append(int(gap))
    return tuple(gaps)


def eval_detector(probs, labels, times=None, rule_sets=None, lidar_period_us=100_000,
                  threshold=0.5):
    """Binary metrics at ``threshold``.

    Per-rule F1 scores the positives fired by one rule against all negatives.
    """
    pred = np.asarray(probs) >= threshold
    y = np.asarray(labels, bool)
    if pred.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    p, r, f1, tp, fp, tn, fn = _prf(pred, y)
    gaps = fp_gaps(pred, y, times, lidar_period_us) if times is not None else ()
    per_rule = None
    if rule_sets is not None:
        per_rule = {}
        for rule in RULES:
            keep = np.array([(rule in rs) or not yy for rs, yy in zip(rule_sets, y)])
            if np.any(keep & y):
                per_rule[rule] = _prf(pred[keep], y[keep])[2]
    return DetectorEval(p, r, f1, tp, fp, tn, fn, gaps, per_rule)
