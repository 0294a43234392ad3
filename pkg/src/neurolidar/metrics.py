"""Depth accuracy metrics over the jointly valid pixel mask."""
import csv
from dataclasses import asdict, dataclass

import numpy as np

PRED_FLOOR = 1e-3
DELTA_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)
CSV_COLUMNS = ("method", "fps", "rmse", "log_rmse", "abs_rel", "sq_rel", "d1", "d2", "d3",
               "valid_px")


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    log_rmse: float
    abs_rel: float
    sq_rel: float
    d1: float
    d2: float
    d3: float
    valid_px: int

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class _Sums:
    """Pixel-pooled sums; metrics of any union of frames follow from adding these."""
    n: int
    sq: float
    log_sq: float
    abs_rel: float
    sq_rel: float
    hits: tuple

    def __add__(self, other):
        return _Sums(self.n + other.n, self.sq + other.sq, self.log_sq + other.log_sq,
                     self.abs_rel + other.abs_rel, self.sq_rel + other.sq_rel,
                     tuple(a + b for a, b in zip(self.hits, other.hits)))

    def metrics(self):
        n = self.n
        return DepthMetrics(float(np.sqrt(self.sq / n)), float(np.sqrt(self.log_sq / n)),
                            self.abs_rel / n, self.sq_rel / n,
                            *(h / n for h in self.hits), n)


def _values(x):
    return np.asarray(x.values if hasattr(x, "values") else x, dtype=np.float64)


def _sums(pred, target):
    p = _values(pred)
    t = _values(target)
    if p.shape != t.shape:
        raise ValueError(f"geometry mismatch: {p.shape} vs {t.shape}")
    mask = (t > 0) & (p > 0)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no jointly valid pixels")
    t = t[mask]
    p_raw = p[mask]
    p = np.maximum(p_raw, PRED_FLOOR)
    err = t - p_raw
    ratio = np.maximum(t / p, p / t)
    return _Sums(n, float(np.sum(err * err)), float(np.sum((np.log(t) - np.log(p)) ** 2)),
                 float(np.sum(np.abs(err) / t)), float(np.sum(err * err / t)),
                 tuple(int(np.sum(ratio < th)) for th in DELTA_THRESHOLDS))


def evaluate(pred, target):
    """RMSE, log RMSE, AbsRel, SqRel and delta accuracies.

    Valid pixels have target > 0 and pred > 0; predictions are floored at 1 mm
    before logs and ratios. Deltas use a strict ``<``.
    """
    return _sums(pred, target).metrics()


class Accumulator:
    """Streaming pixel-pooled aggregation."""

    def __init__(self):
        self._sums = None

    def add(self, pred, target):
        s = _sums(pred, target)
        self._sums = s if self._sums is None else self._sums + s
        return s.metrics()

    @property
    def count(self):
        return 0 if self._sums is None else self._sums.n

    def result(self):
        if self._sums is None:
            raise ValueError("no frames accumulated")
        return self._sums.metrics()


def aggregate(per_frame):
    """Pool per-frame metrics weighted by valid-pixel count.

    Squared errors are pooled before the square root, so the result equals a
    single evaluation over the concatenated pixels.
    """
    per_frame = list(per_frame)
    if not per_frame:
        raise ValueError("nothing to aggregate")
    n = sum(m.valid_px for m in per_frame)
    sq = sum(m.rmse ** 2 * m.valid_px for m in per_frame)
    lsq = sum(m.log_rmse ** 2 * m.valid_px for m in per_frame)

    def wmean(attr):
        return sum(getattr(m, attr) * m.valid_px for m in per_frame) / n

    return DepthMetrics(float(np.sqrt(sq / n)), float(np.sqrt(lsq / n)), wmean("abs_rel"),
                        wmean("sq_rel"), wmean("d1"), wmean("d2"), wmean("d3"), n)


def write_csv(rows, path):
    """rows: iterable of (method, fps, DepthMetrics)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for method, fps, m in rows:
            w.writerow([method, fps, f"{m.rmse:.6f}", f"{m.log_rmse:.6f}", f"{m.abs_rel:.6f}",
                        f"{m.sq_rel:.6f}", f"{m.d1:.6f}", f"{m.d2:.6f}", f"{m.d3:.6f}",
                        m.valid_px])
