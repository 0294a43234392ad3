import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from neurolidar.depth import DepthFrame
from neurolidar.metrics import Accumulator, CSV_COLUMNS, aggregate, evaluate, write_csv


def pixel_oracle(pred, target):
    """Per-pixel loop over jointly valid pixels."""
    rows = []
    for p, t in zip(pred.ravel().tolist(), target.ravel().tolist()):
        if t > 0 and p > 0:
            pf = max(p, 1e-3)
            rows.append((t - p, math.log(t) - math.log(pf), t, max(t / pf, pf / t)))
    n = len(rows)
    return {
        "rmse": math.sqrt(sum(e * e for e, *_ in rows) / n),
        "log_rmse": math.sqrt(sum(le * le for _, le, *_ in rows) / n),
        "abs_rel": sum(abs(e) / t for e, _, t, _ in rows) / n,
        "sq_rel": sum(e * e / t for e, _, t, _ in rows) / n,
        "d1": sum(r < 1.25 for *_, r in rows) / n,
        "d2": sum(r < 1.25 ** 2 for *_, r in rows) / n,
        "d3": sum(r < 1.25 ** 3 for *_, r in rows) / n,
        "valid_px": n,
    }


@pytest.mark.parametrize("seed", range(5))
def test_matches_pixel_oracle(seed):
    r = np.random.default_rng(seed)
    t = r.uniform(0.5, 30, (8, 8))
    p = t * r.uniform(0.4, 2.5, (8, 8))
    t[r.random((8, 8)) < 0.2] = 0
    p[r.random((8, 8)) < 0.2] = 0
    p[0, 0], t[0, 0] = 1e-4, 2.0
    got = evaluate(p, t).as_dict()
    ref = pixel_oracle(p, t)
    for k, v in ref.items():
        assert got[k] == pytest.approx(v, rel=1e-9), k


def test_worked_example():
    # 4 vs 5 m: error 1, ratio 1.25 sits exactly on the first threshold
    m = evaluate(np.array([[4.0]]), np.array([[5.0]]))
    assert m.rmse == pytest.approx(1.0)
    assert m.abs_rel == pytest.approx(0.2)
    assert m.sq_rel == pytest.approx(0.2)
    assert m.log_rmse == pytest.approx(math.log(1.25))
    assert (m.d1, m.d2, m.d3) == (0.0, 1.0, 1.0)


def test_depthframe_inputs_and_errors():
    a = DepthFrame(np.full((2, 2), 3.0), 0)
    assert evaluate(a, a).rmse == 0
    with pytest.raises(ValueError):
        evaluate(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        evaluate(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        Accumulator().result()
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_equals_pooled_pixels():
    r = np.random.default_rng(0)
    frames = []
    for n in (3, 10, 40):
        t = r.uniform(1, 20, (1, n))
        frames.append((t * r.uniform(0.7, 1.4, t.shape), t))
    pooled = evaluate(np.concatenate([p for p, _ in frames], 1),
                      np.concatenate([t for _, t in frames], 1))
    agg = aggregate(evaluate(p, t) for p, t in frames)
    acc = Accumulator()
    for p, t in frames:
        acc.add(p, t)
    for m in (agg, acc.result()):
        for k, v in pooled.as_dict().items():
            assert getattr(m, k) == pytest.approx(v, rel=1e-9)
    assert acc.count == 53
    # pooling is not the mean of per-frame RMSEs
    assert agg.rmse != pytest.approx(np.mean([evaluate(p, t).rmse for p, t in frames]))


pos = hnp.arrays(np.float64, (3, 3), elements=st.floats(0.01, 100))


@given(pos, pos)
def test_delta_symmetric_and_ordered(p, t):
    a, b = evaluate(p, t), evaluate(t, p)
    assert (a.d1, a.d2, a.d3) == (b.d1, b.d2, b.d3)
    assert a.rmse == pytest.approx(b.rmse)
    assert a.log_rmse == pytest.approx(b.log_rmse)
    assert 0 <= a.d1 <= a.d2 <= a.d3 <= 1


@given(pos)
def test_perfect_prediction(t):
    m = evaluate(t, t)
    assert (m.rmse, m.abs_rel, m.d1) == (0, 0, 1)


def test_csv_layout(tmp_path):
    m = evaluate(np.array([[4.0]]), np.array([[5.0]]))
    write_csv([("repeat", 10, m), ("ours", "adaptive", m)], tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[1][:3] == ["repeat", "10", "1.000000"]
    assert rows[2][1] == "adaptive" and rows[2][-1] == "1"
