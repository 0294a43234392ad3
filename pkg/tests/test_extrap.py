import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from neurolidar import nn
from neurolidar.depth import DepthFrame
from neurolidar.extrap import (ExtrapDataset, ExtrapolatorConfig, ExtrapolatorModel, LossWeights,
                               ResConv, TrainConfig, baseline_exponential, baseline_linear,
                               baseline_repeat, event_input, extrapolate, predict_batch,
                               total_loss, train_extrapolator)
from neurolidar.nn.tensor import Parameter, Tensor


def direct_loss(p, t, w=(1.0, 10.0, 0.01, 1.0), k=7, c1=1e-4, c2=9e-4):
    """Every term written out with explicit loops over pixels and windows."""
    n, _, h, wd = p.shape
    m = t > 0
    sq, cnt = 0.0, 0
    g, nrm, cnt2 = 0.0, 0.0, 0
    ss, cnt3 = 0.0, 0
    for b in range(n):
        P, Q, M = p[b, 0], t[b, 0], m[b, 0]
        for i in range(h):
            for j in range(wd):
                if M[i, j]:
                    sq += (P[i, j] - Q[i, j]) ** 2
                    cnt += 1
                if i < h - 1 and j < wd - 1 and M[i, j] and M[i, j + 1] and M[i + 1, j]:
                    pdx, pdy = P[i, j + 1] - P[i, j], P[i + 1, j] - P[i, j]
                    tdx, tdy = Q[i, j + 1] - Q[i, j], Q[i + 1, j] - Q[i, j]
                    g += abs(pdx - tdx) + abs(pdy - tdy)
                    np_ = np.array([-pdx, -pdy, 1.0])
                    nt = np.array([-tdx, -tdy, 1.0])
                    nrm += 1 - np_ @ nt / (np.linalg.norm(np_) * np.linalg.norm(nt))
                    cnt2 += 1
        for i in range(h - k + 1):
            for j in range(wd - k + 1):
                if not M[i:i + k, j:j + k].all():
                    continue
                a, c = P[i:i + k, j:j + k], Q[i:i + k, j:j + k]
                ma, mc = a.mean(), c.mean()
                cov = ((a - ma) * (c - mc)).mean()
                s = ((2 * ma * mc + c1) * (2 * cov + c2)
                     / ((ma ** 2 + mc ** 2 + c1) * (a.var() + c.var() + c2)))
                ss += s
                cnt3 += 1
    terms = [sq / cnt, g / cnt2 if cnt2 else 0.0, nrm / cnt2 if cnt2 else 0.0,
             (1 - ss / cnt3) / 2 if cnt3 else 0.0]
    return sum(wi * ti for wi, ti in zip(w, terms)), terms


@pytest.mark.parametrize("seed", range(4))
def test_total_loss_matches_direct_formula(seed):
    r = np.random.default_rng(seed)
    p = r.uniform(0.05, 1, (2, 1, 10, 9))
    t = r.uniform(0.05, 1, (2, 1, 10, 9))
    t[r.random(t.shape) < 0.1 * seed] = 0.0
    got, parts = total_loss(Tensor(p), t, parts=True)
    ref, terms = direct_loss(p, t)
    assert got.item() == pytest.approx(ref, abs=1e-6)
    for name, v in zip(("depth", "grad", "norm", "ssim"), terms):
        assert parts[name] == pytest.approx(v, abs=1e-6)


def test_total_loss_identity_is_zero(rng):
    t = rng.uniform(0.1, 1, (2, 1, 12, 12))
    assert total_loss(Tensor(t), t).item() == pytest.approx(0.0, abs=1e-12)


@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_total_loss_constant_pair(a, b):
    p = np.full((1, 1, 8, 8), a)
    t = np.full((1, 1, 8, 8), b)
    c1 = 1e-4
    ssim = (2 * a * b + c1) / (a * a + b * b + c1)
    expect = (a - b) ** 2 + (1 - ssim) / 2
    assert total_loss(Tensor(p), t).item() == pytest.approx(expect, rel=1e-9, abs=1e-12)


def test_total_loss_weights_select_terms(rng):
    p = rng.uniform(0.1, 1, (1, 1, 9, 9))
    t = rng.uniform(0.1, 1, (1, 1, 9, 9))
    _, parts = total_loss(Tensor(p), t, parts=True)
    only_grad = total_loss(Tensor(p), t, LossWeights(0, 1, 0, 0)).item()
    assert only_grad == pytest.approx(parts["grad"])


def test_total_loss_errors():
    with pytest.raises(ValueError):
        total_loss(Tensor(np.ones((1, 1, 8, 8))), np.zeros((1, 1, 8, 8)))
    with pytest.raises(ValueError):
        total_loss(Tensor(np.ones((1, 1, 8, 8))), np.ones((1, 1, 8, 7)))
    with pytest.raises(ValueError):
        LossWeights(grad=-1)


def test_total_loss_gradient(rng):
    t = rng.uniform(0.1, 1, (1, 1, 9, 9))
    t[0, 0, 2, 3] = 0
    rep = nn.finite_diff_check(lambda p: total_loss(p, t), Tensor(rng.uniform(0.1, 1, t.shape)))
    assert rep.passed, rep.worst


def _zero(block):
    for p in block.parameters():
        p.data[...] = 0


def test_resconv_zero_kernels_give_zero(rng):
    block = ResConv(3, 4, rng)
    _zero(block)
    out = block(Tensor(rng.standard_normal((1, 3, 5, 5)).astype(np.float32)))
    assert np.all(out.data == 0)


def test_resconv_identity_path(rng):
    # zero 3x3 conv and identity 1x1 conv reduce the block to ReLU
    block = ResConv(2, 2, rng)
    _zero(block)
    block.conv1.weight.data[...] = np.eye(2, dtype=np.float32)[:, :, None, None]
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(block(Tensor(x)).data, np.maximum(x, 0), atol=1e-7)


def test_resconv_is_relu_of_sum(rng):
    block = ResConv(3, 5, rng)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)).astype(np.float32))
    ref = np.maximum(block.conv3(x).data + block.conv1(x).data, 0)
    np.testing.assert_allclose(block(x).data, ref, atol=1e-6)
    no_skip = ResConv(3, 5, rng, skip=False)
    np.testing.assert_allclose(no_skip(x).data, np.maximum(no_skip.conv3(x).data, 0), atol=1e-6)


def small_config(**kw):
    return ExtrapolatorConfig(**{"height": 16, "width": 16, "bins": 3, "widths": (4, 8),
                                 "bottleneck": 8, "max_range": 10.0, **kw})


@pytest.mark.parametrize("name", ["full", "no_event", "event_frame", "data_concat", "no_skip",
                                  "separable"])
def test_variants_shape_and_sign(rng, name):
    cfg = ExtrapolatorConfig.variant(name, height=16, width=16, bins=3, widths=(4, 8),
                                     bottleneck=8, max_range=10.0)
    model = ExtrapolatorModel(cfg, seed=1)
    prior = DepthFrame(rng.uniform(0, 10, (16, 16)), 0)
    vox = rng.integers(-3, 4, (3, 16, 16)).astype(np.float32)
    out = extrapolate(model, prior, vox, 500)
    assert out.geometry == (16, 16) and out.timestamp == 500
    assert np.all(out.values >= 0)


def test_variant_errors():
    with pytest.raises(ValueError):
        ExtrapolatorConfig.variant("bogus")
    with pytest.raises(ValueError):
        ExtrapolatorConfig(height=20, width=16, widths=(4, 8, 16))
    model = ExtrapolatorModel(small_config())
    with pytest.raises(ValueError):
        extrapolate(model, DepthFrame(np.ones((8, 8)), 0), np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        extrapolate(model, DepthFrame(np.ones((16, 16)), 0), np.zeros((4, 16, 16)))


def test_event_input_modes(rng):
    v = rng.integers(-20, 20, (3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(event_input(v, small_config(events="none")), 0)
    framed = event_input(v, small_config(events="frame"))
    np.testing.assert_allclose(framed[0], np.clip(v.sum(0), -10, 10) / 10)
    assert np.all(framed[0] == framed[2])
    assert np.abs(event_input(v, small_config())).max() <= 1.0


def test_no_event_ignores_events(rng):
    model = ExtrapolatorModel(small_config(events="none"))
    prior = DepthFrame(rng.uniform(1, 9, (16, 16)), 0)
    a = extrapolate(model, prior, rng.standard_normal((3, 16, 16)))
    b = extrapolate(model, prior, np.zeros((3, 16, 16)))
    np.testing.assert_array_equal(a.values, b.values)


def _toy_dataset(rng, n=24):
    # target = prior shifted by the event polarity, so only the events explain the shift
    prior = rng.uniform(3, 7, (n, 16, 16)).astype(np.float32)
    sign = rng.choice([-1.0, 1.0], (n, 1, 1, 1)).astype(np.float32)
    voxel = np.broadcast_to(8 * sign, (n, 3, 16, 16)).copy()
    target = (prior + 1.5 * sign[:, 0]).astype(np.float32)
    return ExtrapDataset(prior, voxel, target)


def test_training_is_deterministic_and_learns(rng):
    ds = _toy_dataset(rng, 32)
    tc = TrainConfig(epochs=30, batch_size=8, lr=1e-2, seed=5, weights=LossWeights(1, 0, 0, 0))
    m1, h1 = train_extrapolator(ds, small_config(), tc)
    m2, h2 = train_extrapolator(ds, small_config(), tc)
    assert [r["train_loss"] for r in h1] == [r["train_loss"] for r in h2]
    for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert h1[-1]["train_loss"] < 0.2 * h1[0]["train_loss"]
    err = np.abs(predict_batch(m1, ds.prior, ds.voxel) - ds.target).mean()
    # an event-blind model cannot do better than splitting the difference
    blind, _ = train_extrapolator(ds, small_config(events="none"), tc)
    err_blind = np.abs(predict_batch(blind, ds.prior, ds.voxel) - ds.target).mean()
    assert err < 0.8 < 1.2 < err_blind


def test_training_rejects_empty():
    with pytest.raises(ValueError):
        train_extrapolator(ExtrapDataset(np.zeros((0, 16, 16)), np.zeros((0, 3, 16, 16)),
                                         np.zeros((0, 16, 16))), small_config())


# ---------------------------------------------------------------------------
# baselines

def test_repeat_baseline():
    f = DepthFrame(np.full((3, 3), 4.0), 100)
    out = baseline_repeat(f, 900)
    assert out.timestamp == 900
    np.testing.assert_array_equal(out.values, f.values)


def test_linear_recovers_ramp():
    frames = [DepthFrame(np.full((2, 2), 5 + 0.001 * t), t) for t in (0, 1000, 2000)]
    out = baseline_linear(frames, 3000)
    np.testing.assert_allclose(out.values, 8.0, rtol=1e-6)
    const = [DepthFrame(np.full((2, 2), 7.0), t) for t in (0, 10, 20)]
    np.testing.assert_allclose(baseline_linear(const, 999).values, 7.0)


@given(hnp.arrays(np.float64, 3, elements=st.floats(0.5, 50)),
       st.floats(-0.01, 0.01), st.integers(1, 5000))
def test_linear_exact_on_lines(offsets, slope, dt):
    frames = [DepthFrame(np.full((1, 3), 0.0) + offsets + slope * t + 100, t)
              for t in (0, dt, 2 * dt)]
    out = baseline_linear(frames, 3 * dt)
    np.testing.assert_allclose(out.values[0], offsets + slope * 3 * dt + 100, rtol=1e-5)


def test_linear_invalid_and_clamp():
    frames = [DepthFrame(np.array([[3.0, 1.0]]), 0), DepthFrame(np.array([[0.0, 0.5]]), 10)]
    out = baseline_linear(frames, 100)
    assert out.values.tolist() == [[0.0, 0.0]]
    with pytest.raises(ValueError):
        baseline_linear(frames[:1], 5)


def test_exponential_geometric():
    frames = [DepthFrame(np.full((2, 2), 8.0), 0), DepthFrame(np.full((2, 2), 4.0), 100)]
    np.testing.assert_allclose(baseline_exponential(frames, 200).values, 2.0)
    np.testing.assert_allclose(baseline_exponential(frames, 150).values, 4 / np.sqrt(2), rtol=1e-6)
    with pytest.raises(ValueError):
        baseline_exponential(frames[::-1], 200)
