import numpy as np
import pytest
from hypothesis import given, strategies as st

from neurolidar import protocol
from neurolidar.events import build_event_frame, build_voxel_grid, slice_stream
from neurolidar.scene import SceneConfig, generate_sequence, random_scene


@pytest.fixture(scope="module")
def seq():
    cfg = SceneConfig(height=16, width=16, duration_s=2.0, max_range=50.0, seed=11)
    return generate_sequence(cfg, *random_scene(cfg, np.random.default_rng(11), (5.0, 15.0)))


def test_fixed_sampling(seq):
    assert protocol.sample_times(seq, 10) == list(range(0, 200, 10))
    assert protocol.sample_times(seq, 50)[:3] == [0, 2, 4]
    for bad in (3, 0, 300, []):
        with pytest.raises(ValueError):
            protocol.sample_times(seq, bad)
    with pytest.raises(ValueError):
        protocol.sample_times(seq, (5, 10))


@given(st.integers(0, 2**32 - 1))
def test_adaptive_gaps_come_from_the_set(seq, s):
    idx = protocol.sample_times(seq, protocol.FPS_SET, np.random.default_rng(s))
    assert idx[0] == 0 and idx[-1] < len(seq.depth)
    assert set(np.diff(idx)) <= {50, 20, 10, 5, 2}


def test_adaptive_draws_every_rate(seq):
    rng = np.random.default_rng(0)
    gaps = np.concatenate([np.diff(protocol.sample_times(seq, protocol.FPS_SET, rng))
                           for _ in range(300)])
    counts = np.array([np.sum(gaps == g) for g in (50, 20, 10, 5, 2)])
    # every rate is drawn; the final gap is truncated by the horizon, so no exact frequencies
    assert np.all(counts > 0)


def test_sample_fields(seq):
    s = protocol.extrap_samples(seq, 10, bins=4)
    assert len(s) == 17
    for k in (0, 5, 16):
        a, b = seq.index_of(int(s.t_prior[k])), seq.index_of(int(s.t_target[k]))
        assert b - a == 10 and s.fps[k] == 10
        np.testing.assert_array_equal(s.prior[k], seq.depth[a].values)
        np.testing.assert_array_equal(s.target[k], seq.depth[b].values)
        np.testing.assert_array_equal(
            s.voxel[k], build_voxel_grid(slice_stream(seq.events, s.t_prior[k], s.t_target[k]),
                                         4).values)
        # history holds the three latest sampled frames, ending with the prior
        assert list(s.history_t[k]) == [s.t_prior[k] - 200_000, s.t_prior[k] - 100_000,
                                        s.t_prior[k]]
        np.testing.assert_array_equal(s.history[k, -1], s.prior[k])
    assert np.all(s.gap_us == 100_000)
    ds = s.dataset()
    assert len(ds) == 17 and ds.voxel.shape == (17, 4, 16, 16)


def test_corpus_is_seeded(seq):
    a = protocol.extrap_corpus([seq, seq], protocol.FPS_SET, seed=4, repeats=2)
    b = protocol.extrap_corpus([seq, seq], protocol.FPS_SET, seed=4, repeats=2)
    c = protocol.extrap_corpus([seq, seq], protocol.FPS_SET, seed=5, repeats=2)
    np.testing.assert_array_equal(a.t_target, b.t_target)
    assert not np.array_equal(a.fps, c.fps) or not np.array_equal(a.t_target, c.t_target)
    with pytest.raises(ValueError):
        protocol.extrap_corpus([], 10)


def test_compare_repeat_is_exact_when_static(seq):
    s = protocol.extrap_samples(seq, 10)
    still = protocol.ExtrapSamples(s.prior, s.voxel, s.prior.copy(), s.history, s.history_t,
                                   s.t_prior, s.t_target, s.fps)
    res = protocol.compare(still)
    assert res["repeat"].rmse == 0.0
    assert set(res) == set(protocol.BASELINES)
    with pytest.raises(ValueError):
        protocol.predict("ours", s)


def test_detector_samples(seq):
    d = protocol.detector_samples(seq, 20_000, seq_index=3)
    assert len(d) == 99
    assert list(d.times[:3]) == [20_000, 40_000, 60_000]
    assert np.all(d.source[:, 0] == 3)
    np.testing.assert_array_equal(
        d.frames[4], build_event_frame(slice_stream(seq.events, 80_000, 100_000)).values)
    assert all(bool(r) == y for r, y in zip(d.rules, d.labels))
    man = d.manifest(["s0", "s1", "s2", "s3"])
    assert man[0]["sequence"] == "s3" and man[0]["t"] == 20_000


def test_corpus_roundtrip(tmp_path, seq):
    protocol.save_corpus([seq, seq], tmp_path / "c", {"seed": 1})
    seqs, man = protocol.load_corpus(tmp_path / "c")
    assert man["sequences"] == ["seq_0000", "seq_0001"] and man["seed"] == 1
    assert seqs[1].events == seq.events


def test_generate_corpus_is_seeded():
    cfg = SceneConfig(height=8, width=8, duration_s=0.2)
    a = protocol.generate_corpus(cfg, 2, seed=9)
    b = protocol.generate_corpus(cfg, 2, seed=9)
    assert a[0].events == b[0].events and a[1].config.seed == b[1].config.seed
    assert a[0].config.seed != a[1].config.seed


def test_split():
    assert protocol.split(list(range(10)), 0.2) == (list(range(8)), [8, 9])
    assert protocol.split([1], 0.2) == ([1], [])
    assert protocol.split(list(range(5)), 0.0) == (list(range(5)), [])
