import json

import numpy as np
import pytest
from sklearn.ensemble import RandomForestRegressor

from dimmpim.config import SchedulerParams
from dimmpim.predictors import FlatForest, IterationSample, LearnedPredictor, Window, relative_error
from dimmpim.trace import TRACE_PARAMS, TraceError, load_trace, named_trace, save_trace, synth_trace


def test_relative_error_hand_arithmetic():
    # |10-9|/10 = 0.1, |20-25|/20 = 0.25, |5-5|/5 = 0 -> mean 0.35 / 3
    assert relative_error([10, 20, 5], [9, 25, 5]) == pytest.approx(0.35 / 3)
    with pytest.raises(ValueError, match="length"):
        relative_error([1, 2], [1])
    with pytest.raises(ValueError):
        relative_error([], [])
    with pytest.raises(ValueError):
        relative_error([0.0], [1.0])


def test_flat_forest_matches_sklearn():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 100, size=(400, 2))
    y = X[:, 0] ** 2 + 3 * X[:, 1] + rng.normal(size=400)
    rf = RandomForestRegressor(n_estimators=16, max_depth=6, random_state=0).fit(X, y)
    Xt = rng.uniform(0, 100, size=(200, 2))
    np.testing.assert_allclose(FlatForest(rf).predict(Xt), rf.predict(Xt), rtol=1e-12)


def test_window_keeps_latest():
    w = Window(3)
    for i in range(5):
        w.add((i,), i)
    X, y = w.arrays()
    assert y.tolist() == [2.0, 3.0, 4.0]


def _sample(rng):
    sum_fd = rng.uniform(1e3, 1e6)
    n_fd = int(rng.integers(1, 100))
    sc = rng.uniform(0, 5000)
    c = int(rng.integers(16, 2000))
    return IterationSample(sum_fd, n_fd, sc, 3.0 * sum_fd + 1e4 * n_fd + 50 * sc + 1e5,
                           [(c, 0, 10.0 * c * c + 1e3)], float(c), n_fd, 2e6 + 4e3 * (c + n_fd))


def test_learned_predictor_fits_linear_truth():
    rng = np.random.default_rng(1)
    p = LearnedPredictor(SchedulerParams(), seed=0)
    assert not p.ready
    for _ in range(7):
        p.record(_sample(rng))
    assert not p.ready
    for _ in range(300):
        p.record(_sample(rng))
    assert p.ready and p.retrains >= 2
    np.testing.assert_allclose(p.coef, [3.0, 1e4, 50.0, 1e5], rtol=1e-6)
    test = [_sample(rng) for _ in range(50)]
    got = [p.t_gpu([s.prefill[0][0]], [0], s.n_fd_batch) for s in test]
    want = [s.prefill[0][2] + s.t_batch for s in test]
    assert relative_error(want, got) < 0.05
    scan = p.t_gpu_scan([], [], np.array([100, 200]), 0, 10)
    assert scan.shape == (2,)
    assert p.t_pim_scan([1e4], [0], [], 3, np.array([0, 100])).tolist() == pytest.approx(
        [p.t_pim([1e4], [0], []), p.t_pim([1e4], [0], [(3, 100)])])


def test_synth_trace_moments():
    for name, (mi, si, mo, so) in TRACE_PARAMS.items():
        tr = named_trace(name, 4000, seed=11)
        s = tr.stats()
        assert s["in_mean"] == pytest.approx(mi, rel=0.1)
        assert s["in_std"] == pytest.approx(si, rel=0.1)
        assert s["out_mean"] == pytest.approx(mo, rel=0.1)
        assert s["out_std"] == pytest.approx(so, rel=0.1)


def test_synth_constant_and_deterministic():
    tr = synth_trace(5, 100, 0, 10, 0)
    assert {r.input_len for r in tr.records} == {100}
    assert named_trace("OpenR1", 20, seed=3).records == named_trace("OpenR1", 20, seed=3).records
    with pytest.raises(TraceError):
        synth_trace(5, -1, 0, 10, 0)
    with pytest.raises(TraceError):
        named_trace("nope", 5)
    tr = synth_trace(50, 100, 10, 10, 1, rate=10.0)
    arr = [r.arrival for r in tr.records]
    assert arr == sorted(arr) and arr[0] > 0


def test_load_trace(tmp_path):
    tr = named_trace("Dolphin", 30, seed=1)
    p = tmp_path / "t.jsonl"
    save_trace(tr, p)
    back = load_trace(p)
    assert sorted(back.records, key=lambda r: r.id) == sorted(tr.records, key=lambda r: r.id)
    a = load_trace(p, sample_n=10, seed=4)
    b = load_trace(p, sample_n=10, seed=4)
    assert a.records == b.records and len(a) == 10
    with pytest.raises(TraceError, match="exceeds"):
        load_trace(p, sample_n=31)


@pytest.mark.parametrize("line,msg", [
    ({"id": 1, "input_len": 5, "output_len": 0}, "line 2"),
    ({"id": 1, "input_len": 5}, "missing"),
    ("not json", "line 2"),
])
def test_load_trace_errors(tmp_path, line, msg):
    p = tmp_path / "bad.jsonl"
    first = json.dumps({"id": 0, "input_len": 5, "output_len": 5})
    p.write_text(first + "\n" + (line if isinstance(line, str) else json.dumps(line)) + "\n")
    with pytest.raises(TraceError, match=msg):
        load_trace(p)


def test_scaled_trace():
    tr = synth_trace(10, 100, 10, 1000, 100, seed=0).scaled(0.01)
    assert all(r.input_len >= 1 and r.output_len >= 1 for r in tr.records)
