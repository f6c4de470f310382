import numpy as np
import pytest

import dimmpim.sim as simmod
from dimmpim.config import GiB, default_config, kv_bytes_per_token
from dimmpim.sim import POLICIES, AuditError, baseline_run, decode_iteration_ns, make_system, run_simulation
from dimmpim.trace import Trace, TraceRecord, named_trace

CFG = default_config("GPT-89B", scheduler={"predictor": "oracle"})


def _small(n=12, seed=0):
    return named_trace("Dolphin", n, seed=seed, scale=0.05)


def test_empty_trace():
    m = run_simulation(Trace([], "empty"), CFG, "l3")
    assert m.iterations == 0 and m.output_tokens == 0 and m.throughput == 0.0


@pytest.mark.parametrize("policy", POLICIES)
def test_policies_conserve_tokens(policy):
    tr = _small()
    m = run_simulation(tr, CFG, policy)
    assert m.requests_done == len(tr)
    assert m.output_tokens == sum(r.output_len for r in tr.records)
    assert m.throughput == pytest.approx(m.output_tokens / (m.makespan_ns * 1e-9))
    for dev, busy in m.busy.items():
        assert 0 <= busy <= m.makespan_ns * (1 + 1e-9), dev


def test_learned_predictor_run():
    cfg = CFG.replace(scheduler={"predictor": "learned"})
    m = run_simulation(_small(20), cfg, "l3", seed=3)
    assert m.requests_done == 20
    assert len(m.samples) > 0


def test_deterministic():
    tr = _small(15, seed=2)
    a = run_simulation(tr, CFG.replace(scheduler={"predictor": "learned"}), "l3", seed=1).summary()
    b = run_simulation(tr, CFG.replace(scheduler={"predictor": "learned"}), "l3", seed=1).summary()
    assert a == b


def test_single_decode_request_tbt_stream():
    tr = Trace([TraceRecord(0, 1, 6000)], "one")
    m = run_simulation(tr, CFG, "l3")
    assert len(m.tbt) == 5999
    td = [max(p.t_d for p in rep.phases) for rep in m.reports if rep.n_decode]
    assert len(td) == 5999
    assert np.all(np.diff(td) >= 0)
    assert td[-1] > td[0]


def test_timeline_and_audit_clean():
    m = run_simulation(_small(), CFG, "l3", keep_timeline=True)
    assert m.timeline
    assert simmod.overlap_audit(m.timeline) == []
    kinds = {iv.kind for iv in m.timeline}
    assert {"fc", "compute"} <= kinds


def test_audit_failure_raises(monkeypatch):
    monkeypatch.setattr(simmod, "overlap_audit", lambda iv: [("a", "injected")])
    with pytest.raises(AuditError, match="injected"):
        run_simulation(_small(3), CFG, "l3")


def test_capacity_ratio_175b():
    cfg = default_config("GPT-175B")
    host = make_system(cfg, "l3").capacity
    gpu = make_system(cfg, "gpu_only").capacity
    # about 310 GB left on the GPUs after the weights
    assert gpu / 1e9 == pytest.approx(339, rel=0.1)
    assert host / gpu == pytest.approx(6.4, rel=0.05)


def test_admission_bounded_by_capacity():
    kvb = kv_bytes_per_token(CFG.model)
    recs = [TraceRecord(i, 100, 50) for i in range(30)]
    cap = kvb * 150 * 7.5  # room for 7 requests
    m = run_simulation(Trace(recs, "c"), CFG, "l3", capacity=cap)
    assert m.max_decode_batch <= 7
    assert m.requests_done == 30


def test_oversized_request_rejected():
    m = run_simulation(Trace([TraceRecord(0, 10**6, 10)], "big"), CFG, "l3", capacity=GiB)
    assert m.rejected == 1 and m.requests_done == 0


def test_poisson_arrivals_idle_gaps():
    tr = named_trace("OpenR1", 5, seed=0, scale=0.01, rate=0.5)
    m = run_simulation(tr, CFG, "l3")
    assert m.makespan_ns >= tr.records[-1].arrival * 1e9


def test_baseline_run_rejects_l3():
    with pytest.raises(ValueError):
        baseline_run(_small(2), CFG, "l3")
    with pytest.raises(ValueError):
        make_system(CFG, "tpu")


def test_decode_iteration_helper():
    rep = decode_iteration_ns(CFG, "l3", [1000] * 8)
    assert rep.n_decode == 8 and rep.prefill_tokens == 0 and rep.duration_ns > 0
    with pytest.raises(ValueError):
        decode_iteration_ns(CFG, "l3", [10**7] * 100)


def test_scheduler_variants_run():
    tr = _small(10)
    for pol in ("prefill-priority", "single-batch"):
        m = run_simulation(tr, CFG.replace(scheduler={"policy": pol}), "l3")
        assert m.requests_done == 10
