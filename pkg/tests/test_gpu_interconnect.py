import numpy as np
import pytest

from dimmpim.config import MODELS, DdrTiming, HwTopology, host_channel_bw
from dimmpim.gpu import (
    COMPUTE, MEMORY, decode_mha_gpu, fc_batch_cost, fc_batch_latency, overlap_headroom, prefill_mha_latency, roofline,
)
from dimmpim.interconnect import (
    ASYNC_PREFILL_KV, CRITICAL_ATTN_OUT, CRITICAL_QKV, Interval, OffloadPlan, critical_transfer_latency,
    down_latency, overlap_audit, pim_phase, plan_async_offload, qkv_bytes, receive_bw, up_latency,
)

M = MODELS["GPT-175B"]
TOPO = HwTopology()
T = DdrTiming()


def test_roofline_bounds():
    c = roofline(1e15, 1.0, TOPO)
    assert c.bound == COMPUTE
    assert c.latency == pytest.approx(1e15 / 156e12 * 1e9 / 0.6 + 5000)
    m = roofline(1.0, 1e12, TOPO)
    assert m.bound == MEMORY
    assert m.latency == pytest.approx(1e12 / 16.3e12 * 1e9 / 0.6 + 5000)
    assert roofline(0, 0, TOPO, kernels=3).latency == 15000


def test_fc_batch():
    assert fc_batch_latency(0, M, TOPO) == TOPO.launch_overhead_ns
    with pytest.raises(ValueError):
        fc_batch_cost(-1, M, TOPO)
    one = fc_batch_cost(1, M, TOPO)
    assert one.bound == MEMORY
    big = fc_batch_cost(4096, M, TOPO)
    assert big.bound == COMPUTE
    # compute-bound region is linear in tokens up to the all-reduce term
    a, b = fc_batch_latency(4096, M, TOPO), fc_batch_latency(8192, M, TOPO)
    assert b / a == pytest.approx(2.0, rel=0.01)


def test_prefill_mha():
    assert prefill_mha_latency([0, 0], [5, 5], M, TOPO) == 0.0
    with pytest.raises(ValueError):
        prefill_mha_latency([1], [1, 2], M, TOPO)
    # quadratic in chunk once compute-bound
    a = prefill_mha_latency([8192], [0], M, TOPO) - TOPO.launch_overhead_ns
    b = prefill_mha_latency([16384], [0], M, TOPO) - TOPO.launch_overhead_ns
    assert b / a == pytest.approx(4.0, rel=0.01)


def test_decode_mha_gpu_bandwidth_scaling():
    n = [6000] * 32
    g = decode_mha_gpu(n, M, TOPO)
    h = decode_mha_gpu(n, M, TOPO, bw=TOPO.hbm_pim_bw)
    cpu = decode_mha_gpu(n, M, TOPO, bw=406e9)
    assert h < g < cpu
    assert (cpu - 5000) / (g - 5000) == pytest.approx(16.3e12 / 406e9, rel=1e-6)
    assert decode_mha_gpu([], M, TOPO) == 0.0


def test_overlap_headroom():
    fc = fc_batch_cost(256, M, TOPO)
    assert overlap_headroom(fc, 0, TOPO).hidden
    small = overlap_headroom(fc, 1e6, TOPO)
    assert small.hidden and small.ratio == pytest.approx(1e6 / 32e9 * 1e9 / fc.latency)
    big = overlap_headroom(fc, 1e13, TOPO)
    assert not big.hidden and big.residual_ns > 0


def test_transfer_sizes():
    # Q, K and V of every layer down; one attention output per layer up
    assert qkv_bytes(1, M) == 3 * 12288 * 2 * 96
    d = down_latency(4, M, TOPO)
    assert d == pytest.approx(4 * 3 * 12288 * 2 * 96 / 32e9 * 1e9 + 96 * 5000)
    u = up_latency(4, M, TOPO)
    assert critical_transfer_latency(4, M, TOPO) == pytest.approx(d + u)
    assert down_latency(0, M, TOPO) == 0.0
    assert receive_bw(TOPO, T) == min(32e9, host_channel_bw(TOPO, T))


def test_offload_plan_bytes():
    plan = plan_async_offload([(0, 100), (1, 50)], M, TOPO, T)
    assert plan.bytes_per_rankset.sum() == pytest.approx(150 * 2 * 12288 * 2 * 96)
    assert plan.receive_ns.sum() == pytest.approx(plan.bytes_per_rankset.sum() / 32e9 * 1e9)
    tight = plan_async_offload([(0, 100)], M, TOPO, T, window_ns=1.0)
    assert tight.residual_ns == pytest.approx(tight.receive_ns.sum() - 1.0)
    assert plan_async_offload([], M, TOPO, T).bytes_per_rankset.sum() == 0


def _phase_oracle(C, rx, t_down, t_up):
    """Receive slots back to back in rankset order; a rankset pauses while it receives."""
    slot = 0.0
    finish, compute_end = [], []
    for c, r in zip(C, rx):
        s0, s1 = slot, slot + r
        if c > 0 and c > s0 and r > 0:
            end = c + r
            compute_end.append(end)
        else:
            end = max(c, s1)
            compute_end.append(c)
        finish.append(end)
        slot = s1
    return t_down + max(max(finish), max(compute_end) + t_up)


@pytest.mark.parametrize("C,rx", [
    ([5e6, 4e6, 3e6, 1e6], [1e6, 1e6, 1e6, 1e6]),
    ([0, 0, 0, 0], [2e6, 0, 1e6, 0]),
    ([1e5, 9e6, 0, 3e6], [4e6, 4e6, 4e6, 0]),
])
def test_pim_phase_vs_oracle(C, rx):
    plan = OffloadPlan(np.array(rx) * 32e9 / 1e9, np.array(rx, dtype=float))
    ph = pim_phase(np.array(C, dtype=float), plan, 8, M, TOPO, t0=100.0, label="x")
    want = _phase_oracle(C, rx, down_latency(8, M, TOPO), up_latency(8, M, TOPO))
    assert ph.total_ns == pytest.approx(want)
    assert overlap_audit(ph.intervals) == []
    assert ph.t_d == max(C)


def test_pim_phase_without_overlap_serializes():
    plan = OffloadPlan(np.ones(4), np.full(4, 1e6))
    C = np.array([3e6, 2e6, 1e6, 0.0])
    ph = pim_phase(C, plan, 0, M, TOPO, overlap=False)
    assert ph.total_ns == pytest.approx(3e6 + 4e6)
    assert overlap_audit(ph.intervals) == []


def test_audit_rules():
    iv = [Interval("rankset0", "compute", 0, 10, "a"), Interval("rankset0", "receive", 5, 8, "a")]
    assert [r for r, _ in overlap_audit(iv)] == ["a"]
    iv = [Interval("rankset0", "receive", 0, 10), Interval("rankset1", "receive", 2, 3),
          Interval("rankset2", "receive", 5, 12)]
    assert [r for r, _ in overlap_audit(iv)] == ["b", "b"]
    iv = [Interval("pcie_down", CRITICAL_QKV, 0, 10, "a"), Interval("rankset1", "compute", 5, 20, "a"),
          Interval("pcie_up", CRITICAL_ATTN_OUT, 15, 16, "a")]
    assert [r for r, _ in overlap_audit(iv)] == ["c", "c"]
    # different labels are independent phases
    iv = [Interval("pcie_down", CRITICAL_QKV, 0, 10, "a"), Interval("rankset1", "compute", 5, 20, "b")]
    assert overlap_audit(iv) == []
    assert ASYNC_PREFILL_KV != CRITICAL_QKV
