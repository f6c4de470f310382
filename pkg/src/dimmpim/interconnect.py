"""PCIe transfers and rankset receive/compute concurrency.

Critical transfers (decode Q/K/V down, attention output up) are vector sized
and sit on the iteration's critical path.  Prefill KV offload is
asynchronous: it lands on one rankset at a time while the others keep
computing, and a rankset pauses its own compute while it receives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import DdrTiming, HwTopology, LlmModel, host_channel_bw, kv_bytes_per_token_layer
from .mapping import layers_per_rankset

CRITICAL_QKV = "CRITICAL_QKV"
CRITICAL_ATTN_OUT = "CRITICAL_ATTN_OUT"
ASYNC_PREFILL_KV = "ASYNC_PREFILL_KV"


@dataclass(frozen=True)
class TransferTask:
    bytes: float
    kind: str
    rankset: int  # -1 for transfers addressed to every rankset
    issue: float
    complete: float


@dataclass(frozen=True)
class Interval:
    device: str  # "gpu", "pcie_down", "pcie_up", "rankset<i>"
    kind: str  # compute | receive | transfer kinds | prefill | fc
    start: float
    end: float
    label: str = ""


def qkv_bytes(n_decode: int, m: LlmModel) -> float:
    return float(n_decode) * 3 * m.embedding * m.precision_bytes * m.layers


def attn_out_bytes(n_decode: int, m: LlmModel) -> float:
    return float(n_decode) * m.embedding * m.precision_bytes * m.layers


def down_latency(n_decode: int, m: LlmModel, topo: HwTopology) -> float:
    if n_decode <= 0:
        return 0.0
    return qkv_bytes(n_decode, m) / topo.pcie_bw * 1e9 + m.layers * topo.pcie_latency_ns


def up_latency(n_decode: int, m: LlmModel, topo: HwTopology) -> float:
    if n_decode <= 0:
        return 0.0
    return attn_out_bytes(n_decode, m) / topo.pcie_bw * 1e9 + m.layers * topo.pcie_latency_ns


def critical_transfer_latency(n_decode: int, m: LlmModel, topo: HwTopology) -> float:
    """t_comm in ns: one batched transaction per layer in each direction."""
    return down_latency(n_decode, m, topo) + up_latency(n_decode, m, topo)


def receive_bw(topo: HwTopology, timing: DdrTiming) -> float:
    # one rankset = one rank on every channel
    return min(topo.pcie_bw, host_channel_bw(topo, timing))


@dataclass
class OffloadPlan:
    bytes_per_rankset: np.ndarray
    receive_ns: np.ndarray
    residual_ns: float = 0.0


def plan_async_offload(chunks, m: LlmModel, topo: HwTopology, timing: DdrTiming,
                       window_ns: float | None = None) -> OffloadPlan:
    """``chunks`` is [(request_id, chunk_tokens)]; layers rotate over ranksets as in the mapping."""
    R = topo.ranksets
    if not chunks:
        return OffloadPlan(np.zeros(R), np.zeros(R))
    ids = np.array([c[0] for c in chunks], dtype=np.int64)
    toks = np.array([c[1] for c in chunks], dtype=np.float64)
    lpr = layers_per_rankset(ids, m.layers, R)
    b = (lpr * toks[:, None]).sum(axis=0) * kv_bytes_per_token_layer(m)
    rx = b / receive_bw(topo, timing) * 1e9
    residual = max(0.0, float(rx.sum()) - window_ns) if window_ns is not None else 0.0
    return OffloadPlan(b, rx, residual)


@dataclass
class PimPhase:
    total_ns: float
    t_d: float
    t_comm: float
    t_overlap: float
    intervals: list = field(default_factory=list)
    transfers: list = field(default_factory=list)


def pim_phase(compute_ns, plan: OffloadPlan, n_decode: int, m: LlmModel, topo: HwTopology,
              overlap: bool = True, t0: float = 0.0, label: str = "") -> PimPhase:
    """Timeline of one PIM-side phase: QKV down, rankset compute with receive slots, attention out up."""
    C = np.asarray(compute_ns, dtype=np.float64)
    R = C.size
    rx = plan.receive_ns
    t_down = down_latency(n_decode, m, topo)
    t_up = up_latency(n_decode, m, topo)
    start = t0 + t_down
    iv: list[Interval] = []
    tasks: list[TransferTask] = []
    if n_decode > 0:
        iv.append(Interval("pcie_down", CRITICAL_QKV, t0, start, label))
        tasks.append(TransferTask(qkv_bytes(n_decode, m), CRITICAL_QKV, -1, t0, start))

    finish = np.zeros(R)
    if overlap:
        slot = start + np.concatenate([[0.0], np.cumsum(rx)[:-1]])
        for r in range(R):
            s0, s1 = slot[r], slot[r] + rx[r]
            if C[r] > 0 and start + C[r] > s0 and rx[r] > 0:
                # compute pauses for its own receive slot
                if s0 > start:
                    iv.append(Interval(f"rankset{r}", "compute", start, s0, label))
                iv.append(Interval(f"rankset{r}", "compute", s1, s1 + C[r] - (s0 - start), label))
                finish[r] = s1 + C[r] - (s0 - start)
            else:
                if C[r] > 0:
                    iv.append(Interval(f"rankset{r}", "compute", start, start + C[r], label))
                finish[r] = max(start + C[r], s1)
            if rx[r] > 0:
                iv.append(Interval(f"rankset{r}", "receive", s0, s1, label))
                iv.append(Interval("pcie_down", ASYNC_PREFILL_KV, s0, s1, label))
                tasks.append(TransferTask(float(plan.bytes_per_rankset[r]), ASYNC_PREFILL_KV, r, s0, s1))
    else:
        # no rankset concurrency: every receive waits for all compute
        for r in range(R):
            if C[r] > 0:
                iv.append(Interval(f"rankset{r}", "compute", start, start + C[r], label))
        cursor = start + (C.max() if R else 0.0)
        for r in range(R):
            if rx[r] > 0:
                iv.append(Interval(f"rankset{r}", "receive", cursor, cursor + rx[r], label))
                iv.append(Interval("pcie_down", ASYNC_PREFILL_KV, cursor, cursor + rx[r], label))
                tasks.append(TransferTask(float(plan.bytes_per_rankset[r]), ASYNC_PREFILL_KV, r, cursor, cursor + rx[r]))
                cursor += rx[r]
        finish[:] = cursor
    body_end = float(max(finish.max() if R else start, start))
    compute_end = max((i.end for i in iv if i.kind == "compute"), default=start)
    up_start = max(compute_end, start)
    if n_decode > 0:
        iv.append(Interval("pcie_up", CRITICAL_ATTN_OUT, up_start, up_start + t_up, label))
        tasks.append(TransferTask(attn_out_bytes(n_decode, m), CRITICAL_ATTN_OUT, -1, up_start, up_start + t_up))
    end = max(body_end, up_start + t_up)
    t_d = float(C.max()) if R else 0.0
    t_comm = t_down + t_up
    total = end - t0
    return PimPhase(total, t_d, t_comm, max(total - t_d - t_comm, 0.0), iv, tasks)


def overlap_audit(intervals, eps: float = 1e-6) -> list[tuple[str, str]]:
    """Violations as (rule, description); rules a, b, c."""
    out = []
    by_rs: dict[str, dict[str, list]] = {}
    for i in intervals:
        if i.device.startswith("rankset"):
            by_rs.setdefault(i.device, {"compute": [], "receive": []}).setdefault(i.kind, []).append(i)
    for dev, kinds in by_rs.items():
        for c in kinds["compute"]:
            for r in kinds["receive"]:
                if c.start < r.end - eps and r.start < c.end - eps:
                    out.append(("a", f"{dev} computes and receives during [{max(c.start, r.start)}, {min(c.end, r.end)})"))
    recv = sorted((i for i in intervals if i.device.startswith("rankset") and i.kind == "receive"),
                  key=lambda i: i.start)
    holder = None
    for y in recv:
        if holder is not None and y.start < holder.end - eps:
            out.append(("b", f"{holder.device} and {y.device} receive concurrently at {y.start}"))
        if holder is None or y.end > holder.end:
            holder = y
    for q in (i for i in intervals if i.kind == CRITICAL_QKV):
        for c in intervals:
            if c.kind == "compute" and c.label == q.label and c.start < q.end - eps and c.end > q.start:
                out.append(("c", f"{c.device} computes at {c.start} before QKV arrives at {q.end}"))
    for a in (i for i in intervals if i.kind == CRITICAL_ATTN_OUT):
        for c in intervals:
            if c.kind == "compute" and c.label == a.label and c.end > a.start + eps and c.start < a.end:
                out.append(("c", f"attention output leaves at {a.start} before {c.device} finishes at {c.end}"))
    return out
