"""Iteration-level simulation of a serving run under one system policy.

Policies:

* ``l3``: GPU + DIMM-PIM with the scheduler chosen in the config
  (``l3`` interleaving, ``prefill-priority`` or ``single-batch``).
* ``gpu_only``: everything on the GPU, chunked prefill mixed into decode
  iterations, KV limited to HBM left after the weights.
* ``hbm_pim``: decode attention in HBM-PIM, HBM capacity, prefill first,
  decode in two interleaved sub-batches.
* ``rank_pim``: rank-level DIMM-PIM at a multiple of CPU bandwidth, host
  capacity, prefill first, single decode batch.
* ``cpu_offload``: decode attention on the host CPU, two interleaved
  sub-batches, no rankset receive/compute concurrency.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import SimConfig, kv_bytes_per_token
from .costs import AttnDevice, SystemCosts
from .gpu import decode_mha_gpu
from .interconnect import ASYNC_PREFILL_KV, CRITICAL_ATTN_OUT, CRITICAL_QKV, Interval, overlap_audit
from .predictors import IterationSample, LearnedPredictor, OraclePredictor
from .scheduler import Phase, Request, SubBatch, admit, build_subbatches, split_decode, take_prefill
from .trace import Trace, TraceRecord

POLICIES = ("l3", "gpu_only", "hbm_pim", "rank_pim", "cpu_offload")


class AuditError(RuntimeError):
    pass


@dataclass
class PhaseReport:
    gpu_ns: float
    pim_ns: float
    t_p: float
    t_batch: float
    t_d: float
    t_comm: float
    t_overlap: float
    gpu_bubble: float
    pim_bubble: float
    cause: str = ""


@dataclass
class LatencyReport:
    iteration: int
    start_ns: float
    duration_ns: float
    kind: str  # interleaved | prefill | decode | mixed
    phases: list = field(default_factory=list)
    n_decode: int = 0
    prefill_tokens: int = 0
    aligned: bool = False


@dataclass
class RunMetrics:
    policy: str
    trace: str = ""
    throughput: float = 0.0  # output tokens / s
    makespan_ns: float = 0.0
    output_tokens: int = 0
    requests_done: int = 0
    rejected: int = 0
    iterations: int = 0
    tbt_p50: float = 0.0
    tbt_p99: float = 0.0
    tbt_mean: float = 0.0
    ttft_p50: float = 0.0
    ttft_p99: float = 0.0
    busy: dict = field(default_factory=dict)  # device -> busy ns
    bubble: dict = field(default_factory=dict)  # device -> idle-while-other-busy ns
    bytes_critical: float = 0.0
    bytes_async: float = 0.0
    max_decode_batch: int = 0
    reports: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    tbt: list = field(default_factory=list)
    timeline: list = field(default_factory=list)
    max_chunkings: int = 0

    def summary(self) -> dict:
        keep = ("policy", "trace", "throughput", "makespan_ns", "output_tokens", "requests_done", "rejected",
                "iterations", "tbt_p50", "tbt_p99", "tbt_mean", "ttft_p50", "ttft_p99", "bytes_critical",
                "bytes_async", "max_decode_batch")
        out = {k: getattr(self, k) for k in keep}
        for dev, v in self.busy.items():
            out[f"busy_{dev}"] = v / self.makespan_ns if self.makespan_ns else 0.0
        for dev, v in self.bubble.items():
            out[f"bubble_ns_{dev}"] = v
        return out


@dataclass
class System:
    costs: SystemCosts
    mode: str  # l3 | prefill-priority | single-batch | mixed
    capacity: float
    gpu_attn_bw: float | None = None  # gpu_only: decode attention on the GPU


def make_system(cfg: SimConfig, policy: str, capacity: float | None = None) -> System:
    t, b = cfg.topology, cfg.baseline
    gpu_free = t.gpu_capacity - cfg.model.weight_bytes * cfg.model.data_parallel
    if policy == "l3":
        s = System(SystemCosts(cfg), cfg.scheduler.policy, t.host_capacity)
    elif policy == "gpu_only":
        s = System(SystemCosts(cfg, AttnDevice("bw", t.gpu_hbm_bw, pcie=False, overlap=False)), "mixed",
                   gpu_free, gpu_attn_bw=t.gpu_hbm_bw)
    elif policy == "hbm_pim":
        s = System(SystemCosts(cfg, AttnDevice("bw", t.hbm_pim_bw, pcie=False, overlap=False)),
                   "prefill-priority", gpu_free)
    elif policy == "rank_pim":
        s = System(SystemCosts(cfg, AttnDevice("bw", b.cpu_bw * b.rank_pim_factor, overlap=False)),
                   "single-batch", t.host_capacity)
    elif policy == "cpu_offload":
        s = System(SystemCosts(cfg, AttnDevice("bw", b.cpu_bw, overlap=False)), "l3", t.host_capacity)
    else:
        raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
    if capacity is not None:
        s.capacity = capacity
    if s.capacity <= 0:
        raise ValueError(f"policy {policy}: no memory left for KV cache ({s.capacity} bytes)")
    return s


def _pct(x, q):
    return float(np.percentile(x, q)) if len(x) else 0.0


class Simulation:
    def __init__(self, trace: Trace, cfg: SimConfig, policy: str = "l3", capacity: float | None = None,
                 seed: int = 0, keep_timeline: bool = False, audit: bool = True, predictor=None):
        self.cfg = cfg
        self.policy = policy
        self.sys = make_system(cfg, policy, capacity)
        self.costs = self.sys.costs
        self.kvb = kv_bytes_per_token(cfg.model)
        if predictor is not None:
            self.pred = predictor
        elif cfg.scheduler.predictor == "oracle":
            self.pred = OraclePredictor(self.costs)
        else:
            self.pred = LearnedPredictor(cfg.scheduler, seed)
        self.keep_timeline = keep_timeline
        self.audit = audit
        self.m = RunMetrics(policy, trace.name)
        self.m.busy = {"gpu": 0.0, "pim": 0.0}
        self.m.bubble = {"gpu": 0.0, "pim": 0.0}
        self.reqs = {r.id: Request(r.id, r.input_len, r.output_len, r.arrival) for r in trace.records}
        self.waiting = deque(sorted(self.reqs.values(), key=lambda r: (r.arrival, r.id)))
        self.queue: deque = deque()
        self.decoding: list = []
        self.free = float(self.sys.capacity)
        self.now = 0.0
        self.it = 0
        self.ttft: list = []

    # execution of one phase pair

    def _phase(self, gpu_sb: SubBatch, pim_sb: SubBatch, t0: float, label: str, iv: list) -> PhaseReport:
        c = self.costs
        tp = c.t_p(gpu_sb.c_p, gpu_sb.f_p)
        tb = c.t_batch(sum(gpu_sb.c_p) + len(pim_sb.f_d))
        t_gpu = tp + tb
        ph = c.phase(pim_sb.f_d, pim_sb.d_ids, gpu_sb.chunks, t0=t0, label=label)
        if gpu_sb.c_p:
            iv.append(Interval("gpu", "prefill", t0, t0 + tp, label))
        iv.append(Interval("gpu", "fc", t0 + tp, t0 + t_gpu, label))
        iv.extend(ph.intervals)
        for task in ph.transfers:
            if task.kind == ASYNC_PREFILL_KV:
                self.m.bytes_async += task.bytes
            else:
                self.m.bytes_critical += task.bytes
        length = max(t_gpu, ph.total_ns)
        if t_gpu < length:
            cause = "no_prefill" if not self.queue else ("capacity" if self.waiting else "misaligned")
        else:
            cause = "pim_wait"
        if isinstance(self.pred, LearnedPredictor):
            each = c.t_p_each(gpu_sb.c_p, gpu_sb.f_p) if gpu_sb.c_p else []
            self.m.samples.append(IterationSample(
                float(sum(pim_sb.f_d)), len(pim_sb.f_d), float(sum(gpu_sb.c_p)), ph.total_ns,
                [(cc, ff, float(t)) for cc, ff, t in zip(gpu_sb.c_p, gpu_sb.f_p, each)],
                float(sum(gpu_sb.c_p)), len(pim_sb.f_d), tb))
            if ph.total_ns > 0:
                self.pred.record(self.m.samples[-1])
        return PhaseReport(t_gpu, ph.total_ns, tp, tb, ph.t_d, ph.t_comm, ph.t_overlap,
                           length - t_gpu, length - ph.total_ns, cause)

    def _interleaved(self, sb0: SubBatch, sb1: SubBatch, rep: LatencyReport, iv: list) -> float:
        a = self._phase(sb1, sb0, self.now, f"it{self.it}.A", iv)
        la = max(a.gpu_ns, a.pim_ns)
        b = self._phase(sb0, sb1, self.now + la, f"it{self.it}.B", iv)
        rep.phases = [a, b]
        return la + max(b.gpu_ns, b.pim_ns)

    def _prefill_only(self, sb: SubBatch, rep: LatencyReport, iv: list) -> float:
        c = self.costs
        tp = c.t_p(sb.c_p, sb.f_p)
        tb = c.t_batch(sum(sb.c_p))
        label = f"it{self.it}.P"
        iv.append(Interval("gpu", "prefill", self.now, self.now + tp, label))
        iv.append(Interval("gpu", "fc", self.now + tp, self.now + tp + tb, label))
        ph = c.phase([], [], sb.chunks, t0=self.now + tp + tb, label=label)
        iv.extend(ph.intervals)
        self.m.bytes_async += sum(t.bytes for t in ph.transfers)
        rep.phases = [PhaseReport(tp + tb, ph.total_ns, tp, tb, 0.0, 0.0, ph.t_overlap, 0.0, tp + tb, "prefill")]
        return tp + tb + ph.total_ns

    def _single(self, sb: SubBatch, rep: LatencyReport, iv: list) -> float:
        c = self.costs
        tb = c.t_batch(len(sb.f_d))
        label = f"it{self.it}.S"
        iv.append(Interval("gpu", "fc", self.now, self.now + tb, label))
        ph = c.phase(sb.f_d, sb.d_ids, [], t0=self.now + tb, label=label)
        iv.extend(ph.intervals)
        self.m.bytes_critical += sum(t.bytes for t in ph.transfers if t.kind in (CRITICAL_QKV, CRITICAL_ATTN_OUT))
        rep.phases = [PhaseReport(tb, ph.total_ns, 0.0, tb, ph.t_d, ph.t_comm, ph.t_overlap, ph.total_ns, tb,
                                  "serial")]
        return tb + ph.total_ns

    def _mixed(self, sb: SubBatch, rep: LatencyReport, iv: list) -> float:
        c = self.costs
        tp = c.t_p(sb.c_p, sb.f_p)
        tb = c.t_batch(sum(sb.c_p) + len(sb.f_d))
        ta = decode_mha_gpu(sb.f_d, self.cfg.model, self.cfg.topology, bw=self.sys.gpu_attn_bw) if sb.f_d else 0.0
        label = f"it{self.it}.M"
        iv.append(Interval("gpu", "mixed", self.now, self.now + tp + tb + ta, label))
        rep.phases = [PhaseReport(tp + tb + ta, 0.0, tp, tb, ta, 0.0, 0.0, 0.0, 0.0, "gpu")]
        return tp + tb + ta

    def _plan(self, rep: LatencyReport, iv: list) -> tuple[float, list, list]:
        """Choose and cost this iteration; returns (duration, prefill chunks, decoded requests)."""
        mode = self.sys.mode
        p = self.cfg.scheduler
        if mode == "l3":
            sb0, sb1, aligned = build_subbatches(self.decoding, self.queue, self.pred, p)
            rep.kind, rep.aligned = "interleaved", aligned
            dur = self._interleaved(sb0, sb1, rep, iv)
            chunks = sb1.chunks + sb0.chunks
            decoded = sb0.d_ids + sb1.d_ids
        elif mode == "mixed":
            sb = take_prefill(self.queue, self.cfg.baseline.gpu_prefill_chunk)
            sb.d_ids = [r.id for r in self.decoding]
            sb.f_d = [r.context for r in self.decoding]
            rep.kind = "mixed"
            dur = self._mixed(sb, rep, iv)
            chunks, decoded = sb.chunks, sb.d_ids
        elif self.queue:
            sb = take_prefill(self.queue, p.max_prefill_tokens)
            rep.kind = "prefill"
            dur = self._prefill_only(sb, rep, iv)
            chunks, decoded = sb.chunks, []
        elif mode == "single-batch":
            sb = SubBatch(d_ids=[r.id for r in self.decoding], f_d=[r.context for r in self.decoding])
            rep.kind = "decode"
            dur = self._single(sb, rep, iv)
            chunks, decoded = [], sb.d_ids
        else:  # prefill-priority decode iteration, two sub-batches without prefill
            d0, d1 = split_decode([(r.id, r.context) for r in self.decoding])
            sb0 = SubBatch(d_ids=[i for i, _ in d0], f_d=[t for _, t in d0])
            sb1 = SubBatch(d_ids=[i for i, _ in d1], f_d=[t for _, t in d1])
            rep.kind = "interleaved"
            dur = self._interleaved(sb0, sb1, rep, iv)
            chunks, decoded = [], sb0.d_ids + sb1.d_ids
        return dur, chunks, decoded

    def _apply(self, chunks, decoded):
        end = self.now
        for rid, c in chunks:
            r = self.reqs[rid]
            r.prefilled += c
            if r.prefilled > r.input_len:
                raise AuditError(f"request {rid} over-prefilled")
            if r.prefilled < r.input_len:
                r.chunkings += 1
                continue
            self.queue.remove(r)
            r.generated = 1
            r.first_token_ns = r.last_token_ns = end
            self.ttft.append(end - r.arrival * 1e9)
            self.m.output_tokens += 1
            if r.generated >= r.output_len:
                self._finish(r)
            else:
                r.advance(Phase.DECODING)
                self.decoding.append(r)
        for rid in decoded:
            r = self.reqs[rid]
            r.generated += 1
            self.m.output_tokens += 1
            self.m.tbt.append(end - r.last_token_ns)
            r.last_token_ns = end
            if r.generated >= r.output_len:
                self.decoding.remove(r)
                self._finish(r)

    def _finish(self, r: Request):
        r.advance(Phase.DONE)
        r.done_ns = self.now
        self.free += self.kvb * (r.input_len + r.output_len)
        self.m.requests_done += 1
        self.m.max_chunkings = max(self.m.max_chunkings, r.chunkings)

    def step(self) -> bool:
        """Run one iteration; False once the trace has drained."""
        self.free -= admit(self.waiting, self.queue, self.free, self.kvb, self.now)
        if not self.queue and not self.decoding:
            if not self.waiting:
                return False
            r = self.waiting[0]
            if r.arrival * 1e9 > self.now:
                self.now = r.arrival * 1e9
                return True
            # cannot fit even into an empty system
            self.waiting.popleft()
            self.m.rejected += 1
            return True
        rep = LatencyReport(self.it, self.now, 0.0, "")
        iv: list = []
        n_dec = len(self.decoding)
        dur, chunks, decoded = self._plan(rep, iv)
        if self.audit:
            bad = overlap_audit(iv)
            if bad:
                raise AuditError(f"iteration {self.it}: {bad[:3]}")
        rep.duration_ns = dur
        rep.n_decode = len(decoded)
        rep.prefill_tokens = int(sum(c for _, c in chunks))
        for ph in rep.phases:
            self.m.busy["gpu"] += ph.gpu_ns
            self.m.busy["pim"] += ph.pim_ns
            self.m.bubble["gpu"] += ph.gpu_bubble
            self.m.bubble["pim"] += ph.pim_bubble
        self.m.max_decode_batch = max(self.m.max_decode_batch, n_dec)
        self.m.reports.append(rep)
        if self.keep_timeline:
            self.m.timeline.extend(iv)
        self.now += dur
        self._apply(chunks, decoded)
        self.it += 1
        return True

    def run(self, max_iterations: int | None = None) -> RunMetrics:
        while self.step():
            if max_iterations is not None and self.it >= max_iterations:
                break
        return self.finalize()

    def finalize(self) -> RunMetrics:
        m = self.m
        m.iterations = self.it
        m.makespan_ns = self.now
        m.throughput = m.output_tokens / (self.now * 1e-9) if self.now > 0 else 0.0
        m.tbt_p50, m.tbt_p99 = _pct(m.tbt, 50), _pct(m.tbt, 99)
        m.tbt_mean = float(np.mean(m.tbt)) if m.tbt else 0.0
        m.ttft_p50, m.ttft_p99 = _pct(self.ttft, 50), _pct(self.ttft, 99)
        done = [r for r in self.reqs.values() if r.phase == Phase.DONE]
        if not self.waiting and not self.queue and not self.decoding:
            expected = sum(r.output_len for r in done)
            if expected != m.output_tokens:
                raise AuditError(f"token conservation: emitted {m.output_tokens}, expected {expected}")
        return m


def run_simulation(trace: Trace, cfg: SimConfig, policy: str = "l3", **kw) -> RunMetrics:
    max_iterations = kw.pop("max_iterations", None)
    return Simulation(trace, cfg, policy, **kw).run(max_iterations)


def baseline_run(trace: Trace, cfg: SimConfig, which: str, **kw) -> RunMetrics:
    if which == "l3" or which not in POLICIES:
        raise ValueError(f"unknown baseline {which!r}")
    return run_simulation(trace, cfg, which, **kw)


def decode_iteration_ns(cfg: SimConfig, policy: str, contexts, capacity: float | None = None) -> LatencyReport:
    """One iteration with every request already prefilled and decoding, no prefill queued.

    Runs the normal scheduling path; the oracle predictor is used so that no
    warm-up is needed.
    """
    recs = [TraceRecord(i, int(n), 2) for i, n in enumerate(contexts)]
    sim = Simulation(Trace(recs, "decode"), cfg, policy, capacity=capacity)
    sim.pred = OraclePredictor(sim.costs)
    need = sim.kvb * sum(r.input_len + r.output_len for r in sim.reqs.values())
    if need > sim.free:
        raise ValueError(f"decode batch needs {need:.3g} bytes, capacity is {sim.free:.3g}")
    sim.free -= need
    while sim.waiting:
        r = sim.waiting.popleft()
        r.prefilled, r.generated = r.input_len, 1
        r.first_token_ns = r.last_token_ns = 0.0
        r.advance(Phase.DECODING)
        sim.decoding.append(r)
    sim.step()
    return sim.m.reports[-1]
