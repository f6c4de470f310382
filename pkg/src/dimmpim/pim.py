"""Decode-MHA on the DIMM-PIM: latency model, pipeline check, refresh, functional model.

One head kernel on one rank runs in this order:

1. score: all-bank RDs stream the K rows.  Each RD feeds every bank PU one
   64-bit slice that it multiplies against q in its adder tree; the rank PU
   adds the per-chip partials.
2. chunk softmax on the rank PU, one chunk of ``softmax_chunk`` scores per
   group of logic banks, pipelined behind the score stream.
3. transition: PRE the K row, ACT the V row.
4. context: all-bank RDs stream the V rows; bank PUs accumulate p_t * v_t.
5. drain: the rank PU fetches and sums the bank accumulators and applies the
   final softmax normalization.

The closed forms below are checked cycle for cycle against a per-command
state machine in the tests, and ``pipeline_check`` simulates the chunk-level
producer/consumer chain to show that the rank-PU stages never stall the
bank command stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .config import DdrTiming, HwTopology, LlmModel, PimParams
from .ddr import head_kernel_commands
from .mapping import Geometry, KvPlacement, MappingError, heads_per_channel, layers_per_rankset


class PimError(RuntimeError):
    pass


@dataclass
class PimKernelResult:
    latency_ns: float
    commands: dict = field(default_factory=dict)  # ACT/RD/PRE/REF counts
    output: np.ndarray | None = None
    bubble_ns: float = 0.0


@dataclass(frozen=True)
class Engine:
    """Bundle of the constants the latency model needs."""

    model: LlmModel
    topo: HwTopology
    timing: DdrTiming
    pim: PimParams

    @cached_property
    def geometry(self) -> Geometry:
        return Geometry.build(self.model, self.topo, self.pim)

    @cached_property
    def reads_per_row(self) -> int:
        return self.geometry.units_per_row

    @cached_property
    def tile_tokens(self) -> int:
        # scores held in the rank-PU buffer
        return self.pim.buffer_bytes // self.model.precision_bytes

    def score_reads(self, n):
        g = self.geometry
        return -(-np.asarray(n) // g.banks) * g.units_per_token

    def ctx_reads(self, n):
        g = self.geometry
        return -(-np.asarray(n) // g.n_sets) * g.v_units_per_bank

    @cached_property
    def chunk_reads(self) -> tuple[int, int]:
        g = self.geometry
        c = self.pim.softmax_chunk
        return -(-c // g.banks) * g.units_per_token, -(-c // g.n_sets) * g.v_units_per_bank

    @cached_property
    def fetch_cycles(self) -> int:
        # one partial per bank per chip, FP16, over the rank bus at DDR
        t, g = self.timing, self.geometry
        bits = g.banks * g.chips * 16
        per_burst = self.topo.bus_bits * 2 * t.BL
        return -(-bits // per_burst) * t.BL

    @cached_property
    def drain_cycles(self) -> int:
        return self.geometry.banks * self.timing.BL + self.pim.softmax_cycles_per_chunk


def make_engine(m: LlmModel, topo: HwTopology, timing: DdrTiming, pim: PimParams | None = None) -> Engine:
    return Engine(m, topo, timing, pim or PimParams())


# Row-stream closed forms (cycles, banks precharged at cycle 0)


def _row_period(t: DdrTiming, rpr: int) -> int:
    return max(max(t.RCD + (rpr - 1) * t.CCDL + t.RTP, t.RAS) + t.RP, t.RC)


def stream_marks(n_reads, rpr: int, t: DdrTiming):
    """(last RD, last ACT) cycles of a read stream; vectorized, 0 for empty."""
    n = np.asarray(n_reads, dtype=np.int64)
    rows = np.maximum(-(-n // rpr), 1)
    k_last = n - (rows - 1) * rpr
    p = _row_period(t, rpr)
    last_act = (rows - 1) * p
    last_rd = last_act + t.RCD + (k_last - 1) * t.CCDL
    empty = n <= 0
    return np.where(empty, 0, last_rd), np.where(empty, 0, last_act)


def stream_cycles(n_reads, rpr: int, t: DdrTiming):
    last_rd, _ = stream_marks(n_reads, rpr, t)
    return np.where(np.asarray(n_reads) > 0, last_rd + t.CCDL, 0)


def _ready0_cycles(e: Engine, n):
    """Earliest first context RD: chunk 0 scored, fetched, softmaxed and broadcast."""
    t = e.timing
    r0 = np.minimum(e.score_reads(n), e.chunk_reads[0])
    last_rd0, _ = stream_marks(r0, e.reads_per_row, t)
    bcast = np.minimum(np.asarray(n), e.pim.softmax_chunk)
    return last_rd0 + t.CCDL + e.fetch_cycles + e.pim.softmax_cycles_per_chunk + bcast


def head_cycles_untiled(e: Engine, n):
    """Fused head kernel latency in cycles for n tokens that fit the buffer."""
    t = e.timing
    n = np.asarray(n, dtype=np.int64)
    rpr = e.reads_per_row
    s_rd, s_act = stream_marks(e.score_reads(n), rpr, t)
    pre = np.maximum(s_rd + t.RTP, s_act + t.RAS)
    act_v = np.maximum(pre + t.RP, s_act + t.RC)
    first_ctx = np.maximum(act_v + t.RCD, _ready0_cycles(e, n))
    c_rd, _ = stream_marks(e.ctx_reads(n), rpr, t)
    end = first_ctx + (c_rd - t.RCD) + t.CCDL + e.drain_cycles
    return np.where(n > 0, end, 0)


def head_cycles(e: Engine, n):
    """Head kernel latency in cycles including repeated fetch beyond the buffer."""
    n = np.asarray(n, dtype=np.int64)
    tile = e.tile_tokens
    full, rem = np.divmod(n, tile)
    t = e.timing
    # each extra tile: reopen the K rows and rescale the running context
    switch = t.RTP + t.RP + e.pim.softmax_cycles_per_chunk
    extra_tiles = np.maximum(full + (rem > 0) - 1, 0)
    return full * head_cycles_untiled(e, tile) + head_cycles_untiled(e, rem) + extra_tiles * switch


def head_latency_ns(e: Engine, n):
    return head_cycles(e, n) * e.timing.tCK


_TABLES: dict = {}


def head_latency_lookup(e: Engine, n) -> np.ndarray:
    """head_latency_ns through a per-engine table grown on demand."""
    n = np.asarray(n, dtype=np.int64)
    top = int(n.max()) if n.size else 0
    tab = _TABLES.get(e)
    if tab is None or tab.size <= top:
        size = max(1024, 1 << top.bit_length())
        tab = head_latency_ns(e, np.arange(size))
        _TABLES[e] = tab
    return tab[n]


# Phase-level API


def score_phase(tokens_on_rank: int, m: LlmModel, topo: HwTopology, timing: DdrTiming,
                pim: PimParams | None = None, repeated_fetch: bool = True) -> PimKernelResult:
    e = make_engine(m, topo, timing, pim)
    if tokens_on_rank < 0:
        raise PimError("token count must be >= 0")
    if tokens_on_rank > e.tile_tokens and not repeated_fetch:
        raise PimError(f"{tokens_on_rank} tokens exceed buffer capacity {e.tile_tokens} with repeated fetch disabled")
    reads = int(e.score_reads(tokens_on_rank))
    cyc = int(stream_cycles(reads, e.reads_per_row, timing))
    rows = -(-reads // e.reads_per_row)
    return PimKernelResult(cyc * timing.tCK, {"ACT": rows, "RD": reads, "PRE": max(rows - 1, 0), "REF": 0})


def context_phase(tokens_on_rank: int, m: LlmModel, topo: HwTopology, timing: DdrTiming,
                  pim: PimParams | None = None, repeated_fetch: bool = True) -> PimKernelResult:
    e = make_engine(m, topo, timing, pim)
    if tokens_on_rank < 0:
        raise PimError("token count must be >= 0")
    if tokens_on_rank > e.tile_tokens and not repeated_fetch:
        raise PimError(f"{tokens_on_rank} tokens exceed buffer capacity {e.tile_tokens} with repeated fetch disabled")
    reads = int(e.ctx_reads(tokens_on_rank))
    cyc = int(stream_cycles(reads, e.reads_per_row, timing))
    rows = -(-reads // e.reads_per_row)
    return PimKernelResult(cyc * timing.tCK, {"ACT": rows, "RD": reads, "PRE": max(rows - 1, 0), "REF": 0})


def head_kernel(tokens: int, m: LlmModel, topo: HwTopology, timing: DdrTiming,
                pim: PimParams | None = None) -> PimKernelResult:
    """Fused score/softmax/context for one head; bubble from the pipeline check."""
    e = make_engine(m, topo, timing, pim)
    cyc = int(head_cycles(e, tokens))
    bubble = 0.0
    left = tokens
    while left > 0:
        part = min(left, e.tile_tokens)
        bubble += pipeline_check(e, part).bubble_ns
        left -= part
    s, c = int(e.score_reads(tokens)), int(e.ctx_reads(tokens))
    rows = -(-s // e.reads_per_row) + -(-c // e.reads_per_row)
    return PimKernelResult(cyc * timing.tCK, {"ACT": rows, "RD": s + c, "PRE": rows, "REF": 0}, None, bubble)


def kernel_commands(e: Engine, tokens: int):
    """DDR command stream of one untiled head kernel."""
    if tokens > e.tile_tokens:
        raise PimError("command dump covers a single buffer tile")
    ready = int(_ready0_cycles(e, tokens)) if tokens else 0
    return head_kernel_commands(int(e.score_reads(tokens)), int(e.ctx_reads(tokens)), e.reads_per_row,
                                e.timing, ctx_ready=ready)


# Pipeline check


@dataclass
class PipelineTrace:
    end_cycles: int
    stall_cycles: int
    bubble_ns: float


def _read_times(n_reads: int, rpr: int, t: DdrTiming) -> np.ndarray:
    i = np.arange(n_reads)
    return (i // rpr) * _row_period(t, rpr) + t.RCD + (i % rpr) * t.CCDL


def _simulate(e: Engine, n: int, fetch: int, smax: int, bcast_rate: float) -> tuple[int, int]:
    """Chunk-level producer/consumer simulation; returns (end cycle, stall cycles)."""
    t = e.timing
    rpr = e.reads_per_row
    depth = e.pim.result_buffer_depth
    chunk = e.pim.softmax_chunk
    n_chunks = -(-n // chunk)
    rc_s, rc_c = e.chunk_reads
    s_reads = int(e.score_reads(n))
    c_reads = int(e.ctx_reads(n))
    rt_s = _read_times(s_reads, rpr, t)
    rt_c = _read_times(c_reads, rpr, t)

    shift = 0
    f_start = [0] * n_chunks
    f_end = 0
    sm_end = [0] * n_chunks
    prev_sm = 0
    for j in range(n_chunks):
        lo, hi = j * rc_s, min((j + 1) * rc_s, s_reads)
        start = int(rt_s[lo]) + shift
        if j >= depth and start < f_start[j - depth]:
            shift += f_start[j - depth] - start
        end = int(rt_s[hi - 1]) + shift + t.CCDL
        f_start[j] = max(end, f_end)
        f_end = f_start[j] + fetch
        prev_sm = max(f_end, prev_sm) + smax
        sm_end[j] = prev_sm
    score_stall = shift

    last_rd = int(rt_s[-1]) + shift
    last_act = (s_reads - 1) // rpr * _row_period(t, rpr) + shift
    pre = max(last_rd + t.RTP, last_act + t.RAS)
    act_v = max(pre + t.RP, last_act + t.RC)
    base = act_v + t.RCD - int(rt_c[0])  # offset mapping nominal context times to wall clock

    shift = 0
    b_end = 0
    c_end = [0] * n_chunks
    for j in range(n_chunks):
        tokens_j = min(chunk, n - j * chunk)
        b_start = max(sm_end[j], b_end, c_end[j - depth] if j >= depth else 0)
        b_end = b_start + int(math.ceil(tokens_j * bcast_rate))
        lo, hi = j * rc_c, min((j + 1) * rc_c, c_reads)
        start = int(rt_c[lo]) + base + shift
        if start < b_end:
            shift += b_end - start
        c_end[j] = int(rt_c[hi - 1]) + base + shift + t.CCDL
    end = c_end[-1] + e.drain_cycles
    return end, score_stall + shift


def pipeline_check(e: Engine, n: int) -> PipelineTrace:
    """Bubble = stall with real rank-PU rates minus stall with infinitely fast rank stages."""
    if n <= 0:
        return PipelineTrace(0, 0, 0.0)
    if n > e.tile_tokens:
        raise PimError("pipeline check covers a single buffer tile")
    end, stall = _simulate(e, n, e.fetch_cycles, e.pim.softmax_cycles_per_chunk, 1.0)
    _, stall_inf = _simulate(e, n, 0, 0, 0.0)
    return PipelineTrace(end, stall, (stall - stall_inf) * e.timing.tCK)


# Chunk softmax


def softmax_chunks(scores, chunk: int, pim: PimParams | None = None, timing: DdrTiming | None = None,
                   dtype=np.float64) -> tuple[np.ndarray, float]:
    """Online softmax over chunks with running-max rescaling and one final normalization."""
    if chunk < 1:
        raise PimError("chunk must be >= 1")
    s = np.asarray(scores, dtype=dtype)
    if not np.all(np.isfinite(s)):
        raise PimError("scores contain NaN or Inf")
    pim = pim or PimParams()
    timing = timing or DdrTiming()
    n = s.size
    if n == 0:
        return s.copy(), 0.0
    out = np.empty(n, dtype=dtype)
    m = -np.inf
    total = dtype(0)
    chunk_max = []
    for lo in range(0, n, chunk):
        c = s[lo:lo + chunk]
        m_new = max(m, c.max())
        total = total * np.exp(dtype(m - m_new)) + np.exp(c - m_new).sum(dtype=dtype)
        out[lo:lo + chunk] = np.exp(c - m_new)
        chunk_max.append(m_new)
        m = m_new
    for i, lo in enumerate(range(0, n, chunk)):
        out[lo:lo + chunk] *= np.exp(dtype(chunk_max[i] - m)) / total
    cycles = (math.ceil(n / chunk) + 1) * pim.softmax_cycles_per_chunk
    return out, cycles * timing.tCK


# Functional model


def _tree_sum(parts: np.ndarray, axis: int, dt) -> np.ndarray:
    """Pairwise (tree) sum along an axis, rounding each level to dt."""
    x = np.moveaxis(parts, axis, 0).astype(dt)
    while x.shape[0] > 1:
        if x.shape[0] % 2:
            x = np.concatenate([x, np.zeros_like(x[:1])])
        x = (x[0::2] + x[1::2]).astype(dt)
    return x[0]


def attention_functional(q, K, V, geometry: Geometry, mode: str = "fp16", chunk: int = 16) -> np.ndarray:
    """softmax(q K^T) V with the datapath's arithmetic order.

    ``mode`` is fp16 (bank/rank PU arithmetic in half precision, exp in
    fp32) or fp64.  q is used as given; callers pre-scale by 1/sqrt(D_h).
    """
    if mode not in ("fp16", "fp64"):
        raise PimError(f"mode must be fp16 or fp64, got {mode}")
    dt = np.float16 if mode == "fp16" else np.float64
    sdt = np.float32 if mode == "fp16" else np.float64
    q = np.asarray(q, dtype=dt)
    K = np.asarray(K, dtype=dt)
    V = np.asarray(V, dtype=dt)
    n, d = K.shape
    g = geometry
    if d != g.chips * g.elems_per_chip:
        raise PimError(f"head dim {d} does not match geometry")
    if n == 0:
        return np.zeros(d, dtype=np.float64)
    epc = g.elems_per_chip
    epu = epc // g.units_per_token  # elements per 64-bit unit

    # score: bank PU for token t is bank t % banks; per chip, left-to-right MAC over its elements
    Kc = K.reshape(n, g.chips, epc)
    qc = q.reshape(g.chips, epc)
    acc = np.zeros((n, g.chips), dtype=dt)
    for i in range(epc):
        acc = (acc + (Kc[:, :, i] * qc[None, :, i]).astype(dt)).astype(dt)
    scores = _tree_sum(acc, 1, dt)

    p, _ = softmax_chunks(scores.astype(sdt), chunk, dtype=sdt)
    p = p.astype(dt)

    # context: token t in set t % n_sets; unit u of chip c accumulates in bank set*v + u % v
    Vc = V.reshape(n, g.chips, g.units_per_token, epu)
    sets = np.arange(n) % g.n_sets
    out_acc = np.zeros((g.n_sets, g.chips, g.units_per_token, epu), dtype=dt)
    for t in range(n):  # tokens reach each bank in slot order
        out_acc[sets[t]] = (out_acc[sets[t]] + (p[t] * Vc[t]).astype(dt)).astype(dt)
    out = _tree_sum(out_acc, 0, dt)
    return out.reshape(d).astype(np.float64)


def reference_attention(q, K, V) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(K, dtype=np.float64) @ q
    s = s - s.max()
    w = np.exp(s)
    return (w / w.sum()) @ np.asarray(V, dtype=np.float64)


# Refresh


@dataclass
class RefreshDecision:
    issued: int
    deferred: int
    charged_ns: float


class RefreshManager:
    """Deferred refresh, checked at each head completion.

    REFs fall due every tREFI.  Owed REFs are issued together when a head
    completes; while idle or inside a long head they are deferred until the
    budget (default 8) would be exceeded, then issued one at a time.
    """

    def __init__(self, timing: DdrTiming, max_deferred: int = 8):
        self.t = timing
        self.max_deferred = max_deferred
        self.owed = 0
        self.next_due = timing.tREFI
        self.issued_total = 0
        self.peak_owed = 0

    def _accrue(self, now: float) -> int:
        forced = 0
        while self.next_due <= now:
            self.owed += 1
            self.next_due += self.t.tREFI
            if self.owed > self.max_deferred:
                self.owed -= 1
                forced += 1
        self.peak_owed = max(self.peak_owed, self.owed)
        return forced

    def idle_until(self, now: float) -> RefreshDecision:
        forced = self._accrue(now)
        self.issued_total += forced
        return RefreshDecision(forced, self.owed, forced * self.t.tRFC)

    def run_head(self, start: float, latency: float) -> RefreshDecision:
        """Advance across one head kernel; returns REFs forced inside it plus those at completion."""
        forced = self._accrue(start)
        end = start + latency
        # REFs forced mid-head push the completion out by tRFC each
        while True:
            more = self._accrue(end)
            if not more:
                break
            forced += more
            end += more * self.t.tRFC
        batch = self.owed
        self.owed = 0
        issued = forced + batch
        self.issued_total += issued
        return RefreshDecision(issued, 0, issued * self.t.tRFC)


def schedule_refresh(mgr: RefreshManager, now: float, head_latency: float | None = None) -> RefreshDecision:
    if head_latency is None:
        return mgr.idle_until(now)
    return mgr.run_head(now, head_latency)


def refresh_factor(timing: DdrTiming) -> float:
    """Wall-clock stretch of a busy rank: REFs landing in the window cost tRFC each."""
    return 1.0 / (1.0 - timing.tRFC / timing.tREFI)


# Decode MHA


@dataclass
class DecodeDetail:
    rankset_ns: np.ndarray  # busy time of the slowest rank in each rankset, refresh included
    head_ns: np.ndarray  # per request, one head kernel


def decode_detail(tokens, request_ids, e: Engine, placement: KvPlacement | None = None) -> DecodeDetail:
    n = np.asarray(tokens, dtype=np.int64)
    ids = np.asarray(request_ids, dtype=np.int64)
    if n.shape != ids.shape:
        raise PimError("tokens and request_ids differ in length")
    R = e.topo.ranksets
    if placement is not None:
        for rid, cnt in zip(ids.tolist(), n.tolist()):
            if placement.tokens.get(rid, -1) < cnt:
                raise MappingError(f"placement missing entries for request {rid}")
    if n.size == 0:
        return DecodeDetail(np.zeros(R), np.zeros(0))
    head_ns = head_latency_lookup(e, n)
    lpr = layers_per_rankset(ids, e.model.layers, R)  # [req, R]
    hmax = int(heads_per_channel(e.model.heads, e.topo.channels).max())
    busy = hmax * (lpr * head_ns[:, None]).sum(axis=0)
    return DecodeDetail(busy * refresh_factor(e.timing), head_ns)


def decode_mha(tokens, request_ids, e: Engine, placement: KvPlacement | None = None) -> float:
    """t_d in ns: slowest rank over all ranksets."""
    d = decode_detail(tokens, request_ids, e, placement)
    return float(d.rankset_ns.max()) if d.rankset_ns.size else 0.0
