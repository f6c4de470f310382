"""Two-sub-batch interleaving scheduler.

Each iteration has two phases.  In phase A the GPU runs sub-batch 1's
prefill attention plus the FC work of (sub-batch 1 prefill chunks, sub-batch
0 decode tokens) while the PIM side runs sub-batch 0's decode attention and
receives sub-batch 1's prefill KV.  Phase B swaps the roles:

    T_GPU1 = t_p(c_p1, f_p1) + t_batch(c_p1, f_d0)
    T_PIM0 = t_d(f_d0) + t_comm(f_d0) + t_overlap(c_p1)
    iteration = max(T_GPU1, T_PIM0) + max(T_GPU0, T_PIM1)

Prefill requests are appended to sub-batch 1 until its predicted T_GPU
passes the opposite T_PIM, then to sub-batch 0, and the last request of
each is cut to the chunk that best aligns the two.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import SchedulerParams
from .predictors import Predictor


class Phase(enum.IntEnum):
    QUEUED = 0
    PREFILLING = 1
    DECODING = 2
    DONE = 3


@dataclass
class Request:
    id: int
    input_len: int
    output_len: int
    arrival: float = 0.0
    prefilled: int = 0
    generated: int = 0
    phase: Phase = Phase.QUEUED
    chunkings: int = 0
    first_token_ns: float | None = None
    last_token_ns: float | None = None
    done_ns: float | None = None

    def __post_init__(self):
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError(f"request {self.id}: lengths must be >= 1")

    @property
    def finished(self) -> int:
        return self.prefilled + self.generated

    @property
    def remaining_prefill(self) -> int:
        return self.input_len - self.prefilled

    @property
    def context(self) -> int:
        return self.input_len + self.generated

    def advance(self, to: Phase):
        if to < self.phase:
            raise RuntimeError(f"request {self.id}: phase {self.phase.name} -> {to.name} is not monotone")
        self.phase = to


@dataclass
class SubBatch:
    c_p: list = field(default_factory=list)
    f_p: list = field(default_factory=list)
    p_ids: list = field(default_factory=list)
    f_d: list = field(default_factory=list)
    d_ids: list = field(default_factory=list)
    t_gpu: float = 0.0
    t_pim: float = 0.0
    chunked: int | None = None  # id of the request cut short, if any

    @property
    def chunks(self) -> list:
        return list(zip(self.p_ids, self.c_p))

    def add_prefill(self, r: Request, c: int):
        self.c_p.append(int(c))
        self.f_p.append(r.prefilled)
        self.p_ids.append(r.id)


def split_decode(decodes) -> tuple[list, list]:
    """Greedy longest-first onto the lighter side; ``decodes`` is [(id, tokens)].

    Ties go to side 0; equal token counts are ordered by id.
    """
    sides: tuple[list, list] = ([], [])
    load = [0, 0]
    for rid, tok in sorted(decodes, key=lambda x: (-x[1], x[0])):
        s = 0 if load[0] <= load[1] else 1
        sides[s].append((rid, tok))
        load[s] += tok
    return sides


def _fill_side(sb_gpu: SubBatch, sb_pim: SubBatch, queue, used: set, pred: Predictor, p: SchedulerParams,
               bootstrap: bool) -> bool:
    """Append prefill to ``sb_gpu`` against ``sb_pim``'s PIM time.  Returns True if aligned."""
    q = p.chunk_quantum
    n_other = len(sb_pim.f_d)
    if bootstrap:
        for r in queue:
            if r.id in used:
                continue
            c = min(p.default_chunk, r.remaining_prefill)
            sb_gpu.add_prefill(r, c)
            used.add(r.id)
            if c < r.remaining_prefill:
                sb_gpu.chunked = r.id
            break
        return False
    budget = p.max_prefill_tokens
    for r in queue:
        if r.id in used:
            continue
        rem = min(r.remaining_prefill, budget - sum(sb_gpu.c_p))
        if rem <= 0:
            break
        t_gpu = pred.t_gpu(sb_gpu.c_p + [rem], sb_gpu.f_p + [r.prefilled], n_other)
        t_pim = pred.t_pim(sb_pim.f_d, sb_pim.d_ids, sb_gpu.chunks + [(r.id, rem)])
        if t_gpu <= t_pim and rem == r.remaining_prefill:
            sb_gpu.add_prefill(r, rem)
            used.add(r.id)
            continue
        # last request: pick the chunk that best aligns T_GPU with the opposite T_PIM
        cand = np.append(np.arange(q, rem, q, dtype=np.int64), rem)
        g = pred.t_gpu_scan(sb_gpu.c_p, sb_gpu.f_p, cand, r.prefilled, n_other)
        pm = pred.t_pim_scan(sb_pim.f_d, sb_pim.d_ids, sb_gpu.chunks, r.id, cand)
        best = int(cand[int(np.argmin(np.abs(g - pm)))])
        sb_gpu.add_prefill(r, best)
        used.add(r.id)
        if best < r.remaining_prefill:
            sb_gpu.chunked = r.id
        return True
    return False


def fill_and_chunk(sb0: SubBatch, sb1: SubBatch, queue, pred: Predictor, p: SchedulerParams,
                   bootstrap: bool = False) -> tuple[SubBatch, SubBatch, bool]:
    """Fill sub-batch 1 then sub-batch 0 with prefill; the third value flags alignment.

    A request is placed in at most one sub-batch per iteration.
    """
    used: set = set()
    a1 = _fill_side(sb1, sb0, queue, used, pred, p, bootstrap)
    a0 = _fill_side(sb0, sb1, queue, used, pred, p, bootstrap)
    for gpu_sb, pim_sb in ((sb1, sb0), (sb0, sb1)):
        if bootstrap:
            break
        gpu_sb.t_gpu = pred.t_gpu(gpu_sb.c_p, gpu_sb.f_p, len(pim_sb.f_d))
        pim_sb.t_pim = pred.t_pim(pim_sb.f_d, pim_sb.d_ids, gpu_sb.chunks)
    return sb0, sb1, (a0 or a1) and not bootstrap


def build_subbatches(decoding, queue, pred: Predictor, p: SchedulerParams) -> tuple[SubBatch, SubBatch, bool]:
    """Steps 2 to 4: split decode requests, then fill and chunk prefill."""
    d0, d1 = split_decode([(r.id, r.context) for r in decoding])
    sb0, sb1 = SubBatch(), SubBatch()
    for sb, side in ((sb0, d0), (sb1, d1)):
        sb.d_ids = [rid for rid, _ in side]
        sb.f_d = [tok for _, tok in side]
    return fill_and_chunk(sb0, sb1, queue, pred, p, bootstrap=not pred.ready)


def take_prefill(queue, budget: int, chunk_cap: int | None = None) -> SubBatch:
    """Prefill-only batch: whole requests in queue order up to ``budget`` tokens."""
    sb = SubBatch()
    for r in queue:
        left = budget - sum(sb.c_p)
        if left <= 0:
            break
        c = min(r.remaining_prefill, left)
        if chunk_cap is not None:
            c = min(c, chunk_cap)
        sb.add_prefill(r, c)
        if c < r.remaining_prefill:
            sb.chunked = r.id
            break
    return sb


def admit(waiting: deque, queue: deque, free_bytes: float, bytes_per_token: float, now: float = float("inf")):
    """Move arrived requests whose whole KV footprint fits into the prefill queue."""
    used = 0.0
    while waiting and waiting[0].arrival * 1e9 <= now:
        r = waiting[0]
        need = bytes_per_token * (r.input_len + r.output_len)
        if need > free_bytes - used:
            break
        waiting.popleft()
        r.advance(Phase.PREFILLING)
        queue.append(r)
        used += need
    return used
