"""All-bank DDR command streams for one head kernel on one rank.

Every command addresses all banks of the rank in lockstep.  Banks start
precharged.  The stream is ACT / RD... / PRE per row, K rows first, then the
V rows once the first softmax chunk has been broadcast.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .config import DdrTiming


@dataclass(frozen=True)
class Command:
    cycle: int
    cmd: str  # ACT | RD | PRE | REF
    bank: str
    row: int
    phase: str = ""


def read_stream(n_reads: int, reads_per_row: int, t: DdrTiming, start: int = 0, base_row: int = 0,
                phase: str = "", not_before: int = 0) -> tuple[list[Command], int, int]:
    """Commands for ``n_reads`` column reads packed ``reads_per_row`` per row.

    ``not_before`` delays the first RD (data dependency).  Returns
    (commands, cycle of last RD, cycle of last ACT).
    """
    cmds: list[Command] = []
    if n_reads <= 0:
        return cmds, start, start
    act = max(start, not_before - t.RCD)
    row = base_row
    left = n_reads
    last_rd = act
    while True:
        cmds.append(Command(act, "ACT", "ALL", row, phase))
        k = min(left, reads_per_row)
        rd = act + t.RCD
        for i in range(k):
            cmds.append(Command(rd + i * t.CCDL, "RD", "ALL", row, phase))
        last_rd = rd + (k - 1) * t.CCDL
        left -= k
        if not left:
            return cmds, last_rd, act
        pre = max(last_rd + t.RTP, act + t.RAS)
        cmds.append(Command(pre, "PRE", "ALL", row, phase))
        act = max(pre + t.RP, act + t.RC)
        row += 1


def head_kernel_commands(score_reads: int, ctx_reads: int, reads_per_row: int, t: DdrTiming,
                         ctx_ready: int = 0, k_row: int = 0, v_row: int = 0, start: int = 0) -> list[Command]:
    """Score stream, PRE, context stream, PRE.  ``ctx_ready`` is the earliest first context RD."""
    cmds, last_rd, last_act = read_stream(score_reads, reads_per_row, t, start, k_row, "score")
    if score_reads:
        pre = max(last_rd + t.RTP, last_act + t.RAS)
        cmds.append(Command(pre, "PRE", "ALL", k_row + (score_reads - 1) // reads_per_row, "score"))
        nxt = max(pre + t.RP, last_act + t.RC)
    else:
        nxt = start
    more, last_rd, last_act = read_stream(ctx_reads, reads_per_row, t, nxt, v_row, "context", ctx_ready)
    cmds += more
    if ctx_reads:
        pre = max(last_rd + t.RTP, last_act + t.RAS)
        cmds.append(Command(pre, "PRE", "ALL", v_row + (ctx_reads - 1) // reads_per_row, "context"))
    return cmds


def commands_csv(cmds: list[Command]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["cycle", "cmd", "bank", "row", "phase"])
    for c in cmds:
        w.writerow([c.cycle, c.cmd, c.bank, c.row, c.phase])
    return buf.getvalue()
