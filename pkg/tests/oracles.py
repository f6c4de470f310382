"""Independent reference models used by the tests.

Nothing here imports the package's closed forms: the DDR oracle steps one
clock at a time through a bank state machine, the re-layout oracle places
element bits chip by chip, and attention is dense float64 math.
"""

from __future__ import annotations

import itertools

import numpy as np


# DDR4 all-bank state machine


class BankFsm:
    """Cycle-stepped all-bank state machine issuing each command at its first legal cycle."""

    def __init__(self, t):
        self.t = t
        self.open_row = None
        self.last_act = -10**9
        self.last_pre = -10**9
        self.last_rd = -10**9
        self.log = []

    def can_act(self, cyc):
        t = self.t
        return self.open_row is None and cyc - self.last_pre >= t.RP and cyc - self.last_act >= t.RC

    def can_rd(self, cyc):
        t = self.t
        return self.open_row is not None and cyc - self.last_act >= t.RCD and cyc - self.last_rd >= t.CCDL

    def can_pre(self, cyc):
        t = self.t
        return self.open_row is not None and cyc - self.last_act >= t.RAS and cyc - self.last_rd >= t.RTP

    def issue(self, cyc, cmd, row=None):
        self.log.append((cyc, cmd, row))
        if cmd == "ACT":
            self.open_row, self.last_act = row, cyc
        elif cmd == "RD":
            self.last_rd = cyc
        else:
            self.open_row, self.last_pre = None, cyc


def fsm_stream(fsm: BankFsm, n_reads: int, rpr: int, cyc: int, row0: int = 0, ready: int = 0):
    """Read ``n_reads`` columns packed ``rpr`` per row; first RD not before ``ready``.

    Returns (cycle after the loop, last RD cycle).
    """
    left, row, in_row = n_reads, row0, 0
    first = True
    last_rd = None
    while left:
        if fsm.open_row is None:
            # hold the ACT so that the dependent first RD lands no earlier than ready
            if fsm.can_act(cyc) and (not first or cyc + fsm.t.RCD >= ready):
                fsm.issue(cyc, "ACT", row)
                in_row = 0
        elif in_row < rpr and fsm.can_rd(cyc) and cyc >= ready:
            fsm.issue(cyc, "RD", row)
            last_rd, first = cyc, False
            in_row += 1
            left -= 1
        elif in_row == rpr and fsm.can_pre(cyc):
            fsm.issue(cyc, "PRE", row)
            row += 1
        cyc += 1
    return cyc, last_rd


def fsm_close(fsm: BankFsm, cyc: int) -> int:
    while not fsm.can_pre(cyc):
        cyc += 1
    fsm.issue(cyc, "PRE", fsm.open_row)
    return cyc


def fsm_head_kernel(t, score_reads: int, ctx_reads: int, rpr: int, ready: int):
    """K stream, close, V stream gated by ``ready``; returns (last ctx RD, command log)."""
    fsm = BankFsm(t)
    cyc, _ = fsm_stream(fsm, score_reads, rpr, 0)
    cyc = fsm_close(fsm, cyc)
    _, last = fsm_stream(fsm, ctx_reads, rpr, cyc, row0=10**6, ready=ready)
    return last, fsm.log


# Re-layout


def conventional_elements(beats_bits: np.ndarray, elem_bits: int) -> np.ndarray:
    """Element values (as bit arrays) of a conventionally striped beat sequence."""
    flat = beats_bits.reshape(-1)
    return flat.reshape(-1, elem_bits)


def expected_chip_streams(beats_bits: np.ndarray, elem_bits: int, chip_io_bits: int) -> np.ndarray:
    """Chip c stores whole elements g*chips + c, in group order."""
    n_beats, width = beats_bits.shape
    chips = width // chip_io_bits
    elems = conventional_elements(beats_bits, elem_bits)
    ratio = elem_bits // chip_io_bits
    groups = n_beats // ratio
    out = np.zeros((chips, groups * elem_bits), dtype=np.uint8)
    for g in range(groups):
        for c in range(chips):
            out[c, g * elem_bits:(g + 1) * elem_bits] = elems[g * chips + c]
    return out


# Attention


def dense_attention(q, K, V) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    s = np.einsum("nd,d->n", K, q)
    lse = np.log(np.sum(np.exp(s - s.max()))) + s.max()
    return np.einsum("n,nd->d", np.exp(s - lse), V)


# Scheduling


def best_bipartition(loads):
    """Exhaustive minimum of max(side) over all 2-way splits."""
    loads = list(loads)
    best = None
    for mask in itertools.product((0, 1), repeat=len(loads)):
        a = sum(x for x, s in zip(loads, mask) if s == 0)
        b = sum(loads) - a
        if best is None or max(a, b) < best:
            best = max(a, b)
    return best
