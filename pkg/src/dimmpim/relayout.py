"""In-flight bit re-layout on the rank PU.

Conventional striping puts element ``k`` of a burst at bus bits
``[k*elem_bits, (k+1)*elem_bits)`` of the concatenated beat stream, so with
FP16 on x8 chips the low and high bytes of every element land on different
chips.  The re-layout unit buffers ``ratio = elem_bits // chip_io_bits`` beats
and permutes bits so that chip ``c`` receives element ``c`` of the group in
full: beat ``j`` lane ``c`` carries bits ``[j*io, (j+1)*io)`` of element ``c``.
Written to DRAM, each chip then stores one whole element per group, LSB first.

Bits are numpy ``uint8`` arrays of 0/1, one row per beat.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import DdrTiming

MAX_RATIO = 4


class RelayoutError(ValueError):
    pass


@dataclass(frozen=True)
class BurstBeat:
    bits: np.ndarray
    beat_index: int = 0

    @property
    def width(self) -> int:
        return int(self.bits.shape[0])

    @classmethod
    def from_int(cls, value: int, width: int, beat_index: int = 0) -> "BurstBeat":
        bits = np.array([(value >> i) & 1 for i in range(width)], dtype=np.uint8)
        return cls(bits, beat_index)

    def to_int(self) -> int:
        return int(sum(int(b) << i for i, b in enumerate(self.bits)))


@dataclass(frozen=True)
class SpoofedSpd:
    reported_tWL: int
    actual_tWL: int
    reported_tWR: int
    actual_tWR: int


def _ratio(elem_bits: int, chip_io_bits: int) -> int:
    if elem_bits <= 0 or chip_io_bits <= 0:
        raise RelayoutError("bit widths must be positive")
    if elem_bits % chip_io_bits:
        raise RelayoutError(f"elem_bits={elem_bits} is not a multiple of chip_io_bits={chip_io_bits}")
    ratio = elem_bits // chip_io_bits
    if ratio > MAX_RATIO:
        raise RelayoutError(f"elem_bits/chip_io_bits = {ratio} exceeds supported ratio {MAX_RATIO}")
    return ratio


@lru_cache(maxsize=64)
def relayout_permutation(bus_bits: int, elem_bits: int, chip_io_bits: int) -> np.ndarray:
    """Gather index over one group of ``ratio`` beats: ``out_flat = in_flat[perm]``."""
    ratio = _ratio(elem_bits, chip_io_bits)
    if bus_bits % chip_io_bits:
        raise RelayoutError("bus_bits must be a multiple of chip_io_bits")
    chips = bus_bits // chip_io_bits
    perm = np.empty(ratio * bus_bits, dtype=np.int64)
    for j in range(ratio):
        for c in range(chips):
            for b in range(chip_io_bits):
                out_pos = j * bus_bits + c * chip_io_bits + b
                in_pos = c * elem_bits + j * chip_io_bits + b
                perm[out_pos] = in_pos
    perm.setflags(write=False)
    return perm


def _stack(beats) -> np.ndarray:
    rows = [b.bits if isinstance(b, BurstBeat) else np.asarray(b, dtype=np.uint8) for b in beats]
    widths = {r.shape[0] for r in rows}
    if len(widths) != 1:
        raise RelayoutError(f"mismatched beat widths: {sorted(widths)}")
    return np.stack(rows)


def _apply(beats, elem_bits: int, chip_io_bits: int, inverse: bool) -> list[BurstBeat]:
    arr = _stack(beats)
    n_beats, width = arr.shape
    ratio = _ratio(elem_bits, chip_io_bits)
    if n_beats % ratio:
        raise RelayoutError(f"need a multiple of {ratio} beats, got {n_beats}")
    perm = relayout_permutation(width, elem_bits, chip_io_bits)
    groups = arr.reshape(n_beats // ratio, ratio * width)
    if inverse:
        out = np.empty_like(groups)
        out[:, perm] = groups
    else:
        out = groups[:, perm]
    out = out.reshape(n_beats, width)
    return [BurstBeat(out[i].copy(), i) for i in range(n_beats)]


def relayout_beats(beats, elem_bits: int, chip_io_bits: int) -> list[BurstBeat]:
    return _apply(beats, elem_bits, chip_io_bits, inverse=False)


def relayout_pair(beat_a, beat_b, elem_bits: int = 16, chip_io_bits: int = 8) -> tuple[BurstBeat, BurstBeat]:
    """Re-layout the two double-buffered beats of an FP16-on-x8 style burst."""
    if _ratio(elem_bits, chip_io_bits) != 2:
        raise RelayoutError("relayout_pair handles ratio-2 widths; use relayout_beats otherwise")
    a, b = relayout_beats([beat_a, beat_b], elem_bits, chip_io_bits)
    return a, b


def inverse_relayout(beats, elem_bits: int, chip_io_bits: int) -> list[BurstBeat]:
    return _apply(beats, elem_bits, chip_io_bits, inverse=True)


# Chip images


@dataclass
class ChipImage:
    """What each chip stores after a sequence of beats is written.

    ``bits[c]`` is chip ``c``'s stored bit stream; ``tags[c]`` the logical
    element index each of those bits came from (host order).
    """

    bits: np.ndarray
    tags: np.ndarray
    chip_count: int
    element_width_bits: int

    @classmethod
    def from_beats(cls, beats, chip_io_bits: int, elem_bits: int, tags: np.ndarray | None = None) -> "ChipImage":
        arr = _stack(beats)
        n_beats, width = arr.shape
        chips = width // chip_io_bits
        if tags is None:
            tags = np.arange(n_beats * width).reshape(n_beats, width) // elem_bits
        tags = np.asarray(tags).reshape(n_beats, width)
        # chip c sees lane bits [c*io, (c+1)*io) of every beat, in beat order
        chip_bits = arr.reshape(n_beats, chips, chip_io_bits).transpose(1, 0, 2).reshape(chips, -1)
        chip_tags = tags.reshape(n_beats, chips, chip_io_bits).transpose(1, 0, 2).reshape(chips, -1)
        return cls(chip_bits, chip_tags, chips, elem_bits)


def relayout_tags(n_beats: int, bus_bits: int, elem_bits: int, chip_io_bits: int) -> np.ndarray:
    """Element tags of every bus bit after re-layout of conventionally striped beats."""
    tags = [BurstBeat((np.arange(bus_bits) + i * bus_bits) // elem_bits) for i in range(n_beats)]
    # tags ride through the same permutation as data bits
    ratio = _ratio(elem_bits, chip_io_bits)
    perm = relayout_permutation(bus_bits, elem_bits, chip_io_bits)
    flat = np.stack([t.bits for t in tags]).reshape(n_beats // ratio, ratio * bus_bits)
    return flat[:, perm].reshape(n_beats, bus_bits)


def chip_residency_check(img: ChipImage) -> list[tuple[int, tuple[int, ...]]]:
    """Elements whose bits are not one contiguous run inside a single chip."""
    violations = []
    elements = np.unique(img.tags)
    for e in elements:
        chips = tuple(int(c) for c in np.unique(np.nonzero(img.tags == e)[0]))
        if len(chips) != 1:
            violations.append((int(e), chips))
            continue
        pos = np.nonzero(img.tags[chips[0]] == e)[0]
        if pos[-1] - pos[0] + 1 != pos.size:
            violations.append((int(e), chips))
    return violations


# Spoofed SPD timing


def spoofed_timing(actual: DdrTiming, relayout_cycles: int = 1) -> SpoofedSpd:
    if relayout_cycles < 0:
        raise RelayoutError("relayout_cycles must be >= 0")
    if relayout_cycles >= actual.WL:
        raise RelayoutError(f"relayout_cycles={relayout_cycles} must be < WL={actual.WL}")
    return SpoofedSpd(
        reported_tWL=actual.WL - relayout_cycles,
        actual_tWL=actual.WL,
        reported_tWR=actual.WR + relayout_cycles,
        actual_tWR=actual.WR,
    )


@dataclass(frozen=True)
class WriteTiming:
    bus_start: int  # host drives the first beat
    dram_start: int  # first beat reaches the array
    dram_end: int
    host_pre_ok: int  # earliest PRE the host will issue
    array_pre_ok: int  # earliest PRE the array tolerates


def timed_write(issue_cycle: int, timing: DdrTiming, spd: SpoofedSpd | None = None) -> WriteTiming:
    """Cycle bookkeeping of one write burst, with or without re-layout in the path.

    The host schedules against the (possibly spoofed) SPD values; the
    re-layout unit holds the burst for ``actual - reported`` cycles, so data
    reaches the array exactly when an un-relayouted write would.
    """
    wl_host = timing.WL if spd is None else spd.reported_tWL
    wr_host = timing.WR if spd is None else spd.reported_tWR
    delay = 0 if spd is None else spd.actual_tWL - spd.reported_tWL
    bus_start = issue_cycle + wl_host
    dram_start = bus_start + delay
    dram_end = dram_start + timing.BL
    return WriteTiming(
        bus_start=bus_start,
        dram_start=dram_start,
        dram_end=dram_end,
        host_pre_ok=bus_start + timing.BL + wr_host,
        array_pre_ok=dram_end + timing.WR,
    )
