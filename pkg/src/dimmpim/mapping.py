"""KV-cache placement on the DIMM-PIM.

Coarse level: a (request, layer) lives on one rankset, round robin over
layers with a per-request stagger; heads of a layer spread over channels;
inside a channel the rankset index picks the rank.

Fine level, per chip of that rank (one ``unit`` = one 64-bit column read):

* K: token ``t`` goes to logic bank ``t % banks``; its ``D_h/chips`` elements
  sit in ``units_per_token`` consecutive columns.  Tokens sharing a bank
  stack at increasing slots, identical across chips.
* V: banks form ``banks / v_spread`` sets of ``v_spread`` banks.  Token ``t``
  goes to set ``t % n_sets`` and its units are dealt round robin over the
  banks of the set, so tokens ``t`` and ``t + n_sets`` put segment ``i`` in
  the same bank one slot apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import HwTopology, LlmModel, PimParams

ALL_CHIPS = -1
UNIT_BITS = 64


class CapacityError(RuntimeError):
    pass


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class BankAddress:
    rankset: int
    channel: int
    rank: int
    chip: int  # ALL_CHIPS for logic-bank spans
    bank: int
    row: int
    col_offset: int  # in 64-bit units


@dataclass(frozen=True)
class AddressSpan:
    start: BankAddress
    units: int  # consecutive 64-bit columns


@dataclass(frozen=True)
class Geometry:
    """Per-chip layout constants derived from model + topology."""

    banks: int
    chips: int
    elems_per_chip: int  # per token per chip
    units_per_token: int
    units_per_row: int
    k_tokens_per_row: int  # per bank
    v_spread: int
    n_sets: int
    v_units_per_bank: int  # per token
    v_tokens_per_row: int  # slots per bank row

    @classmethod
    def build(cls, m: LlmModel, topo: HwTopology, pim: PimParams | None = None) -> "Geometry":
        pim = pim or PimParams()
        banks = topo.banks_per_chip
        chips = topo.chips_per_rank
        if m.head_dim % chips:
            raise MappingError(f"D_h={m.head_dim} not divisible by chips_per_rank={chips}")
        elems = m.head_dim // chips
        bits = elems * m.precision_bytes * 8
        if bits % UNIT_BITS:
            raise MappingError(f"per-chip token slice of {bits} bits is not a whole number of 64-bit units")
        upt = bits // UNIT_BITS
        upr = topo.row_bytes * 8 // UNIT_BITS
        if upr % upt:
            raise MappingError("row does not hold a whole number of token slices")
        v = pim.v_spread
        if v > banks or banks % v:
            raise MappingError(f"v_spread={v} must divide banks_per_chip={banks}")
        if upt % v:
            # fewer segments than banks in the set: fall back to one unit per bank
            raise MappingError(f"units per token ({upt}) must be a multiple of v_spread ({v})")
        spb = upt // v
        return cls(
            banks=banks,
            chips=chips,
            elems_per_chip=elems,
            units_per_token=upt,
            units_per_row=upr,
            k_tokens_per_row=upr // upt,
            v_spread=v,
            n_sets=banks // v,
            v_units_per_bank=spb,
            v_tokens_per_row=upr // spb,
        )

    def k_rows(self, tokens: int) -> int:
        slots = -(-tokens // self.banks)
        return -(-slots // self.k_tokens_per_row)

    def v_rows(self, tokens: int) -> int:
        slots = -(-tokens // self.n_sets)
        return -(-slots // self.v_tokens_per_row)


def rankset_for_layer(request_id: int, layer: int, topo: HwTopology) -> int:
    r = topo.ranksets
    return (request_id % r + layer) % r


def channel_for_head(head: int, topo: HwTopology) -> int:
    return head % topo.channels


def layers_per_rankset(request_ids, layers: int, ranksets: int) -> np.ndarray:
    """Count matrix [request, rankset] of layers held, vectorized."""
    base = np.asarray(request_ids, dtype=np.int64) % ranksets
    r = np.arange(ranksets)
    offset = (r[None, :] - base[:, None]) % ranksets
    return layers // ranksets + (offset < layers % ranksets)


def heads_per_channel(heads: int, channels: int) -> np.ndarray:
    c = np.arange(channels)
    return heads // channels + (c < heads % channels)


def _coarse(request: int, layer: int, head: int, topo: HwTopology) -> tuple[int, int, int]:
    rs = rankset_for_layer(request, layer, topo)
    return rs, channel_for_head(head, topo), rs


def place_k_vector(token: int, head: int, layer: int, request: int, topo: HwTopology, m: LlmModel,
                   pim: PimParams | None = None, base_row: int = 0) -> AddressSpan:
    g = Geometry.build(m, topo, pim)
    if token < 0:
        raise MappingError("token index must be >= 0")
    rs, ch, rank = _coarse(request, layer, head, topo)
    bank = token % g.banks
    slot = token // g.banks
    row = base_row + slot // g.k_tokens_per_row
    if row >= topo.rows_per_bank:
        raise CapacityError(f"K row {row} exceeds rows_per_bank={topo.rows_per_bank}")
    col = (slot % g.k_tokens_per_row) * g.units_per_token
    return AddressSpan(BankAddress(rs, ch, rank, ALL_CHIPS, bank, row, col), g.units_per_token)


def place_v_vector(token: int, head: int, layer: int, request: int, topo: HwTopology, m: LlmModel,
                   pim: PimParams | None = None, base_row: int = 0) -> list[AddressSpan]:
    """One span per burst-sized segment, in element order."""
    g = Geometry.build(m, topo, pim)
    if token < 0:
        raise MappingError("token index must be >= 0")
    rs, ch, rank = _coarse(request, layer, head, topo)
    s = token % g.n_sets
    slot = token // g.n_sets
    row = base_row + slot // g.v_tokens_per_row
    if row >= topo.rows_per_bank:
        raise CapacityError(f"V row {row} exceeds rows_per_bank={topo.rows_per_bank}")
    base_col = (slot % g.v_tokens_per_row) * g.v_units_per_bank
    spans = []
    for i in range(g.units_per_token):
        bank = s * g.v_spread + i % g.v_spread
        col = base_col + i // g.v_spread
        spans.append(AddressSpan(BankAddress(rs, ch, rank, ALL_CHIPS, bank, row, col), 1))
    return spans


# Registry


@dataclass
class Region:
    k_base: int
    v_base: int
    rows: int  # rows reserved for each of K and V


@dataclass
class KvPlacement:
    """Row regions per (request, layer, head) plus token counts per request.

    Single writer (the simulator loop); regions come from a first-fit free
    list per (channel, rank).
    """

    model: LlmModel
    topo: HwTopology
    pim: PimParams = field(default_factory=PimParams)
    tokens: dict = field(default_factory=dict)
    capacity_tokens: dict = field(default_factory=dict)
    regions: dict = field(default_factory=dict)
    _free: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.geometry = Geometry.build(self.model, self.topo, self.pim)

    def _free_list(self, ch: int, rank: int) -> list[list[int]]:
        key = (ch, rank)
        if key not in self._free:
            self._free[key] = [[0, self.topo.rows_per_bank]]
        return self._free[key]

    def _take(self, ch: int, rank: int, n: int) -> int:
        fl = self._free_list(ch, rank)
        for seg in fl:
            if seg[1] - seg[0] >= n:
                start = seg[0]
                seg[0] += n
                if seg[0] == seg[1]:
                    fl.remove(seg)
                return start
        raise CapacityError(f"no {n} free rows on channel {ch} rank {rank}")

    def _give(self, ch: int, rank: int, start: int, n: int):
        fl = self._free_list(ch, rank)
        fl.append([start, start + n])
        fl.sort()
        merged = [fl[0]]
        for s, e in fl[1:]:
            if s == merged[-1][1]:
                merged[-1][1] = e
            else:
                merged.append([s, e])
        fl[:] = merged

    def allocate(self, request: int, max_tokens: int):
        if request in self.capacity_tokens:
            raise MappingError(f"request {request} already allocated")
        g = self.geometry
        rows = max(g.k_rows(max_tokens), g.v_rows(max_tokens), 1)
        taken = []
        try:
            for layer in range(self.model.layers):
                for head in range(self.model.heads):
                    _, ch, rank = _coarse(request, layer, head, self.topo)
                    start = self._take(ch, rank, 2 * rows)
                    taken.append((layer, head, ch, rank, start))
        except CapacityError:
            for _, _, ch, rank, start in taken:
                self._give(ch, rank, start, 2 * rows)
            raise
        for layer, head, _, _, start in taken:
            self.regions[(request, layer, head)] = Region(start, start + rows, rows)
        self.capacity_tokens[request] = max_tokens
        self.tokens[request] = 0

    def release(self, request: int):
        self.capacity_tokens.pop(request)
        self.tokens.pop(request)
        for layer in range(self.model.layers):
            for head in range(self.model.heads):
                reg = self.regions.pop((request, layer, head))
                _, ch, rank = _coarse(request, layer, head, self.topo)
                self._give(ch, rank, reg.k_base, 2 * reg.rows)

    def append(self, request: int, n: int):
        if request not in self.capacity_tokens:
            raise MappingError(f"request {request} has no allocation")
        if self.tokens[request] + n > self.capacity_tokens[request]:
            raise CapacityError(
                f"request {request}: {self.tokens[request] + n} tokens exceed reserved {self.capacity_tokens[request]}"
            )
        self.tokens[request] += n

    def k_span(self, request: int, layer: int, head: int, token: int) -> AddressSpan:
        self._check(request, token)
        reg = self.regions[(request, layer, head)]
        return place_k_vector(token, head, layer, request, self.topo, self.model, self.pim, reg.k_base)

    def v_spans(self, request: int, layer: int, head: int, token: int) -> list[AddressSpan]:
        self._check(request, token)
        reg = self.regions[(request, layer, head)]
        return place_v_vector(token, head, layer, request, self.topo, self.model, self.pim, reg.v_base)

    def _check(self, request, token):
        if request not in self.tokens:
            raise MappingError(f"placement missing request {request}")
        if not 0 <= token < self.tokens[request]:
            raise MappingError(f"token {token} not placed for request {request}")


@dataclass
class PlacementStats:
    rankset_bytes: np.ndarray
    channel_bytes: np.ndarray
    bank_bytes: np.ndarray  # per bank index, summed over every rank and chip
    rankset_tokens: np.ndarray
    idle_channels: list
    imbalance: int  # max - min rankset bytes


def placement_stats(p: KvPlacement | dict, model: LlmModel | None = None, topo: HwTopology | None = None,
                    pim: PimParams | None = None) -> PlacementStats:
    """Exact byte histograms.  Accepts a KvPlacement or a {request: tokens} dict."""
    if isinstance(p, KvPlacement):
        tokens, model, topo, pim = p.tokens, p.model, p.topo, p.pim
    else:
        tokens = p
    pim = pim or PimParams()
    g = Geometry.build(model, topo, pim)
    R, C = topo.ranksets, topo.channels
    ids = np.fromiter(tokens.keys(), dtype=np.int64, count=len(tokens))
    n = np.fromiter(tokens.values(), dtype=np.int64, count=len(tokens))
    hb = model.head_dim * model.precision_bytes  # K (or V) bytes per token per head
    lpr = layers_per_rankset(ids, model.layers, R) if len(ids) else np.zeros((0, R), dtype=np.int64)
    rs_tokens = (lpr * n[:, None]).sum(axis=0) if len(ids) else np.zeros(R, dtype=np.int64)
    rs_bytes = rs_tokens * 2 * model.embedding * model.precision_bytes
    hpc = heads_per_channel(model.heads, C)
    ch_bytes = hpc * int(n.sum()) * model.layers * 2 * hb
    # tokens per bank index: K by t % banks; V units dealt within sets
    k_tok = np.zeros(g.banks, dtype=np.int64)
    v_tok = np.zeros(g.banks, dtype=np.int64)
    for cnt in n:
        k_tok += cnt // g.banks + (np.arange(g.banks) < cnt % g.banks)
        per_set = cnt // g.n_sets + (np.arange(g.n_sets) < cnt % g.n_sets)
        v_tok += np.repeat(per_set, g.v_spread)
    scale = model.layers * model.heads
    bank_bytes = (k_tok * hb + v_tok * (hb // g.v_spread)) * scale
    idle = [int(c) for c in np.nonzero(hpc == 0)[0]]
    return PlacementStats(
        rankset_bytes=rs_bytes,
        channel_bytes=ch_bytes,
        bank_bytes=bank_bytes,
        rankset_tokens=rs_tokens,
        idle_channels=idle,
        imbalance=int(rs_bytes.max() - rs_bytes.min()) if R else 0,
    )


def placement_rows(p: KvPlacement, request: int, layers=None, heads=None, tokens=None):
    """Rows of (request, layer, head, token, kind, rankset, channel, bank, row, col) for dumps."""
    layers = range(p.model.layers) if layers is None else layers
    heads = range(p.model.heads) if heads is None else heads
    tokens = range(p.tokens[request]) if tokens is None else tokens
    for layer in layers:
        for head in heads:
            for t in tokens:
                k = p.k_span(request, layer, head, t).start
                yield (request, layer, head, t, "K", k.rankset, k.channel, k.bank, k.row, k.col_offset)
                for sp in p.v_spans(request, layer, head, t):
                    a = sp.start
                    yield (request, layer, head, t, "V", a.rankset, a.channel, a.bank, a.row, a.col_offset)
