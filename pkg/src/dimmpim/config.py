"""Model, hardware and timing configuration.

A config file is TOML with a required top-level ``version`` and the stanzas
``[model]``, ``[topology]``, ``[timing]``, ``[pim]``, ``[scheduler]`` and
``[baseline]``.  Every stanza is optional; missing keys take the defaults of
the DGX-A100 + DDR4-3200 DIMM-PIM system below.  Unknown keys are rejected so
that typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

CONFIG_VERSION = 1

GiB = 1 << 30
TiB = 1 << 40


class ConfigError(ValueError):
    """Raised for unparseable files and violated invariants."""


@dataclass(frozen=True)
class LlmModel:
    layers: int
    heads: int
    embedding: int
    precision_bytes: int = 2
    ffn_expansion: int = 4
    tensor_parallel: int = 1
    data_parallel: int = 1
    name: str = "custom"

    def __post_init__(self):
        for f in ("layers", "heads", "embedding", "ffn_expansion", "tensor_parallel", "data_parallel"):
            if getattr(self, f) < 1:
                raise ConfigError(f"model.{f} must be >= 1, got {getattr(self, f)}")
        if self.precision_bytes not in (1, 2, 4):
            raise ConfigError(f"model.precision_bytes must be one of 1, 2, 4, got {self.precision_bytes}")
        if self.embedding % self.heads:
            raise ConfigError(
                f"D_h × N_h ≠ D_e: embedding={self.embedding} is not divisible by heads={self.heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.embedding // self.heads

    @property
    def params(self) -> int:
        # attention 4·D², FFN 2·expansion·D² per layer; embeddings ignored
        return (4 + 2 * self.ffn_expansion) * self.embedding**2 * self.layers

    @property
    def weight_bytes(self) -> int:
        return self.params * self.precision_bytes

    @property
    def fc_flops_per_token(self) -> int:
        return 2 * self.params


@dataclass(frozen=True)
class HwTopology:
    channels: int = 16
    dimms_per_channel: int = 2
    ranks_per_dimm: int = 2
    chips_per_rank: int = 8
    bank_groups: int = 4
    banks_per_group: int = 4
    chip_io_bits: int = 8
    bus_bits: int = 64
    row_bytes: int = 1024  # per chip, DDR4 x8 page
    rows_per_bank: int = 262144  # 64 ranks x 32 GiB = host_capacity
    gpu_count: int = 8
    gpu_tflops_fp16: float = 156.0  # system total; see README
    gpu_hbm_bw: float = 16.3e12
    hbm_pim_bw: float = 260.8e12
    pcie_bw: float = 32e9
    pcie_latency_ns: float = 5000.0
    nvlink_bw: float = 600e9
    gpu_efficiency: float = 0.6
    launch_overhead_ns: float = 5000.0
    host_capacity: int = 2 * TiB
    gpu_capacity: int = 640 * GiB

    def __post_init__(self):
        for f in (
            "channels", "dimms_per_channel", "ranks_per_dimm", "chips_per_rank", "bank_groups",
            "banks_per_group", "chip_io_bits", "bus_bits", "row_bytes", "rows_per_bank", "gpu_count",
        ):
            if getattr(self, f) < 1:
                raise ConfigError(f"topology.{f} must be >= 1, got {getattr(self, f)}")
        if self.chips_per_rank * self.chip_io_bits != self.bus_bits:
            raise ConfigError(
                "chips_per_rank × chip_io_bits ≠ bus_bits: "
                f"{self.chips_per_rank} × {self.chip_io_bits} != {self.bus_bits}"
            )
        for f in (
            "gpu_tflops_fp16", "gpu_hbm_bw", "hbm_pim_bw", "pcie_bw", "nvlink_bw",
            "host_capacity", "gpu_capacity",
        ):
            if not getattr(self, f) > 0:
                raise ConfigError(f"topology.{f} must be > 0, got {getattr(self, f)}")
        if not 0 < self.gpu_efficiency <= 1:
            raise ConfigError(f"topology.gpu_efficiency must be in (0, 1], got {self.gpu_efficiency}")
        if self.pcie_latency_ns < 0 or self.launch_overhead_ns < 0:
            raise ConfigError("latencies must be >= 0")

    @property
    def ranks_per_channel(self) -> int:
        return self.dimms_per_channel * self.ranks_per_dimm

    @property
    def ranksets(self) -> int:
        return self.ranks_per_channel

    @property
    def banks_per_chip(self) -> int:
        return self.bank_groups * self.banks_per_group

    @property
    def gpu_flops(self) -> float:
        return self.gpu_tflops_fp16 * 1e12


@dataclass(frozen=True)
class DdrTiming:
    """DDR4 timing; cycle counts in tCK, tREFI/tRFC in ns.

    RRD and CDLR come as short/long pairs (same vs. different bank group).
    The PIM engine streams all-bank reads back to back, so only CCDL (same
    bank group) matters for the read stream; the pairs are kept for
    completeness and for the host write path.
    """

    tCK: float = 0.625
    BL: int = 4
    CCD: int = 4
    RRD_S: int = 4
    RRD_L: int = 8
    RCD: int = 22
    RAS: int = 52
    RP: int = 22
    RC: int = 74
    CL: int = 22
    WL: int = 16
    CDLR_S: int = 4
    CDLR_L: int = 12
    WR: int = 24
    CCDL: int = 8
    RTP: int = 12
    tREFI: float = 7800.0
    tRFC: float = 350.0

    def __post_init__(self):
        if not self.tCK > 0:
            raise ConfigError(f"timing.tCK must be > 0, got {self.tCK}")
        for f in dataclasses.fields(self):
            if f.name == "tCK":
                continue
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"timing.{f.name} must be > 0, got {getattr(self, f.name)}")
        if self.RC < self.RAS + self.RP:
            raise ConfigError(f"RC ≥ RAS + RP violated: {self.RC} < {self.RAS} + {self.RP}")

    def ns(self, cycles: float) -> float:
        return cycles * self.tCK


@dataclass(frozen=True)
class PimParams:
    """Rank-PU / bank-PU parameters."""

    buffer_bytes: int = 256 * 1024
    adder_lanes: int = 8
    softmax_chunk: int = 16
    softmax_cycles_per_chunk: int = 16
    result_buffer_depth: int = 2
    bank_multipliers: int = 4
    v_spread: int = 4
    relayout_cycles: int = 1
    max_deferred_refresh: int = 8

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name == "relayout_cycles":
                continue
            if getattr(self, f.name) < 1:
                raise ConfigError(f"pim.{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.v_spread & (self.v_spread - 1):
            raise ConfigError(f"pim.v_spread must be a power of two, got {self.v_spread}")


@dataclass(frozen=True)
class SchedulerParams:
    policy: str = "l3"
    predictor: str = "learned"  # learned | oracle
    default_chunk: int = 512
    chunk_quantum: int = 16
    window: int = 512
    retrain_every: int = 128
    min_samples: int = 8
    trees: int = 32
    tree_depth: int = 8
    comm_overlap: bool = True
    max_prefill_tokens: int = 1 << 16

    def __post_init__(self):
        if self.policy not in ("l3", "prefill-priority", "single-batch"):
            raise ConfigError(f"scheduler.policy must be l3, prefill-priority or single-batch, got {self.policy}")
        if self.predictor not in ("learned", "oracle"):
            raise ConfigError(f"scheduler.predictor must be learned or oracle, got {self.predictor}")
        if self.default_chunk % self.chunk_quantum:
            raise ConfigError("scheduler.default_chunk must be a multiple of chunk_quantum")


@dataclass(frozen=True)
class BaselineParams:
    cpu_bw: float = 406e9
    rank_pim_factor: float = 4.0
    gpu_prefill_chunk: int = 512

    def __post_init__(self):
        if not (self.cpu_bw > 0 and self.rank_pim_factor > 0 and self.gpu_prefill_chunk > 0):
            raise ConfigError("baseline parameters must be > 0")


@dataclass(frozen=True)
class SimConfig:
    model: LlmModel
    topology: HwTopology = field(default_factory=HwTopology)
    timing: DdrTiming = field(default_factory=DdrTiming)
    pim: PimParams = field(default_factory=PimParams)
    scheduler: SchedulerParams = field(default_factory=SchedulerParams)
    baseline: BaselineParams = field(default_factory=BaselineParams)

    def replace(self, **stanzas: dict) -> "SimConfig":
        """Return a copy with fields of the named stanzas overridden."""
        updates = {}
        for name, values in stanzas.items():
            updates[name] = dataclasses.replace(getattr(self, name), **values)
        return dataclasses.replace(self, **updates)


MODELS = {
    "OPT-66B": LlmModel(64, 72, 9216, 2, tensor_parallel=2, data_parallel=4, name="OPT-66B"),
    "GPT-89B": LlmModel(48, 96, 12288, 2, tensor_parallel=4, data_parallel=2, name="GPT-89B"),
    "GPT-175B": LlmModel(96, 96, 12288, 2, tensor_parallel=8, data_parallel=1, name="GPT-175B"),
}

_STANZAS = {
    "model": LlmModel,
    "topology": HwTopology,
    "timing": DdrTiming,
    "pim": PimParams,
    "scheduler": SchedulerParams,
    "baseline": BaselineParams,
}


def _build(cls, name: str, values: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def config_from_dict(data: dict[str, Any]) -> SimConfig:
    data = dict(data)
    version = data.pop("version", None)
    if version is None:
        raise ConfigError("missing required top-level 'version'")
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}, expected {CONFIG_VERSION}")
    unknown = sorted(set(data) - set(_STANZAS))
    if unknown:
        raise ConfigError(f"unknown stanza(s): {', '.join(unknown)}")

    model_values = dict(data.get("model", {}))
    preset = model_values.pop("preset", None)
    if preset is not None:
        if preset not in MODELS:
            raise ConfigError(f"unknown model preset {preset!r}; choose from {sorted(MODELS)}")
        model_values = {**dataclasses.asdict(MODELS[preset]), **model_values}
    if not model_values:
        raise ConfigError("[model] stanza is required")
    model = _build(LlmModel, "model", model_values)
    parts = {name: _build(cls, name, data.get(name, {})) for name, cls in _STANZAS.items() if name != "model"}
    return SimConfig(model=model, **parts)


def config_to_dict(cfg: SimConfig) -> dict[str, Any]:
    out: dict[str, Any] = {"version": CONFIG_VERSION}
    for name in _STANZAS:
        out[name] = dataclasses.asdict(getattr(cfg, name))
    return out


def load_config(path: str | Path) -> SimConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: SimConfig, path: str | Path | None = None) -> str:
    text = tomli_w.dumps(config_to_dict(cfg))
    if path is not None:
        Path(path).write_text(text)
    return text


def default_config(model: str | LlmModel = "GPT-175B", **stanzas: dict) -> SimConfig:
    m = MODELS[model] if isinstance(model, str) else model
    return SimConfig(model=m).replace(**stanzas)


# Derived constants.


def kv_bytes_per_token(m: LlmModel) -> int:
    """K and V bytes one token adds across all layers."""
    return 2 * m.layers * m.embedding * m.precision_bytes


def kv_bytes_per_token_layer(m: LlmModel) -> int:
    return 2 * m.embedding * m.precision_bytes


def channel_bw(t: HwTopology, d: DdrTiming) -> float:
    """Peak external bandwidth of one channel in bytes/s (DDR: two beats per tCK)."""
    return (t.bus_bits // 8) * 2 / (d.tCK * 1e-9)


def host_channel_bw(t: HwTopology, d: DdrTiming) -> float:
    return t.channels * channel_bw(t, d)


def pim_aggregate_bw(t: HwTopology, d: DdrTiming) -> float:
    """All-bank internal bandwidth: every bank of every chip returns 8 bytes per CCDL."""
    banks = t.channels * t.ranks_per_channel * t.chips_per_rank * t.banks_per_chip
    return banks * 8 / (d.CCDL * d.tCK * 1e-9)


def with_ranksets(cfg: SimConfig, ranksets: int, capacity: float | None = None) -> SimConfig:
    """Copy with ``ranksets`` ranks per channel (2 per DIMM when even) and optional host capacity."""
    if ranksets < 1:
        raise ConfigError(f"ranksets must be >= 1, got {ranksets}")
    rpd = 2 if ranksets % 2 == 0 else 1
    topo = {"dimms_per_channel": ranksets // rpd, "ranks_per_dimm": rpd}
    if capacity is not None:
        topo["host_capacity"] = int(capacity)
    return cfg.replace(topology=topo)
