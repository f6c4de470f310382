"""Roofline latency model for the GPU side (prefill MHA, batched FC, decode MHA baselines).

All rates are whole-system totals.  ``gpu_efficiency`` is the achieved
fraction of peak, so the bound time is divided by it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import HwTopology, LlmModel, kv_bytes_per_token

COMPUTE = "COMPUTE"
MEMORY = "MEMORY"


@dataclass(frozen=True)
class GpuOpCost:
    flops: float
    bytes_moved: float
    latency: float  # ns
    bound: str
    spare_bw: float = 0.0  # bytes/s of HBM left idle during the op


def roofline(flops: float, nbytes: float, topo: HwTopology, kernels: int = 1, bw: float | None = None,
             extra_ns: float = 0.0) -> GpuOpCost:
    bw = topo.gpu_hbm_bw if bw is None else bw
    t_c = flops / topo.gpu_flops * 1e9
    t_m = nbytes / bw * 1e9
    bound = COMPUTE if t_c >= t_m else MEMORY
    busy = max(t_c, t_m) / topo.gpu_efficiency
    lat = busy + extra_ns + kernels * topo.launch_overhead_ns if (flops or nbytes) else kernels * topo.launch_overhead_ns
    spare = bw * (1 - t_m / busy) if busy > 0 else bw
    return GpuOpCost(flops, nbytes, lat, bound, spare)


def prefill_flops(c, f, m: LlmModel):
    c = np.asarray(c, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return 2.0 * m.layers * m.heads * (2.0 * c * (f + c) * m.head_dim)


def prefill_mha_latency(c_p, f_p, m: LlmModel, topo: HwTopology) -> float:
    """t_p in ns: per-request attention kernels run back to back."""
    c = np.asarray(c_p, dtype=np.float64)
    f = np.asarray(f_p, dtype=np.float64)
    if c.shape != f.shape:
        raise ValueError(f"len(c_p)={c.size} != len(f_p)={f.size}")
    live = c > 0
    if not live.any():
        return 0.0
    c, f = c[live], f[live]
    flops = prefill_flops(c, f, m)
    # read K/V of the context, write K/V of the chunk
    nbytes = (f + 2 * c) * kv_bytes_per_token(m)
    t = np.maximum(flops / topo.gpu_flops, nbytes / topo.gpu_hbm_bw) * 1e9 / topo.gpu_efficiency
    return float(t.sum() + live.sum() * topo.launch_overhead_ns)


def fc_batch_cost(total_tokens: int, m: LlmModel, topo: HwTopology) -> GpuOpCost:
    """FC layers for ``total_tokens`` tokens: weights streamed once per replica."""
    if total_tokens < 0:
        raise ValueError("total_tokens must be >= 0")
    if total_tokens == 0:
        return GpuOpCost(0.0, 0.0, topo.launch_overhead_ns, MEMORY, topo.gpu_hbm_bw)
    flops = float(total_tokens) * m.fc_flops_per_token
    act = float(total_tokens) * m.embedding * m.precision_bytes
    nbytes = float(m.weight_bytes) * m.data_parallel + 2 * act * m.layers
    allreduce = 2 * act * m.layers / topo.nvlink_bw * 1e9 if m.tensor_parallel > 1 else 0.0
    return roofline(flops, nbytes, topo, extra_ns=allreduce)


def fc_batch_latency(total_tokens: int, m: LlmModel, topo: HwTopology) -> float:
    return fc_batch_cost(total_tokens, m, topo).latency


def decode_mha_gpu(tokens, m: LlmModel, topo: HwTopology, bw: float | None = None) -> float:
    """Decode attention streamed from (HBM or HBM-PIM) memory at ``bw``."""
    n = float(np.sum(tokens))
    if n == 0:
        return 0.0
    nbytes = n * kv_bytes_per_token(m)
    flops = 4.0 * n * m.embedding * m.layers
    return roofline(flops, nbytes, topo, bw=bw).latency


@dataclass(frozen=True)
class Headroom:
    hidden: bool
    residual_ns: float
    ratio: float  # transfer time / FC latency


def overlap_headroom(fc_cost: GpuOpCost, async_bytes: float, topo: HwTopology) -> Headroom:
    if async_bytes <= 0:
        return Headroom(True, 0.0, 0.0)
    t_pcie = async_bytes / topo.pcie_bw * 1e9
    t_hbm = async_bytes / fc_cost.spare_bw * 1e9 if fc_cost.spare_bw > 0 else float("inf")
    need = max(t_pcie, t_hbm)
    hidden = need <= fc_cost.latency
    return Headroom(hidden, 0.0 if hidden else need - fc_cost.latency, t_pcie / fc_cost.latency)
