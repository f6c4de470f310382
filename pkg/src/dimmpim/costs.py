"""Ground-truth latency of one sub-batch phase on each simulated system.

``SystemCosts`` joins the GPU roofline, the decode-attention device and the
PCIe model.  Decode-attention devices:

* ``dimm``: the DIMM-PIM engine, one rankset receiving at a time.
* ``bw``: a bandwidth-only attention device (HBM-PIM, rank-level PIM or the
  host CPU); optional PCIe traffic, receives serialized after compute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SimConfig, kv_bytes_per_token, kv_bytes_per_token_layer
from .gpu import fc_batch_latency, prefill_flops
from .interconnect import OffloadPlan, PimPhase, down_latency, pim_phase, plan_async_offload, receive_bw, up_latency
from .mapping import layers_per_rankset
from .pim import decode_detail, make_engine


@dataclass(frozen=True)
class AttnDevice:
    kind: str  # dimm | bw
    bw: float = 0.0
    pcie: bool = True  # decode vectors and prefill KV cross PCIe
    overlap: bool = True  # rankset receive/compute concurrency


class SystemCosts:
    def __init__(self, cfg: SimConfig, device: AttnDevice | None = None):
        self.cfg = cfg
        self.m = cfg.model
        self.topo = cfg.topology
        self.device = device or AttnDevice("dimm", overlap=cfg.scheduler.comm_overlap)
        self.engine = make_engine(cfg.model, cfg.topology, cfg.timing, cfg.pim)
        self.kvb = kv_bytes_per_token(self.m)
        self.kvb_layer = kv_bytes_per_token_layer(self.m)
        self.rx_bw = receive_bw(cfg.topology, cfg.timing)

    @property
    def ranksets(self) -> int:
        return self.topo.ranksets if self.device.kind == "dimm" else 1

    # GPU side

    def t_p_each(self, c, f) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        f = np.asarray(f, dtype=np.float64)
        t = self.topo
        flops = prefill_flops(c, f, self.m)
        nbytes = (f + 2 * c) * self.kvb
        lat = np.maximum(flops / t.gpu_flops, nbytes / t.gpu_hbm_bw) * 1e9 / t.gpu_efficiency + t.launch_overhead_ns
        return np.where(c > 0, lat, 0.0)

    def t_p(self, c, f) -> float:
        if len(c) != len(f):
            raise ValueError(f"len(c_p)={len(c)} != len(f_p)={len(f)}")
        return float(self.t_p_each(c, f).sum()) if len(c) else 0.0

    def t_batch_vec(self, total):
        """Vectorized fc_batch_latency."""
        total = np.asarray(total, dtype=np.float64)
        m, t = self.m, self.topo
        flops = total * m.fc_flops_per_token
        act = total * m.embedding * m.precision_bytes
        nbytes = float(m.weight_bytes) * m.data_parallel + 2 * act * m.layers
        ar = 2 * act * m.layers / t.nvlink_bw * 1e9 if m.tensor_parallel > 1 else 0.0 * act
        lat = np.maximum(flops / t.gpu_flops, nbytes / t.gpu_hbm_bw) * 1e9 / t.gpu_efficiency + ar
        return np.where(total > 0, lat, 0.0) + t.launch_overhead_ns

    def t_batch(self, total: int) -> float:
        return fc_batch_latency(int(total), self.m, self.topo)

    def t_gpu(self, c, f, n_fd) -> float:
        return self.t_p(c, f) + self.t_batch(int(sum(c)) + int(n_fd))

    def t_gpu_scan(self, base_c, base_f, cand_c, cand_f, n_fd) -> np.ndarray:
        cand = np.asarray(cand_c, dtype=np.float64)
        base = self.t_p(base_c, base_f)
        tp = self.t_p_each(cand, np.full_like(cand, cand_f))
        return base + tp + self.t_batch_vec(sum(base_c) + n_fd + cand)

    # Attention side

    def compute_ns(self, fd, ids) -> np.ndarray:
        """Per-rankset decode attention busy time."""
        if self.device.kind == "dimm":
            return decode_detail(fd, ids, self.engine).rankset_ns
        n = float(np.sum(fd))
        return np.array([n * self.kvb / self.device.bw * 1e9])

    def plan(self, chunks) -> OffloadPlan:
        if self.device.kind == "dimm":
            return plan_async_offload(chunks, self.m, self.topo, self.cfg.timing)
        if not self.device.pcie or not chunks:
            return OffloadPlan(np.zeros(1), np.zeros(1))
        b = float(sum(c for _, c in chunks)) * self.kvb
        return OffloadPlan(np.array([b]), np.array([b / self.topo.pcie_bw * 1e9]))

    def phase(self, fd, ids, chunks, t0: float = 0.0, label: str = "") -> PimPhase:
        n = len(fd) if self.device.pcie else 0
        return pim_phase(self.compute_ns(fd, ids), self.plan(chunks), n, self.m, self.topo,
                         overlap=self.device.overlap, t0=t0, label=label)

    def t_pim(self, fd, ids, chunks) -> float:
        return self.phase(fd, ids, chunks).total_ns

    def t_pim_scan(self, fd, ids, chunks, rid, cand_c) -> np.ndarray:
        """T_PIM with an extra offloaded chunk of each candidate size, vectorized."""
        cand = np.asarray(cand_c, dtype=np.float64)
        C = self.compute_ns(fd, ids)
        base = self.plan(chunks).receive_ns
        if self.device.kind == "dimm":
            lpr = layers_per_rankset([rid], self.m.layers, self.topo.ranksets)[0]
            per_tok = lpr * self.kvb_layer / self.rx_bw * 1e9
        else:
            per_tok = np.array([self.kvb / self.topo.pcie_bw * 1e9 if self.device.pcie else 0.0])
        rx = base[None, :] + cand[:, None] * per_tok[None, :]  # [cand, R]
        n = len(fd) if self.device.pcie else 0
        t_down = down_latency(n, self.m, self.topo)
        t_up = up_latency(n, self.m, self.topo)
        if self.device.overlap:
            slot_end = np.cumsum(rx, axis=1)
            slot_start = slot_end - rx
            preempted = (C[None, :] > 0) & (C[None, :] > slot_start) & (rx > 0)
            finish = np.where(preempted, C[None, :] + rx, np.maximum(C[None, :], slot_end))
            compute_end = np.where(preempted, C[None, :] + rx, C[None, :]).max(axis=1)
            body = finish.max(axis=1)
        else:
            compute_end = np.full(cand.shape, C.max())
            body = C.max() + rx.sum(axis=1)
        return t_down + np.maximum(body, compute_end + t_up)
