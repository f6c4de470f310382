"""Summary records, normalized throughput tables and timeline dumps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .sim import RunMetrics

log = logging.getLogger(__name__)

FIELDS = ("policy", "trace", "label", "throughput", "tbt_p50", "tbt_p99", "ttft_p50", "ttft_p99", "iterations",
          "output_tokens", "requests_done", "rejected", "max_decode_batch", "bytes_critical", "bytes_async",
          "busy_gpu", "busy_pim", "bubble_ns_gpu", "bubble_ns_pim")


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def summary_record(m: RunMetrics, label: str = "") -> dict:
    s = m.summary()
    s["label"] = label or m.policy
    return {k: _plain(s.get(k, 0.0)) for k in FIELDS}


def records(runs, labels=None) -> list:
    runs = list(runs)
    if not runs:
        raise ValueError("report needs at least one run")
    labels = labels or [""] * len(runs)
    return [summary_record(m, lab) for m, lab in zip(runs, labels)]


def normalized_table(recs: list, baseline: str = "gpu_only", key: str = "throughput",
                     warn: bool = True) -> tuple[list, bool]:
    """Rows (trace, label, value, value / baseline) per trace.

    The baseline is matched on label.  If a trace has no baseline run the
    absolute values are returned with ratio None and a warning is logged;
    the second value reports whether every trace was normalized.
    """
    rows = []
    ok = True
    for tr in dict.fromkeys(r["trace"] for r in recs):
        group = [r for r in recs if r["trace"] == tr]
        base = next((r[key] for r in group if r["label"] == baseline), None)
        if base is None or base <= 0:
            if warn:
                log.warning("trace %s: no %s run to normalize against; reporting absolute %s", tr, baseline, key)
            ok = False
        for r in group:
            ratio = r[key] / base if base else None
            rows.append({"trace": tr, "label": r["label"], key: r[key], "normalized": ratio})
    return rows, ok


def format_table(rows: list, key: str = "throughput") -> str:
    lines = [f"{'trace':<14}{'system':<22}{key:>14}{'norm':>8}"]
    for r in rows:
        norm = f"{r['normalized']:.2f}" if r["normalized"] is not None else "-"
        lines.append(f"{r['trace']:<14}{r['label']:<22}{r[key]:>14.1f}{norm:>8}")
    return "\n".join(lines)


def write_report(runs, out_dir, fmt: str = "both", labels=None, baseline: str = "gpu_only") -> list:
    """Write summary.{csv,json} and normalized.json; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = records(runs, labels)
    written = []
    if fmt in ("csv", "both"):
        p = out / "summary.csv"
        with p.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=FIELDS)
            w.writeheader()
            w.writerows(recs)
        written.append(p)
    if fmt in ("json", "both"):
        p = out / "summary.json"
        p.write_text(json.dumps(recs, indent=1))
        written.append(p)
    if fmt not in ("csv", "json", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    rows, _ = normalized_table(recs, baseline, warn=False)
    p = out / "normalized.json"
    p.write_text(json.dumps(rows, indent=1))
    written.append(p)
    return written


def read_csv(path) -> list:
    """Summary CSV back into records with numeric fields converted."""
    out = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if k in ("policy", "trace", "label"):
                    rec[k] = v
                else:
                    f = float(v)
                    rec[k] = int(f) if f.is_integer() and "." not in v and "e" not in v.lower() else f
            out.append(rec)
    return out


def timeline_json(m: RunMetrics, path):
    with Path(path).open("w") as fh:
        json.dump([asdict(iv) for iv in m.timeline], fh)


def latency_rows(m: RunMetrics):
    """Per-phase decomposition of every iteration."""
    for rep in m.reports:
        for i, ph in enumerate(rep.phases):
            yield {"iteration": rep.iteration, "phase": i, "kind": rep.kind, "start_ns": rep.start_ns,
                   "duration_ns": rep.duration_ns, "n_decode": rep.n_decode, "prefill_tokens": rep.prefill_tokens,
                   **{k: _plain(v) for k, v in asdict(ph).items()}}
