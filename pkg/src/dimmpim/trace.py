"""Request traces: JSONL loading, deterministic sampling and lognormal synthesis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    id: int
    input_len: int
    output_len: int
    arrival: float = 0.0  # seconds


@dataclass
class Trace:
    records: list = field(default_factory=list)
    name: str = ""

    def __len__(self):
        return len(self.records)

    def stats(self) -> dict:
        li = np.array([r.input_len for r in self.records], dtype=float)
        lo = np.array([r.output_len for r in self.records], dtype=float)
        return {"n": len(self.records), "in_mean": li.mean(), "in_std": li.std(), "out_mean": lo.mean(),
                "out_std": lo.std()}

    def scaled(self, factor: float, name: str | None = None) -> "Trace":
        """Lengths multiplied by ``factor`` (kept >= 1)."""
        recs = [TraceRecord(r.id, max(1, round(r.input_len * factor)), max(1, round(r.output_len * factor)), r.arrival)
                for r in self.records]
        return Trace(recs, name or self.name)


# Length statistics (input mean, input std, output mean, output std) of public traces.
TRACE_PARAMS = {
    "OpenR1": (96.0, 75.1, 12684.1, 8464.6),
    "Dolphin": (201.9, 563.0, 3926.2, 4216.0),
    "OpenThoughts": (89.4, 66.7, 6366.7, 4662.9),
    "LongBench": (7703.9, 4285.5, 89.8, 213.7),
}


def _record(obj, lineno: int) -> TraceRecord:
    if not isinstance(obj, dict):
        raise TraceError(f"line {lineno}: expected an object")
    try:
        rid = int(obj["id"])
        li = int(obj["input_len"])
        lo = int(obj["output_len"])
        arrival = float(obj.get("arrival", 0.0))
    except KeyError as exc:
        raise TraceError(f"line {lineno}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise TraceError(f"line {lineno}: {exc}") from None
    if li < 1 or lo < 1:
        raise TraceError(f"line {lineno}: input_len and output_len must be >= 1 (got {li}, {lo})")
    if arrival < 0:
        raise TraceError(f"line {lineno}: arrival must be >= 0")
    return TraceRecord(rid, li, lo, arrival)


def load_trace(path: str | Path, sample_n: int | None = None, seed: int = 0) -> Trace:
    path = Path(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {lineno}: {exc.msg}") from None
            records.append(_record(obj, lineno))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise TraceError("duplicate request ids")
    if sample_n is not None:
        if sample_n > len(records):
            raise TraceError(f"sample_n={sample_n} exceeds {len(records)} records")
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(records), size=sample_n, replace=False)
        records = [records[i] for i in idx]
    records.sort(key=lambda r: (r.arrival, r.id))
    return Trace(records, path.stem)


def save_trace(trace: Trace, path: str | Path):
    with Path(path).open("w") as fh:
        for r in trace.records:
            fh.write(json.dumps({"id": r.id, "input_len": r.input_len, "output_len": r.output_len,
                                 "arrival": r.arrival}) + "\n")


def _lognormal(rng, mean: float, std: float, n: int) -> np.ndarray:
    if mean <= 0 or std < 0:
        raise TraceError("means must be > 0 and stds >= 0")
    if std == 0:
        return np.full(n, max(1, round(mean)), dtype=np.int64)
    s2 = np.log1p(std**2 / mean**2)
    mu = np.log(mean) - s2 / 2
    x = rng.lognormal(mu, np.sqrt(s2), n)
    return np.maximum(np.rint(x), 1).astype(np.int64)


def synth_trace(n: int, in_mean: float, in_std: float, out_mean: float, out_std: float, seed: int = 0,
                rate: float | None = None, name: str = "synthetic") -> Trace:
    """Lognormal lengths with the given moments; Poisson arrivals at ``rate`` req/s if set."""
    rng = np.random.default_rng(seed)
    li = _lognormal(rng, in_mean, in_std, n)
    lo = _lognormal(rng, out_mean, out_std, n)
    if rate:
        arrivals = np.cumsum(rng.exponential(1.0 / rate, n))
    else:
        arrivals = np.zeros(n)
    return Trace([TraceRecord(i, int(a), int(b), float(t)) for i, (a, b, t) in enumerate(zip(li, lo, arrivals))], name)


def named_trace(name: str, n: int, seed: int = 0, scale: float = 1.0, rate: float | None = None) -> Trace:
    if name not in TRACE_PARAMS:
        raise TraceError(f"unknown trace {name!r}; choose from {sorted(TRACE_PARAMS)}")
    mi, si, mo, so = TRACE_PARAMS[name]
    return synth_trace(n, mi * scale, si * scale, mo * scale, so * scale, seed, rate, name)
