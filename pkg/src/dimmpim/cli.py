"""Command line entry point: ``dimmpim <command>``; ``simrun`` is an alias of ``dimmpim simrun``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .config import MODELS, ConfigError, GiB, default_config, load_config, with_ranksets
from .mapping import KvPlacement, placement_rows, placement_stats
from .pim import kernel_commands, make_engine
from .ddr import commands_csv
from .relayout import BurstBeat, ChipImage, chip_residency_check, relayout_beats, relayout_tags
from .report import format_table, latency_rows, normalized_table, records, timeline_json, write_report
from .sim import POLICIES, AuditError, run_simulation
from .trace import TRACE_PARAMS, TraceError, load_trace, named_trace

log = logging.getLogger("dimmpim")

EXIT_AUDIT = 3
EXIT_INPUT = 2


def bundled_config_path(name: str = "dgx_a100.toml") -> Path:
    return Path(str(resources.files("dimmpim") / "configs" / name))


def _config(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config(args.model)
    if getattr(args, "scheduler", None):
        cfg = cfg.replace(scheduler={"policy": args.scheduler})
    if getattr(args, "predictor", None):
        cfg = cfg.replace(scheduler={"predictor": args.predictor})
    if getattr(args, "gpu_tflops", None):
        cfg = cfg.replace(topology={"gpu_tflops_fp16": args.gpu_tflops})
    if getattr(args, "ranksets", None):
        cfg = with_ranksets(cfg, args.ranksets)
    return cfg


def _trace(args):
    if args.trace in TRACE_PARAMS:
        return named_trace(args.trace, args.n, seed=args.seed, scale=args.scale, rate=args.rate)
    tr = load_trace(args.trace, sample_n=args.sample, seed=args.seed)
    return tr.scaled(args.scale) if args.scale != 1.0 else tr


def _add_run_args(p):
    p.add_argument("--config", help="TOML config (default: built-in preset for --model)")
    p.add_argument("--model", default="GPT-175B", choices=sorted(MODELS))
    p.add_argument("--trace", default="OpenR1", help="JSONL trace file or a named synthetic trace")
    p.add_argument("--n", type=int, default=100, help="requests for a synthetic trace")
    p.add_argument("--sample", type=int, help="sample this many records from a trace file")
    p.add_argument("--scale", type=float, default=1.0, help="multiply request lengths")
    p.add_argument("--rate", type=float, help="Poisson arrivals (req/s) for synthetic traces")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scheduler", choices=("l3", "prefill-priority", "single-batch"))
    p.add_argument("--predictor", choices=("learned", "oracle"))
    p.add_argument("--gpu-tflops", type=float, help="override aggregate GPU FP16 TFLOP/s")
    p.add_argument("--capacity-gib", type=float, help="override the KV capacity of every policy")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--format", default="both", choices=("csv", "json", "both"))
    p.add_argument("--baseline", default="gpu_only", help="label to normalize throughput against")


def cmd_simrun(args) -> int:
    cfg = _config(args)
    tr = _trace(args)
    cap = args.capacity_gib * GiB if args.capacity_gib else None
    policies = args.policy or ["l3"]
    runs = []
    for pol in policies:
        m = run_simulation(tr, cfg, pol, capacity=cap, seed=args.seed, keep_timeline=bool(args.timeline))
        runs.append(m)
        log.info("%s: %.1f tok/s over %d iterations", pol, m.throughput, m.iterations)
    out = Path(args.out)
    write_report(runs, out, args.format, baseline=args.baseline)
    if args.timeline:
        for m in runs:
            timeline_json(m, out / f"timeline_{m.policy}.json")
    if args.latency:
        for m in runs:
            rows = list(latency_rows(m))
            if rows:
                with (out / f"latency_{m.policy}.csv").open("w", newline="") as fh:
                    w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                    w.writeheader()
                    w.writerows(rows)
    rows, _ = normalized_table(records(runs), args.baseline)
    print(format_table(rows))
    return 0


def cmd_sweep(args) -> int:
    base = _config(args)
    tr = _trace(args)
    runs, labels = [], []
    for r in args.ranksets_list:
        for cap in args.capacity_list:
            cfg = with_ranksets(base, r, cap * GiB)
            m = run_simulation(tr, cfg, "l3", seed=args.seed)
            runs.append(m)
            labels.append(f"rs{r}_cap{cap:g}G")
            log.info("%s: %.1f tok/s", labels[-1], m.throughput)
    baseline = args.baseline if args.baseline in labels else labels[0]
    write_report(runs, args.out, args.format, labels=labels, baseline=baseline)
    rows, _ = normalized_table(records(runs, labels), baseline)
    print(format_table(rows))
    return 0


def cmd_relayout_dump(args) -> int:
    rng = np.random.default_rng(args.seed)
    ratio = args.elem_bits // args.chip_io_bits
    beats = [BurstBeat(rng.integers(0, 2, args.bus_bits, dtype=np.uint8), i) for i in range(ratio * args.groups)]
    out = relayout_beats(beats, args.elem_bits, args.chip_io_bits)
    tags = relayout_tags(len(beats), args.bus_bits, args.elem_bits, args.chip_io_bits)
    before = ChipImage.from_beats(beats, args.chip_io_bits, args.elem_bits)
    after = ChipImage.from_beats(out, args.chip_io_bits, args.elem_bits, tags)
    for name, img in (("conventional", before), ("relayout", after)):
        print(f"# {name}: residency violations = {len(chip_residency_check(img))}")
        for c in range(img.chip_count):
            print(f"chip{c}: " + " ".join(str(int(t)) for t in img.tags[c][:: args.chip_io_bits]))
    return 0


def cmd_placement_dump(args) -> int:
    cfg = _config(args)
    p = KvPlacement(cfg.model, cfg.topology, cfg.pim)
    for rid in range(args.requests):
        p.allocate(rid, args.tokens)
        p.append(rid, args.tokens)
    layers = range(min(args.layers, cfg.model.layers))
    heads = range(min(args.heads, cfg.model.heads))
    w = csv.writer(sys.stdout)
    w.writerow(("request", "layer", "head", "token", "kind", "rankset", "channel", "bank", "row", "col"))
    for rid in range(args.requests):
        w.writerows(placement_rows(p, rid, layers, heads))
    st = placement_stats(p)
    print(json.dumps({"rankset_bytes": [int(x) for x in st.rankset_bytes], "imbalance": st.imbalance}),
          file=sys.stderr)
    return 0


def cmd_pim_trace(args) -> int:
    cfg = _config(args)
    e = make_engine(cfg.model, cfg.topology, cfg.timing, cfg.pim)
    sys.stdout.write(commands_csv(kernel_commands(e, args.tokens)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dimmpim", description="GPU + DIMM-PIM LLM inference simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simrun", help="simulate a trace under one or more policies")
    _add_run_args(p)
    p.add_argument("--policy", action="append", choices=POLICIES, help="repeatable; default l3")
    p.add_argument("--ranksets", type=int)
    p.add_argument("--timeline", action="store_true", help="write per-run interval timelines as JSON")
    p.add_argument("--latency", action="store_true", help="write per-iteration latency decomposition CSV")
    p.set_defaults(func=cmd_simrun)

    p = sub.add_parser("sweep", help="rankset x capacity grid under the l3 policy")
    _add_run_args(p)
    p.add_argument("--ranksets-list", type=int, nargs="+", default=[2, 4, 8, 16])
    p.add_argument("--capacity-list", type=float, nargs="+", default=[512.0, 2048.0], help="GiB")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("relayout-dump", help="show element residency per chip before and after re-layout")
    p.add_argument("--bus-bits", type=int, default=64)
    p.add_argument("--elem-bits", type=int, default=16)
    p.add_argument("--chip-io-bits", type=int, default=8)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_relayout_dump)

    p = sub.add_parser("placement-dump", help="CSV of K/V addresses for a few requests")
    p.add_argument("--config")
    p.add_argument("--model", default="GPT-175B", choices=sorted(MODELS))
    p.add_argument("--requests", type=int, default=1)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.set_defaults(func=cmd_placement_dump)

    p = sub.add_parser("pim-trace", help="DDR command stream of one head kernel")
    p.add_argument("--config")
    p.add_argument("--model", default="GPT-175B", choices=sorted(MODELS))
    p.add_argument("--tokens", type=int, default=64)
    p.set_defaults(func=cmd_pim_trace)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except AuditError as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (ConfigError, TraceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def simrun_main(argv=None) -> int:
    return main(["simrun", *(sys.argv[1:] if argv is None else argv)])


if __name__ == "__main__":
    sys.exit(main())
