"""Command-line entry point: ``dcaas run|sweep|tables|replay|check``.

Exit codes: 0 clean, 1 invariant violation or replay mismatch, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from dcaas.cluster import InvariantViolation
from dcaas.harness import (
    ExperimentConfig,
    borrow_rate_configs,
    emit_report,
    run_experiment,
    run_table,
    strong_mix_configs,
)
from dcaas.invariants import check_trace, read_trace, replay

# friendlier names accepted by --param
PARAM_ALIASES = {"borrow_rate": "borrow_fraction", "strong_rate": "strong_fraction", "rate": "rate_per_hour"}


def parse_seeds(text: str) -> list[int]:
    """``7`` -> [7]; ``1..5`` -> [1, 2, 3, 4, 5]; ``1,4,9`` -> [1, 4, 9]."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        a, b = int(lo), int(hi)
        if b < a:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(a, b + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def parse_param(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected name=v1,v2,... got {text!r}")
    name, values = text.split("=", 1)
    name = PARAM_ALIASES.get(name.strip(), name.strip())
    out = []
    for v in values.split(","):
        v = v.strip()
        try:
            out.append(int(v))
        except ValueError:
            try:
                out.append(float(v))
            except ValueError:
                out.append(v)
    return name, out


def _load(path: Optional[str]) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _write_run(out: Path, art, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    art.trace.write(out / f"{stem}.trace.jsonl")
    emit_report(art.report, "csv", out / f"{stem}.csv")
    emit_report(art.report, "json", out / f"{stem}.json")


def cmd_run(args) -> int:
    cfg = _load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    try:
        art = run_experiment(cfg, strict=True)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 1
    if args.out:
        _write_run(Path(args.out), art, f"{cfg.mode}-seed{cfg.seed}")
    print(emit_report(art.report, args.format), end="")
    return 0


def cmd_sweep(args) -> int:
    base = _load(args.config)
    name, values = args.param if args.param else ("seed", [base.seed])
    reports = []
    failed = 0
    for v in values:
        for seed in args.seeds:
            cfg = base.replace(**{name: v}, seed=seed) if name != "seed" else base.replace(seed=seed)
            art = run_experiment(cfg, strict=False)
            if not art.report.safe:
                failed += 1
                print(f"{name}={v} seed={seed}: {(art.report.violations + art.report.conservation)[:3]}", file=sys.stderr)
            reports.append(art.report)
    text = emit_report(reports, args.format, Path(args.out) if args.out else None)
    if not args.out:
        print(text, end="")
    return 1 if failed else 0


def cmd_tables(args) -> int:
    base = _load(args.config)
    if args.seed is not None:
        base = base.replace(seed=args.seed)
    try:
        reports = run_table(borrow_rate_configs(base)) + run_table(strong_mix_configs(base))
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 1
    print(emit_report(reports, args.format, Path(args.out) if args.out else None), end="")
    return 0


def cmd_replay(args) -> int:
    idx, original, fresh = replay(args.trace)
    if idx is None:
        print(f"identical: {len(original)} records")
        return 0
    print(f"first difference at record {idx}")
    print(f"  recorded: {original[idx] if idx < len(original) else '<end>'}")
    print(f"  replayed: {fresh[idx] if idx < len(fresh) else '<end>'}")
    return 1


def cmd_check(args) -> int:
    problems = check_trace(read_trace(args.trace))
    for p in problems:
        print(p)
    if problems:
        print(f"{len(problems)} violation(s)", file=sys.stderr)
        return 1
    print("trace clean")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcaas", description="Quota-based multi-level consistency simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["dcaas", "locking"])
    p.add_argument("--out", help="directory for trace and reports")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter x seed grid")
    p.add_argument("--config")
    p.add_argument("--param", type=parse_param)
    p.add_argument("--seeds", type=parse_seeds, default=[1])
    p.add_argument("--out", help="report file")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("tables", help="run the response-time table configurations")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("replay", help="re-run a recorded trace and diff")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("check", help="audit a recorded trace")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_check)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
