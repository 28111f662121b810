"""Command line entry point.

    bcflsim run --config configs/case_study.yaml [--seed N] [--out DIR]
    bcflsim verify-chain --chain out/chain.hex
    bcflsim report --metrics out/metrics.jsonl

Exit codes: 0 success, 2 configuration error, 3 runtime failure or invalid chain.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .storage import load_chain_dump, verify_chain

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _run(args: argparse.Namespace) -> int:
    from .experiment import run_experiment, write_outputs
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg)
        paths = write_outputs(result, args.out)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # surfaced as a runtime failure with a one-line reason
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    committed = sum(r.committed for r in result.rows)
    print(f"{cfg.name}: {committed}/{len(result.rows)} rounds committed, "
          f"final global score {result.rows[-1].global_score:.4f}")
    for name, p in paths.items():
        print(f"  {name}: {p}")
    return EXIT_OK


def _verify(args: argparse.Namespace) -> int:
    try:
        blocks = load_chain_dump(Path(args.chain).read_text())
    except OSError as e:
        print(f"cannot read chain: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, Exception) as e:
        print(f"malformed chain dump: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if not verify_chain(blocks):
        print(f"chain INVALID ({len(blocks)} blocks)")
        return EXIT_RUNTIME
    print(f"chain ok: {len(blocks)} blocks, tip {blocks[-1].block_hash.hex()[:16]}")
    return EXIT_OK


def _report(args: argparse.Namespace) -> int:
    from .experiment import read_metrics, summarize
    try:
        rows = read_metrics(args.metrics)
    except (OSError, json.JSONDecodeError) as e:
        print(f"cannot read metrics: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    s = summarize(rows)
    print(f"rounds {s['rounds']}, committed {s['committed']}, final global score {s['final_global_score']:.4f}, "
          f"messages {s['messages_total']}, simulated time {s['duration_ms'] / 1000:.1f} s")
    print("round  committed  global_score  messages  duration_ms")
    for r in rows:
        print(f"{r['round']:>5}  {str(r['committed']):>9}  {r['global_score']:>12.4f}  "
              f"{r['messages_total']:>8}  {r['duration_ms']:>11}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bcflsim", description="Blockchain-coordinated federated learning simulator")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment from a YAML config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default="out", help="output directory (default: out)")
    run.set_defaults(func=_run)
    ver = sub.add_parser("verify-chain", help="check the hash links of a chain dump")
    ver.add_argument("--chain", required=True)
    ver.set_defaults(func=_verify)
    rep = sub.add_parser("report", help="summarize a metrics.jsonl file")
    rep.add_argument("--metrics", required=True)
    rep.set_defaults(func=_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
