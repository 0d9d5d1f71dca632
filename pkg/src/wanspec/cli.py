"""Command-line front-end: run, gen-trace, validate, serve."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiment import (
    ExperimentError,
    load_experiment,
    load_manifest,
    rows_to_csv,
    run_experiment,
    summary_table,
    write_outputs,
)
from .oracle import OracleConfig, OracleError, write_trace

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def cmd_run(args) -> int:
    try:
        if args.manifest:
            exp = load_manifest(args.manifest)
        else:
            exp = load_experiment(args.file)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rows = run_experiment(exp, jobs=args.jobs)
    csv_path, manifest_path = write_outputs(exp, rows, Path(args.out) if args.out else None)
    print(summary_table(rows))
    print(f"wrote {csv_path} and {manifest_path}")
    failed = [r for r in rows if r.get("status", "ok") != "ok"]
    if failed:
        print(f"{len(failed)} row(s) failed", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        exp = load_experiment(args.file)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"ok: suite={exp.suite} rtt_ms={exp.rtt_grid} seeds={exp.seed}..{exp.seeds[-1]}")
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    cfg = OracleConfig()
    if args.config:
        try:
            cfg = load_experiment(args.config).base.oracle_cfg
        except ExperimentError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    overrides = {
        "seed": args.seed,
        "match_prob": args.match_prob,
        "sequence_length": args.length,
        "entropy_low": args.entropy_low,
        "entropy_high": args.entropy_high,
    }
    cfg = replace(cfg, kind="stochastic", trace_path=None, **{k: v for k, v in overrides.items() if v is not None})
    try:
        path = write_trace(args.out, cfg, args.n)
    except OracleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc.strerror}", file=sys.stderr)
        return EXIT_FAILED
    print(f"wrote {args.n} sequence(s) to {path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .runtime import ConnectionLost, HandshakeError, RuntimeConfig, serve
    from .sim import run_views, sequences_for
    from .experiment import CSV_COLUMNS
    from .wire import WireError, config_digest

    try:
        exp = load_experiment(args.config)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.role == "controller" and not args.listen:
        print("error: --role controller needs --listen host:port", file=sys.stderr)
        return EXIT_USAGE
    if args.role == "worker" and not args.connect:
        print("error: --role worker needs --connect host:port", file=sys.stderr)
        return EXIT_USAGE
    host, port = args.listen or args.connect
    base = replace(exp.base, mode="wanspec", rtt=args.emulate_rtt_ms)
    views = sequences_for(base.oracle_cfg, base.num_requests)
    rcfg = RuntimeConfig(
        args.role,
        host,
        port,
        base.effective_controller(),
        base.effective_worker(),
        config_digest(exp.text),
        emulate_rtt_ms=args.emulate_rtt_ms,
        jitter_ms=base.jitter,
        seed=exp.seed,
        connect_timeout=args.timeout,
    )
    try:
        result = serve(rcfg, views)
    except HandshakeError as exc:
        print(f"error: handshake refused: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ConnectionLost, WireError, OSError) as exc:
        print(f"error: request failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if result.metrics is None:
        print(f"worker done: {sum(result.worker_steps)} draft steps over {len(views)} requests")
        return EXIT_OK
    m = result.metrics
    bl = run_views(replace(base, mode="baseline_sequential"), views)
    row = {
        "suite": "serve",
        "stage": "runtime",
        "mode": "wanspec",
        "branching": int(base.branching),
        "theta_on": int(base.theta_on),
        "phi_on": int(base.phi_on),
        "rtt_ms": args.emulate_rtt_ms,
        "phi": rcfg.ctrl_cfg.phi,
        "theta": rcfg.worker_cfg.theta,
        "b": rcfg.worker_cfg.b,
        "s": rcfg.worker_cfg.s,
        "k": rcfg.ctrl_cfg.k,
        "seed": exp.seed,
        "iterations": 1,
        "median_latency_ratio": m.total_latency / bl.total_latency,
        "median_ctrl_draft_ratio": m.controller_draft_passes / bl.controller_draft_passes,
        "median_latency_ms": m.total_latency,
        "median_baseline_latency_ms": bl.total_latency,
        "median_ctrl_draft_passes": m.controller_draft_passes,
        "median_baseline_draft_passes": bl.controller_draft_passes,
        "sync_stalls": int(m.total("sync_stalls")),
        "status": "ok",
    }
    assert list(row) == CSV_COLUMNS
    text = rows_to_csv([row])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(summary_table([row]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wanspec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment file (or re-run a manifest)")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("file", nargs="?", help="experiment TOML file")
    src.add_argument("--manifest", help="re-run exactly what this manifest records")
    run.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    run.add_argument("--out", help="override the CSV path (manifest goes alongside)")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="parse-check an experiment file")
    val.add_argument("file")
    val.set_defaults(func=cmd_validate)

    gen = sub.add_parser("gen-trace", help="write a synthetic trace file")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=int, default=1, help="number of sequences")
    gen.add_argument("--config", help="take the [oracle] section of this experiment file")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--match-prob", type=float)
    gen.add_argument("--length", type=int, help="tokens per sequence")
    gen.add_argument("--entropy-low", type=float)
    gen.add_argument("--entropy-high", type=float)
    gen.set_defaults(func=cmd_gen_trace)

    srv = sub.add_parser("serve", help="run one endpoint of a networked deployment")
    srv.add_argument("--role", choices=("controller", "worker"), required=True)
    where = srv.add_mutually_exclusive_group(required=True)
    where.add_argument("--listen", type=_hostport, metavar="HOST:PORT")
    where.add_argument("--connect", type=_hostport, metavar="HOST:PORT")
    srv.add_argument("--config", required=True, help="shared experiment file")
    srv.add_argument("--emulate-rtt-ms", type=float, default=0.0)
    srv.add_argument("--timeout", type=float, default=30.0, help="connect/accept timeout, seconds")
    srv.add_argument("--out", help="metrics CSV (controller only)")
    srv.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "gen-trace" and args.n < 1:
        print("error: --n must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
