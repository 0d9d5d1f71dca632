"""Recompute median ratios from a run's per-seed CSV and compare with its summary CSV.

Uses only the standard library and the two CSV files, so it shares no code
with the package that produced them.

    python scripts/recompute_ratios.py results/ablation.csv
"""

import argparse
import csv
import statistics
import sys
from collections import defaultdict
from pathlib import Path


def recompute(summary_path: Path, seeds_path: Path, tol: float = 1e-12) -> list[str]:
    with open(summary_path, newline="") as fh:
        summary = list(csv.DictReader(fh))
    per_point = defaultdict(list)
    with open(seeds_path, newline="") as fh:
        for r in csv.DictReader(fh):
            per_point[int(r["point"])].append(r)
    problems = []
    for i, row in enumerate(summary):
        if row["status"] != "ok":
            continue
        seeds = per_point.get(i, [])
        if not seeds:
            problems.append(f"row {i}: no per-seed data")
            continue
        lat = statistics.median(float(s["latency_ms"]) / float(s["baseline_latency_ms"]) for s in seeds)
        draft = statistics.median(
            float(s["ctrl_draft_passes"]) / float(s["baseline_draft_passes"]) for s in seeds
        )
        for name, mine in (("median_latency_ratio", lat), ("median_ctrl_draft_ratio", draft)):
            theirs = float(row[name])
            if abs(mine - theirs) > tol:
                problems.append(f"row {i} {name}: csv {theirs!r}, recomputed {mine!r}")
    return problems


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("summary", type=Path, help="summary CSV written by `wanspec run`")
    ap.add_argument("--seeds", type=Path, help="per-seed CSV (default: <summary>.seeds.csv)")
    args = ap.parse_args(argv)
    seeds = args.seeds or args.summary.with_suffix(".seeds.csv")
    problems = recompute(args.summary, seeds)
    for p in problems:
        print(p)
    print("ratios agree" if not problems else f"{len(problems)} mismatch(es)")
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main())
