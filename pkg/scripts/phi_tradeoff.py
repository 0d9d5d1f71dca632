"""Print the per-RTT Pareto fraction and best reduction from a phi_sweep CSV.

    python scripts/phi_tradeoff.py results/phi_sweep.csv [--max-latency 1.05]
"""

import argparse
import csv
from collections import defaultdict


def pareto_fraction(points):
    keep = 0
    for i, (a, b) in enumerate(points):
        keep += not any(
            c <= a and d <= b and (c < a or d < b) for j, (c, d) in enumerate(points) if j != i
        )
    return keep / len(points)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("--max-latency", type=float, default=1.05)
    args = ap.parse_args()
    curves = defaultdict(list)
    with open(args.csv, newline="") as fh:
        for r in csv.DictReader(fh):
            curves[float(r["rtt_ms"])].append(
                (float(r["phi"]), float(r["median_latency_ratio"]), float(r["median_ctrl_draft_ratio"]))
            )
    print(f"{'rtt_ms':>8} {'pareto':>8} {'best_reduction':>15} {'at_phi':>8}")
    for rtt, pts in sorted(curves.items()):
        frac = pareto_fraction([(lat, tok) for _, lat, tok in pts])
        ok = [(1 - tok, phi) for phi, lat, tok in pts if lat <= args.max_latency]
        red, phi = max(ok) if ok else (float("nan"), float("nan"))
        print(f"{rtt:>8g} {frac:>8.2f} {red:>15.3f} {phi:>8.3f}")


if __name__ == "__main__":
    main()
