#!/usr/bin/env python3
"""Sweep population size and iteration depth on synthetic items.

Produces the accuracy grid CSV plus (optionally) a matplotlib figure with one
line per iteration depth, mirroring the usual test-time-scaling ablation plot.

Example:
    python scripts/run_population_sweep.py --out-dir results/sweep --n-items 200
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from visagg.cli import main as visagg_main


def plot_grid(csv_path: Path, fig_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = list(csv.DictReader(open(csv_path)))
    depths = sorted({int(r["t"]) for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for t in depths:
        pts = sorted((int(r["n"]), float(r["accuracy"])) for r in rows if int(r["t"]) == t)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"T={t}")
    ax.set_xlabel("population size N")
    ax.set_ylabel("accuracy")
    ax.set_title("Simulator accuracy across population size")
    ax.legend()
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    print(f"wrote {fig_path}", file=sys.stderr)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="results/sweep")
    parser.add_argument("--n-items", type=int, default=200)
    parser.add_argument("--p-correct", type=float, default=0.6)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-grid", default="4,6,8,10,12,14,16")
    parser.add_argument("--t-grid", default="1,2,3,4")
    parser.add_argument("--no-plot", action="store_true")
    args = parser.parse_args()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "grid.csv"
    code = visagg_main(
        [
            "simulate",
            "--out", str(csv_path),
            "--n-items", str(args.n_items),
            "--p-correct", str(args.p_correct),
            "--seed", str(args.seed),
            "--n-grid", args.n_grid,
            "--t-grid", args.t_grid,
        ]
    )
    if code != 0:
        return code
    if not args.no_plot:
        plot_grid(csv_path, out_dir / "grid.png")
    return 0


if __name__ == "__main__":
    sys.exit(main())
