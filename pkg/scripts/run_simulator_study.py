#!/usr/bin/env python3
"""End-to-end simulator study: baseline vs aggregation, with a paired CI.

Builds a synthetic dataset, runs the single-sample baseline and the full
aggregation pipeline through the CLI, then scores the paired improvement.
Everything is seeded, so repeated invocations reproduce the same numbers.

Example:
    python scripts/run_simulator_study.py --n-items 500 --out-dir results/study
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from visagg import evalkit
from visagg.cli import main as visagg_main


def write_dataset(path: Path, n_items: int, seed: int) -> None:
    items = evalkit.synthesize_items(n_items, seed=seed)
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(
                json.dumps(
                    {
                        "item_id": item.item_id,
                        "media": list(item.input.media_refs),
                        "question": item.input.question,
                        "answer": item.truth,
                        "choices": list(item.choices),
                        "gt_keys": sorted(item.gt_keys),
                    }
                )
                + "\n"
            )


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="results/study")
    parser.add_argument("--n-items", type=int, default=500)
    parser.add_argument("--p-correct", type=float, default=0.6)
    parser.add_argument("--hallucination-rate", type=float, default=0.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-grounding", action="store_true")
    args = parser.parse_args()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = out_dir / "dataset.jsonl"
    write_dataset(dataset, args.n_items, args.seed)

    common = [
        "--dataset", str(dataset),
        "--seed", str(args.seed),
        "--p-correct", str(args.p_correct),
        "--hallucination-rate", str(args.hallucination_rate),
    ]
    if args.no_grounding:
        common.append("--no-grounding")

    baseline = out_dir / "baseline.jsonl"
    method = out_dir / "method.jsonl"
    for extra, out in ((["--baseline"], baseline), ([], method)):
        code = visagg_main(["run", *common, *extra, "--out", str(out)])
        if code != 0:
            return code
    return visagg_main(
        ["score", "--records", str(method), "--baseline-records", str(baseline),
         "--iterations", "10000", "--seed", str(args.seed)]
    )


if __name__ == "__main__":
    sys.exit(main())
