"""Synthetic end-to-end benchmark: PGITS vs KNN and the observed-mean predictor.

    python3 scripts/run_synthetic.py --seed 0 --epochs 40 --out synthetic_report.json
"""

import argparse
import dataclasses
import json
import logging

from pgits.benchmark import BenchmarkConfig, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--lr", type=float)
    ap.add_argument("--hide-real", type=float)
    ap.add_argument("--log", help="per-epoch training log (jsonl)")
    ap.add_argument("--out", help="write the report here as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("pgits.training").addFilter(lambda r: "clipped" not in r.getMessage())

    cfg = BenchmarkConfig(seed=args.seed)
    updates = {k: v for k, v in (("max_epochs", args.epochs), ("patience", args.epochs), ("lr", args.lr),
                                 ("hide_real", args.hide_real)) if v is not None}
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **updates))
    report = run_benchmark(cfg, log_path=args.log)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
