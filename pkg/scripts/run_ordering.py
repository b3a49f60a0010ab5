"""Run every method for several seeds and print the ordering claims.

    python scripts/run_ordering.py --seeds 0 1 2 --out runs/ordering
"""
import argparse
import logging
from pathlib import Path

from decoupled_swarm.config import load_config
from decoupled_swarm.experiment import ordering_claims, run_ordering, skewed_centers, summary_table
from decoupled_swarm.swarm import METHODS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="YAML config (desk-scale defaults otherwise)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=list(METHODS), choices=METHODS)
    ap.add_argument("--rounds", type=int, help="override schedule.rounds")
    ap.add_argument("--out", help="directory for per-seed report CSVs and summary.txt")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, {"schedule.rounds": args.rounds})
    result = run_ordering(cfg, args.seeds, args.methods)
    skewed = skewed_centers(cfg)
    lines = [summary_table(result, skewed), ""]
    if set(METHODS) <= set(args.methods):
        lines += [c.line() for c in ordering_claims(result, skewed, need=(2 * len(args.seeds) + 2) // 3)]
    lines += [f"seed {s}: {t / 60:.1f} min" for s, t in sorted(result.seconds.items())]
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "reports.csv").write_text(result.csv())
        (out / "summary.txt").write_text(text + "\n")


if __name__ == "__main__":
    main()
