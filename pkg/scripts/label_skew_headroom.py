"""How far the skewed centers' local test labels sit from the clean labels.

A global model that predicts clean labels perfectly scores exactly these Dice
values on the skewed centers, so ``1 - value`` bounds what any personalisation
can gain there.

    python scripts/label_skew_headroom.py --seeds 0 1 2
"""
import argparse

import numpy as np

from decoupled_swarm.config import load_config
from decoupled_swarm.evaluation import dice
from decoupled_swarm.synthdata import build_federation_data


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    cfg = load_config(args.config)
    for seed in args.seeds:
        data = build_federation_data(cfg.centers, seed, cfg.n_generic, cfg.geom)
        for c in data.centers:
            if c.spec.label_skew == "none":
                continue
            test = np.mean([dice(s.label, s.clean_label) for s in c.test])
            train = np.mean([dice(s.label, s.clean_label) for s in c.train])
            print(f"seed {seed} center {c.spec.center_id} ({c.spec.label_skew}): "
                  f"Dice(local test label, clean) {test:.3f}  Dice(train label, clean) {train:.3f}")


if __name__ == "__main__":
    main()
