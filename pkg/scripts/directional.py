"""Zero-shot vs adapted vs raw self-training on the synthetic pair, one line per seed.

    python3 scripts/directional.py --seeds 0 1 2 3 4 --out runs/directional.jsonl
"""
import argparse
import json
import logging
import time
import warnings

import torch

from qada.augment import AugmentConfig
from qada.pipeline import desk_config, directional_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", help="append one JSON line per seed here")
    ap.add_argument("--zeta", type=float)
    ap.add_argument("--phi-cut", type=float)
    ap.add_argument("--lam", type=float)
    ap.add_argument("--tau", type=float)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    warnings.filterwarnings("ignore", category=UserWarning)
    torch.set_num_threads(1)

    wins_zero_shot = wins_baseline = 0
    start = time.time()
    for seed in args.seeds:
        aug = {k: v for k, v in (("zeta", args.zeta), ("phi_cut", args.phi_cut)) if v is not None}
        top = {k: v for k, v in (("lam", args.lam), ("tau", args.tau)) if v is not None}
        cfg = desk_config(seed, augment=AugmentConfig(**aug), **top)
        r = directional_run(seed, config=cfg)
        wins_zero_shot += r.adapted["f1"] > r.zero_shot["f1"]
        wins_baseline += r.adapted["f1"] >= r.baseline["f1"]
        print(
            f"seed {seed:3d}  source-dev EM {r.source_dev['em']:5.1f}  target F1: zero-shot {r.zero_shot['f1']:5.1f}"
            f"  adapted {r.adapted['f1']:5.1f}  self-training {r.baseline['f1']:5.1f}  ({time.time() - start:.0f}s)",
            flush=True,
        )
        if args.out:
            with open(args.out, "a", encoding="utf-8") as fh:
                fh.write(r.to_json() + "\n")
    n = len(args.seeds)
    print(f"adapted > zero-shot: {wins_zero_shot}/{n}   adapted >= self-training: {wins_baseline}/{n}")


if __name__ == "__main__":
    main()
