"""Train and compare variants on the default synthetic benchmark.

    python scripts/run_ablation.py --variants full transcap --seeds 0 1 2 3 4 --out results/transfer.csv
"""
import argparse
import logging
import sys
import time

from xtrans2cap.config import load_config, parse_override
from xtrans2cap.synthdata import GenConfig, generate_all
from xtrans2cap.training import ablate, rows_to_csv


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--variants", nargs="+", default=["full", "transcap"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config, dict(parse_override(s) for s in args.set))
    data = generate_all(GenConfig(seed=args.data_seed))
    t0 = time.time()
    rows = ablate(cfg, args.variants, args.seeds, data)
    text = rows_to_csv(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    print(f"# total {time.time() - t0:.0f}s", file=sys.stderr)


if __name__ == "__main__":
    main()
