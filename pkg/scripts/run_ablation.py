"""Multi-seed ablation sweep on held-out synthetic data; prints median mean-IoU per variant and gate shares.

    python scripts/run_ablation.py --steps 1500 --out results/ablation.json
"""

import argparse
import json
import logging

from omniiml.experiments import SweepConfig, sweep


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--variants", nargs="+", default=list(SweepConfig.variants))
    parser.add_argument("--seeds", nargs="+", type=int, default=list(SweepConfig.seeds))
    parser.add_argument("--steps", type=int, default=SweepConfig.steps)
    parser.add_argument("--lr", type=float, default=SweepConfig.lr_start)
    parser.add_argument("--n-train", type=int, default=SweepConfig.n_train_per_task)
    parser.add_argument("--n-test", type=int, default=SweepConfig.n_test_per_task)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", default="results/ablation.json")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    config = SweepConfig(tuple(args.variants), tuple(args.seeds), args.steps, lr_start=args.lr,
                         n_train_per_task=args.n_train, n_test_per_task=args.n_test, threads=args.threads)
    result = sweep(config, args.out)
    print(json.dumps(result["summary"], indent=2))


if __name__ == "__main__":
    main()
