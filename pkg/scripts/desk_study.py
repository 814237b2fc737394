"""Five-seed method comparison on the desk phantom.

Usage: python scripts/desk_study.py [--config FILE] [--seeds 101 102 ...] [--out results.json]
"""
import argparse
import json
import time

from ultract.config import ExperimentConfig, load_config
from ultract.experiments import desk_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[101, 102, 103, 104, 105])
    ap.add_argument("--K", type=int, nargs="+", default=[1, 5, 15])
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    t0 = time.perf_counter()
    res = desk_study(cfg, args.seeds, Ks=args.K, oracle_K=5, tau_K=5, log=lambda m: print(m, flush=True))
    print(res.table())
    print(f"total {time.perf_counter() - t0:.0f}s")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"seeds": res.seeds, "rmse": res.rmse, "runtime": res.runtime}, fh, indent=1)


if __name__ == "__main__":
    main()
