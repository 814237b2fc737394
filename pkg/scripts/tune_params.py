"""Grid search over the ULTRA regularization weights on one tuning seed.

Usage: python scripts/tune_params.py [--config FILE] [--seed 100] [--K 5]
           [--log2-beta 16 17 18 19] [--gamma-hu 10 20 30] [--tau]

The seed should differ from the evaluation seeds so the reported study is
not tuned on its own noise.
"""
import argparse
import itertools

from ultract.config import ExperimentConfig, load_config
from ultract.pipeline import build_problem, run_ep, run_fbp, run_ultra, train_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=100)
    ap.add_argument("--K", type=int, default=5)
    ap.add_argument("--log2-beta", type=float, nargs="+", default=[16, 17, 18, 19])
    ap.add_argument("--gamma-hu", type=float, nargs="+", default=[10, 20, 30])
    ap.add_argument("--tau", action="store_true", help="tune the patch-weighted variant")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()

    problem = build_problem(cfg)
    sino = problem.simulate(args.seed)
    ep = run_ep(problem, sino, run_fbp(problem, sino).image)
    print(f"ep rmse {problem.rmse(ep.image):.2f}", flush=True)
    model = train_model(cfg, args.K)
    slope = problem.truth.hu_slope
    best = None
    for lb, g in itertools.product(args.log2_beta, args.gamma_hu):
        r = run_ultra(problem, sino, model, ep.image, beta=2.0**lb, gamma=g / slope, use_tau=args.tau)
        err = problem.rmse(r.image)
        print(f"log2(beta) {lb:5.1f}  gamma {g:5.1f} HU  rmse {err:6.2f}", flush=True)
        if best is None or err < best[0]:
            best = (err, lb, g)
    print(f"best: log2(beta) {best[1]}, gamma {best[2]} HU, rmse {best[0]:.2f}")


if __name__ == "__main__":
    main()
