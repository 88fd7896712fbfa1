"""Train a reference net against a FLOPs target and report how well it holds.

    python scripts/budget_attainment.py --net residual3 --fraction 0.5 --seeds 0 1 2
"""
import argparse
import json
import time

import numpy as np

from dmcp.budget import BudgetConfig, full_flops
from dmcp.data import make_synthetic_dataset
from dmcp.netdef import build_network
from dmcp.sampler import expected_sample, flops_of
from dmcp.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--net", default="residual3")
    ap.add_argument("--fraction", type=float, default=0.5)
    ap.add_argument("--gamma", type=float, default=0.95)
    ap.add_argument("--lambda-reg", type=float, default=0.1)
    ap.add_argument("--gate-mode", default="markov", choices=["markov", "bernoulli"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()

    data = make_synthetic_dataset(seed=0)
    net = build_network(args.net)
    target = args.fraction * full_flops(net)
    for seed in args.seeds:
        cfg = TrainConfig(budget=BudgetConfig(target, args.gamma, args.lambda_reg), gate_mode=args.gate_mode,
                          seed=seed)
        t = time.time()
        state = train(net, data, cfg)
        e = np.array([r["e_flops"] for r in state.history]) / target
        tail = e[int(0.8 * len(e)):]
        es = expected_sample(state.gates, net)
        print(json.dumps({
            "seed": seed,
            "seconds": round(time.time() - t, 1),
            "tail_min": float(tail.min()),
            "tail_max": float(tail.max()),
            "held": bool(np.all((tail >= args.gamma) & (tail <= 1.0))),
            "es": es.retained_groups,
            "es_over_target": flops_of(es, net) / target,
        }))


if __name__ == "__main__":
    main()
