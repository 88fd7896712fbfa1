"""Retrain ES structures from three gate-training schemes and compare accuracy.

Schemes: budget loss only on frozen warmed-up weights, budget plus task loss
on frozen weights, and full alternating training.

    python scripts/ordering.py --fraction 0.3 --seeds 0 1 2
"""
import argparse
import json

import numpy as np

from dmcp.budget import BudgetConfig, full_flops
from dmcp.data import make_synthetic_dataset
from dmcp.netdef import build_network
from dmcp.sampler import expected_sample, flops_of
from dmcp.trainer import TrainConfig, train, train_pruned_from_scratch

SCHEMES = {
    "budget-only": dict(update_weights=False, arch_task_loss=False),
    "frozen-weights": dict(update_weights=False),
    "full": {},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--net", default="residual3")
    ap.add_argument("--fraction", type=float, default=0.3)
    ap.add_argument("--retrain-epochs", type=int, default=None, help="default: the training schedule length")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    data = make_synthetic_dataset(seed=0)
    net = build_network(args.net)
    target = args.fraction * full_flops(net)
    means = {}
    for label, kw in SCHEMES.items():
        scores = []
        for seed in args.seeds:
            cfg = TrainConfig(budget=BudgetConfig(target), seed=seed, **kw)
            state = train(net, data, cfg)
            es = expected_sample(state.gates, net)
            acc = train_pruned_from_scratch(es, net, data, cfg, epochs=args.retrain_epochs).accuracy
            scores.append(acc)
            print(json.dumps({"scheme": label, "seed": seed, "es": es.retained_groups,
                              "es_over_target": flops_of(es, net) / target, "accuracy": acc}))
        means[label] = float(np.mean(scores))
    print(json.dumps({"mean_accuracy": means}))


if __name__ == "__main__":
    main()
