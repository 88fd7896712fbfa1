"""Frozen pretrained weights, fresh gates, task loss only: does the width grow back?

    python scripts/recoverability.py --net residual3 --iterations 2000
"""
import argparse

import numpy as np

from dmcp.budget import BudgetConfig, full_flops
from dmcp.data import make_synthetic_dataset
from dmcp.netdef import build_network
from dmcp.trainer import TrainConfig, recoverability_run, train_plain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--net", default="residual3")
    ap.add_argument("--pretrain-epochs", type=int, default=10)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--every", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = make_synthetic_dataset(seed=0)
    net = build_network(args.net)
    full = full_flops(net)
    cfg = TrainConfig(budget=BudgetConfig(0.5 * full), seed=args.seed)
    pre = train_plain(net, data, args.pretrain_epochs, cfg)
    print(f"pretrained eval accuracy {pre.accuracy:.4f}")
    history = recoverability_run(net, pre.params, pre.buffers, data, cfg, args.iterations)
    ratios = np.array([r["e_flops"] for r in history]) / full
    print("iteration,e_flops_over_full,train_acc")
    for r, q in zip(history[:: args.every], ratios[:: args.every]):
        print(f"{r['iteration']},{q:.4f},{r['train_acc']:.4f}")
    print(f"{history[-1]['iteration']},{ratios[-1]:.4f},{history[-1]['train_acc']:.4f}")


if __name__ == "__main__":
    main()
