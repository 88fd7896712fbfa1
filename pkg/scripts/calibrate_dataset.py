"""Plain full-width training on the synthetic task across noise levels.

Used to pick the generator's default noise: the baseline should clear 90%
eval accuracy within 15 epochs without saturating.

    python scripts/calibrate_dataset.py --noise 0.8 1.0 1.2 1.4
"""
import argparse

from dmcp.data import make_synthetic_dataset
from dmcp.netdef import build_network
from dmcp.trainer import TrainConfig, train_plain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--net", default="plain6")
    ap.add_argument("--noise", type=float, nargs="+", default=[1.2])
    ap.add_argument("--epochs", type=int, default=15)
    args = ap.parse_args()

    net = build_network(args.net)
    for noise in args.noise:
        data = make_synthetic_dataset(seed=0, noise=noise)
        res = train_plain(net, data, args.epochs, TrainConfig())
        curve = " ".join(f"{c['eval_acc']:.3f}" for c in res.curve)
        print(f"noise {noise}: final {res.accuracy:.4f} | {curve}")


if __name__ == "__main__":
    main()
