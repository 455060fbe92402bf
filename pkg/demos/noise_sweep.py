"""Train once, then watch accuracy as multiplicative noise grows.

``python demos/noise_sweep.py`` uses a small scene so the sweep stays quick.
"""
import argparse

from sarcd.data import synth_scene
from sarcd.evaluate import noise_sweep, sweep_table
from sarcd.model import ModelConfig
from sarcd.preclassify import hierarchical_preclassify, log_ratio_di, select_training_samples
from sarcd.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    i1, i2, truth = synth_scene(size=args.size, seed=args.seed)
    pmap = hierarchical_preclassify(log_ratio_di(i1, i2), seed=args.seed)
    samples = select_training_samples(pmap, 0.08, seed=args.seed)
    model, _ = train(i1, i2, samples, TrainConfig(epochs=args.epochs, seed=args.seed), ModelConfig(seed=args.seed))

    # both dates get independent noise draws; var=0 is the clean pair
    rows = noise_sweep(model, i1, i2, truth, seed=args.seed)
    print(sweep_table(rows))


if __name__ == "__main__":
    main()
