#!/usr/bin/env python3
"""Binary PPG screen (AFib vs NSR): simulate, train, evaluate, report."""

import argparse
import json
import time

from cardioloop.cnn import (
    TrainConfig,
    evaluate,
    init_model,
    inverse_frequency_weights,
    save_checkpoint,
    split_dataset,
    train,
)
from cardioloop.pipeline import dataset_to_imageset
from cardioloop.signals import Channel, SimConfig, simulate_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--episodes-per-class", type=int, default=100)
    parser.add_argument("--epochs", type=int, default=15)
    parser.add_argument("--lr", type=float, default=0.02)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--checkpoint", help="save the trained model here")
    args = parser.parse_args()

    t0 = time.perf_counter()
    ds = simulate_dataset(
        SimConfig(seed=args.seed, n_episodes_per_class=args.episodes_per_class),
        Channel.PPG)
    images = dataset_to_imageset(ds, 2)
    print(f"simulated {len(ds)} records -> {len(images)} windows")

    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=1)
    tr, _, te = split_dataset(images, cfg)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=1,
                      class_weights=inverse_frequency_weights(tr.labels, 2))
    model, _ = train(init_model(2, seed=1), tr, cfg)
    report = evaluate(model, te)
    print(json.dumps(report.to_table_json(), indent=2))
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
        print(f"checkpoint -> {args.checkpoint}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
