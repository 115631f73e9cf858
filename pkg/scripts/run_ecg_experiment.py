#!/usr/bin/env python3
"""Four-class ECG experiment: simulate the episode corpus, train the CNN on
CWT spectrogram windows, and print the results-table row."""

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
    parser.add_argument("--episodes-per-class", type=int, default=50)
    parser.add_argument("--epochs", type=int, default=15)
    parser.add_argument("--lr", type=float, default=0.02)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--checkpoint", help="save the trained model here")
    args = parser.parse_args()

    t0 = time.perf_counter()
    ds = simulate_dataset(
        SimConfig(seed=args.seed, n_episodes_per_class=args.episodes_per_class),
        Channel.ECG_LEAD_I)
    images = dataset_to_imageset(ds, 4)
    print(f"simulated {len(ds)} records -> {len(images)} spectrogram windows "
          f"({time.perf_counter() - t0:.0f}s)")

    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=0)
    tr, va, te = split_dataset(images, cfg)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=0,
                      class_weights=inverse_frequency_weights(tr.labels, 4))
    model, history = train(init_model(4, seed=0), tr, cfg)
    for h in history:
        print(f"epoch {h['epoch']:2d}  loss {h['loss']:.4f}  "
              f"train acc {h['accuracy']:.4f}")

    report = evaluate(model, te)
    print(json.dumps(report.to_table_json(), indent=2))
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
        print(f"checkpoint -> {args.checkpoint}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
