#!/usr/bin/env python3
"""Nightly-AFib closed-loop demo: train (or load) the PPG screen, run seven
simulated days with 03:00 episodes under a predictive prescription, verify
the audit log by replay, and summarize what happened."""

import argparse
import time

from cardioloop.cnn import (
    TrainConfig,
    init_model,
    inverse_frequency_weights,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
    train,
)
from cardioloop.dosing import DAY_S, Prescription, PrescriptionMode
from cardioloop.loop import EpisodeSpec, LoopConfig, check_causality, replay, run_closed_loop
from cardioloop.pipeline import dataset_to_imageset
from cardioloop.signals import Channel, SimConfig, simulate_dataset


def train_screen(seed: int):
    ds = simulate_dataset(SimConfig(seed=seed, n_episodes_per_class=100), Channel.PPG)
    images = dataset_to_imageset(ds, 2)
    cfg = TrainConfig(seed=1)
    tr, _, _ = split_dataset(images, cfg)
    cfg = TrainConfig(seed=1, class_weights=inverse_frequency_weights(tr.labels, 2))
    model, _ = train(init_model(2, seed=1), tr, cfg)
    return model


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint", help="existing binary PPG checkpoint")
    parser.add_argument("--save-checkpoint", help="save the trained screen here")
    parser.add_argument("--audit", help="write the audit log to this file")
    parser.add_argument("--days", type=int, default=7)
    args = parser.parse_args()

    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        print("training the PPG screen (a few minutes)...")
        model = train_screen(seed=7)
        if args.save_checkpoint:
            save_checkpoint(model, args.save_checkpoint)

    prescription = Prescription(
        dose_ml=1.0, max_doses_per_day=1, min_interdose_interval_s=6 * 3600.0,
        daily_max_ml=1.0, mode=PrescriptionMode.PREDICTION_BASED,
        fixed_times=((8, 0),), lead_time_s=1800.0)
    cfg = LoopConfig(
        days=args.days,
        prescription=prescription,
        ppg_model=model,
        episodes=[EpisodeSpec(day=d, hour=3, duration_min=60.0)
                  for d in range(args.days)],
        sample_every_s=900.0,
        report_delay_s=2 * 3600.0,
        prescription_delay_s=2 * 3600.0,
        seed=5,
    )
    t0 = time.perf_counter()
    audit = run_closed_loop(cfg, audit_path=args.audit)
    print(f"loop finished in {time.perf_counter() - t0:.1f}s "
          f"({len(audit.records)} audit records)")

    for record in audit.records:
        if record.kind == "transition":
            day, tod = divmod(record.ts, DAY_S)
            print(f"  day {int(day)} {tod / 3600:05.2f}h  "
                  f"{record.payload['from']} -> {record.payload['to']}")
    deliveries = [r for r in audit.records if r.kind == "delivery"]
    for r in deliveries:
        day, tod = divmod(r.ts, DAY_S)
        print(f"  day {int(day)} {tod / 3600:05.2f}h  delivered "
              f"{r.payload['delivered_ml']:.3f} mL")
    print(f"replay: {replay(audit)}")
    print(f"causality: {check_causality(audit)}")


if __name__ == "__main__":
    main()
