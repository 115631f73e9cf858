"""Session fixtures: simulated corpora and trained models shared by the
loop tests and the acceptance suite.  Building them takes a few minutes of
CPU; they are created once per session.
"""

import time

import pytest

from cardioloop.cnn import (
    TrainConfig,
    evaluate,
    init_model,
    inverse_frequency_weights,
    split_dataset,
    train,
)
from cardioloop.pipeline import dataset_to_imageset
from cardioloop.signals import Channel, SimConfig, simulate_dataset


def _train_run(channel: Channel, n_classes: int, sim_seed: int, train_seed: int,
               n_per_class: int = 50):
    t0 = time.perf_counter()
    ds = simulate_dataset(SimConfig(seed=sim_seed, n_episodes_per_class=n_per_class),
                          channel)
    images = dataset_to_imageset(ds, n_classes)
    cfg = TrainConfig(seed=train_seed)
    tr, va, te = split_dataset(images, cfg)
    cfg = TrainConfig(seed=train_seed,
                      class_weights=inverse_frequency_weights(tr.labels, n_classes))
    model, history = train(init_model(n_classes, seed=train_seed), tr, cfg)
    report = evaluate(model, te)
    return {
        "model": model,
        "report": report,
        "history": history,
        "train": tr,
        "test": te,
        "elapsed_s": time.perf_counter() - t0,
    }


@pytest.fixture(scope="session")
def ecg4_run():
    """Four-class ECG pipeline trained on the default simulator corpus."""
    return _train_run(Channel.ECG_LEAD_I, 4, sim_seed=11, train_seed=0)


@pytest.fixture(scope="session")
def ppg2_run():
    """Binary AFib-vs-NSR PPG screen.

    Uses a 100-per-class corpus: the held-out split needs enough positive
    windows for the AUC estimate to be stable.
    """
    return _train_run(Channel.PPG, 2, sim_seed=7, train_seed=1, n_per_class=100)
