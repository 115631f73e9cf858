import numpy as np
import pytest

from cardioloop.cnn import (
    CheckpointError,
    ImageSet,
    Model,
    TrainConfig,
    evaluate,
    forward,
    grad_check,
    init_model,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    split_dataset,
    train,
)
from cardioloop.signals import ParameterError


def toy_quadrant_set(n_per_class, n_classes, seed, noise=0.05):
    """Linearly separable images: one bright quadrant per class."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    half = 32
    for k in range(n_classes):
        for _ in range(n_per_class):
            img = rng.uniform(0, noise, (64, 64))
            r, c = divmod(k, 2)
            img[r * half:(r + 1) * half, c * half:(c + 1) * half] += 0.8
            images.append(np.clip(img, 0, 1))
            labels.append(k)
    return ImageSet(np.array(images), np.array(labels))


class TestInitAndForward:
    def test_deterministic_init(self):
        a = init_model(4, seed=3)
        b = init_model(4, seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_zero_biases(self):
        m = init_model(2, seed=0)
        assert np.all(m.params["b1"] == 0)
        assert np.all(m.params["b2"] == 0)
        assert np.all(m.params["b3"] == 0)

    def test_bad_class_count(self):
        with pytest.raises(ParameterError):
            init_model(3, seed=0)

    def test_probabilities_sum_to_one(self):
        m = init_model(4, seed=1)
        rng = np.random.default_rng(0)
        probs, elapsed = forward(m, rng.uniform(size=(5, 64, 64)))
        assert probs.shape == (5, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((probs > 0) & (probs < 1))
        assert elapsed >= 0.0

    def test_zero_model_uniform_probs(self):
        m = init_model(4, seed=1)
        for p in m.params.values():
            p[...] = 0.0
        probs, _ = forward(m, np.zeros((2, 64, 64)))
        np.testing.assert_allclose(probs, 0.25, atol=1e-12)

    def test_shape_mismatch(self):
        m = init_model(2, seed=0)
        with pytest.raises(ParameterError):
            forward(m, np.zeros((2, 32, 32)))

    def test_argmax_logit_shift_invariance(self):
        m = init_model(4, seed=2)
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(3, 64, 64))
        probs, _ = forward(m, x)
        m2 = Model({k: v.copy() for k, v in m.params.items()}, 4, 2)
        m2.params["b3"] = m2.params["b3"] + 5.0  # constant shift on all logits
        probs2, _ = forward(m2, x)
        np.testing.assert_array_equal(probs.argmax(axis=1), probs2.argmax(axis=1))


class TestLoss:
    def test_uniform_prediction_loss_is_ln4(self):
        m = init_model(4, seed=1)
        for p in m.params.values():
            p[...] = 0.0
        loss, _ = loss_and_grads(m, np.zeros((4, 64, 64)), [0, 1, 2, 3])
        assert loss == pytest.approx(np.log(4.0), abs=1e-12)

    def test_saturated_correct_logits_near_zero_loss(self):
        m = init_model(2, seed=1)
        for p in m.params.values():
            p[...] = 0.0
        # drive the correct-class bias far up: softmax saturates
        m.params["b3"][0] = 50.0
        loss, _ = loss_and_grads(m, np.zeros((2, 64, 64)), [0, 0])
        assert loss <= 1e-6

    def test_bad_labels(self):
        m = init_model(2, seed=1)
        with pytest.raises(ParameterError):
            loss_and_grads(m, np.zeros((2, 64, 64)), [0, 5])


class TestGradients:
    def test_finite_difference_agreement(self):
        m = init_model(4, seed=7)
        rng = np.random.default_rng(3)
        x = rng.uniform(size=(2, 64, 64))
        err = grad_check(m, x, [1, 3], eps=1e-4, n_coords=120, seed=0)
        assert err < 1e-4

    def test_eps_zero_rejected(self):
        m = init_model(2, seed=0)
        with pytest.raises(ParameterError):
            grad_check(m, np.zeros((1, 64, 64)), [0], eps=0.0)

    def test_coordinate_sample_deterministic(self):
        m = init_model(2, seed=0)
        rng = np.random.default_rng(4)
        x = rng.uniform(size=(2, 64, 64))
        a = grad_check(m, x, [0, 1], seed=5, n_coords=40)
        b = grad_check(m, x, [0, 1], seed=5, n_coords=40)
        assert a == b


class TestTrain:
    def test_loss_decreases_on_separable_toy(self):
        data = toy_quadrant_set(8, 2, seed=0)
        m = init_model(2, seed=1)
        trained, history = train(m, data, TrainConfig(epochs=6, batch_size=8, seed=2))
        losses = [h["loss"] for h in history]
        for a, b in zip(losses, losses[1:]):
            assert b <= a * 1.05  # monotone within 5% per epoch pair
        assert losses[-1] < losses[0]
        assert history[-1]["accuracy"] == 1.0

    def test_zero_epochs_leaves_model_unchanged(self):
        data = toy_quadrant_set(2, 2, seed=0)
        m = init_model(2, seed=1)
        trained, history = train(m, data, TrainConfig(epochs=0))
        assert history == []
        for name in m.params:
            np.testing.assert_array_equal(trained.params[name], m.params[name])

    def test_deterministic_training(self):
        data = toy_quadrant_set(4, 2, seed=0)
        m = init_model(2, seed=1)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=9)
        t1, _ = train(m, data, cfg)
        t2, _ = train(m, data, cfg)
        for name in t1.params:
            np.testing.assert_array_equal(t1.params[name], t2.params[name])

    def test_single_class_rejected(self):
        data = ImageSet(np.zeros((4, 64, 64)), np.zeros(4, int))
        with pytest.raises(ParameterError):
            train(init_model(2, seed=0), data, TrainConfig(epochs=1))


class TestEvaluate:
    def test_trained_toy_metrics(self):
        data = toy_quadrant_set(10, 4, seed=1)
        cfg = TrainConfig(epochs=12, batch_size=8, seed=3)
        trained, _ = train(init_model(4, seed=2), data, cfg)
        report = evaluate(trained, data)
        assert report.accuracy >= 0.975
        assert report.auc >= 0.99
        assert report.confusion.sum() == len(data)
        assert report.avg_time_s > 0

    def test_permutation_invariance(self):
        data = toy_quadrant_set(5, 2, seed=4)
        m = init_model(2, seed=0)
        r1 = evaluate(m, data)
        rng = np.random.default_rng(0)
        order = rng.permutation(len(data))
        r2 = evaluate(m, ImageSet(data.images[order], data.labels[order]))
        assert r1.accuracy == pytest.approx(r2.accuracy)
        assert r1.auc == pytest.approx(r2.auc)
        assert r1.f1 == pytest.approx(r2.f1)

    def test_table_json_columns(self):
        data = toy_quadrant_set(3, 2, seed=5)
        report = evaluate(init_model(2, seed=0), data)
        row = report.to_table_json()
        for col in ("Avg Time (s)", "Accuracy", "Specificity", "Precision",
                    "Recall", "F1 Score", "PRC", "AUC"):
            assert col in row


class TestSplitAndCheckpoint:
    def test_split_fractions(self):
        data = toy_quadrant_set(25, 4, seed=6)
        tr, va, te = split_dataset(data, TrainConfig(split=(0.7, 0.15, 0.15)))
        assert len(tr) + len(va) + len(te) == 100
        assert len(tr) == 70

    def test_checkpoint_round_trip(self, tmp_path):
        m = init_model(4, seed=11)
        path = tmp_path / "model.ckpt"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.n_classes == 4
        for name in m.params:
            np.testing.assert_array_equal(back.params[name], m.params[name])

    def test_checkpoint_shape_validation(self, tmp_path):
        m = init_model(4, seed=11)
        m.params["W1"] = np.zeros((2, 1, 3, 3))  # wrong filter count
        path = tmp_path / "bad.ckpt"
        save_checkpoint(m, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
