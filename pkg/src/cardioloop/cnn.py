"""Small from-scratch convolutional classifier for 64x64 spectrogram images.

Stack: conv3x3x8 / relu / maxpool2 / conv3x3x16 / relu / maxpool2 / dense /
softmax.  Everything is float64 numpy with explicit backprop so gradients can
be audited against finite differences.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .metrics import MetricsReport, average_precision, metrics_from_confusion, roc_auc
from .signals import ParameterError

IMAGE_SIZE = 64
_FLAT = 16 * (IMAGE_SIZE // 4) * (IMAGE_SIZE // 4)


class CheckpointError(ValueError):
    pass


@dataclass
class Model:
    params: dict[str, np.ndarray]
    n_classes: int
    seed: int


@dataclass
class TrainConfig:
    learning_rate: float = 0.02
    batch_size: int = 32
    epochs: int = 15
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch_size >= 1 and epochs >= 0 required")
        if any(f <= 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ParameterError("split fractions must be positive and sum to 1")
        if self.class_weights is not None and any(w < 0 for w in self.class_weights):
            raise ParameterError("class_weights must be nonnegative")


def param_shapes(n_classes: int) -> dict[str, tuple[int, ...]]:
    return {
        "W1": (8, 1, 3, 3), "b1": (8,),
        "W2": (16, 8, 3, 3), "b2": (16,),
        "W3": (n_classes, _FLAT), "b3": (n_classes,),
    }


def init_model(n_classes: int, seed: int) -> Model:
    """He-uniform weights, zero biases."""
    if n_classes not in (2, 4):
        raise ParameterError("n_classes must be 2 or 4")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(n_classes).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, shape)
    return Model(params, n_classes, seed)


def _conv_cols(x: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (B, H*W, C*9) patch matrix for stride-1 same conv
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))       # (B, C, H, W, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)


def _conv_forward(x, w, bias):
    b, _, h, wd = x.shape
    cols = _conv_cols(x)
    wmat = w.reshape(w.shape[0], -1)
    out = cols @ wmat.T + bias
    return out.reshape(b, h, wd, w.shape[0]).transpose(0, 3, 1, 2), cols


def _conv_backward(dy, cols, w, x_shape):
    b, c, h, wd = x_shape
    f = w.shape[0]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(b, h * wd, f)
    wmat = w.reshape(f, -1)
    dw = np.einsum("bpf,bpk->fk", dy_mat, cols).reshape(w.shape)
    db = dy_mat.sum(axis=(0, 1))
    dcols = dy_mat @ wmat                                     # (B, H*W, C*9)
    dwin = dcols.reshape(b, h, wd, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, wd + 2))
    for u in range(3):
        for v in range(3):
            dxp[:, :, u:u + h, v:v + wd] += dwin[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return dw, db, dxp[:, :, 1:-1, 1:-1]


def _pool_forward(x):
    b, c, h, w = x.shape
    xr = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = xr.reshape(b, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    return flat.max(axis=-1), idx


def _pool_backward(dy, idx, x_shape):
    b, c, h, w = x_shape
    dflat = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(dflat, idx[..., None], dy[..., None], axis=-1)
    dxr = dflat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dxr.reshape(b, c, h, w)


def _as_batch(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ParameterError(f"expected (B, {IMAGE_SIZE}, {IMAGE_SIZE}) images")
    return x[:, None]


def _forward_pass(m: Model, x: np.ndarray):
    p = m.params
    z1, cols1 = _conv_forward(x, p["W1"], p["b1"])
    a1 = np.maximum(z1, 0.0)
    p1, idx1 = _pool_forward(a1)
    z2, cols2 = _conv_forward(p1, p["W2"], p["b2"])
    a2 = np.maximum(z2, 0.0)
    p2, idx2 = _pool_forward(a2)
    flat = p2.reshape(x.shape[0], -1)
    logits = flat @ p["W3"].T + p["b3"]
    cache = (x, z1, cols1, a1, p1, idx1, z2, cols2, a2, p2, idx2, flat)
    return logits, cache


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(m: Model, images: np.ndarray) -> tuple[np.ndarray, float]:
    """Class probabilities for a batch, plus elapsed wall-clock seconds."""
    x = _as_batch(images)
    t0 = time.perf_counter()
    logits, _ = _forward_pass(m, x)
    probs = _softmax(logits)
    return probs, time.perf_counter() - t0


def loss_and_grads(m: Model, images: np.ndarray, labels,
                   class_weights=None) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted-mean softmax cross-entropy and gradients for every parameter."""
    x = _as_batch(images)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],) or y.min() < 0 or y.max() >= m.n_classes:
        raise ParameterError("labels must be valid class indices for the batch")
    p = m.params
    b = x.shape[0]
    if class_weights is None:
        w = np.ones(b)
    else:
        w = np.asarray(class_weights, dtype=np.float64)[y]
    w_total = w.sum()
    if w_total <= 0:
        raise ParameterError("batch has zero total class weight")
    logits, cache = _forward_pass(m, x)
    (x0, z1, cols1, a1, p1, idx1, z2, cols2, a2, p2, idx2, flat) = cache

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-(w * log_probs[np.arange(b), y]).sum() / w_total)

    dlogits = np.exp(log_probs)
    dlogits[np.arange(b), y] -= 1.0
    dlogits *= (w / w_total)[:, None]

    grads: dict[str, np.ndarray] = {}
    grads["W3"] = dlogits.T @ flat
    grads["b3"] = dlogits.sum(axis=0)
    dflat = dlogits @ p["W3"]
    dp2 = dflat.reshape(p2.shape)
    da2 = _pool_backward(dp2, idx2, a2.shape)
    dz2 = da2 * (z2 > 0)
    grads["W2"], grads["b2"], dp1 = _conv_backward(dz2, cols2, p["W2"], p1.shape)
    da1 = _pool_backward(dp1, idx1, a1.shape)
    dz1 = da1 * (z1 > 0)
    grads["W1"], grads["b1"], _ = _conv_backward(dz1, cols1, p["W1"], x0.shape)
    return loss, grads


@dataclass
class ImageSet:
    images: np.ndarray  # (N, 64, 64) in [0, 1]
    labels: np.ndarray  # (N,) class indices

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ParameterError("images and labels must align")

    def __len__(self) -> int:
        return int(self.labels.size)


def split_dataset(ds: ImageSet, cfg: TrainConfig) -> tuple[ImageSet, ImageSet, ImageSet]:
    """Deterministic shuffled train/val/test split per cfg.split and cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(ds))
    n_train = int(round(cfg.split[0] * len(ds)))
    n_val = int(round(cfg.split[1] * len(ds)))
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple(ImageSet(ds.images[p], ds.labels[p]) for p in parts)


def inverse_frequency_weights(labels, n_classes: int) -> tuple[float, ...]:
    """Per-class weights proportional to 1/frequency, mean-normalized.

    Window corpora are dominated by normal-rhythm spans; unweighted training
    biases the decision rule toward NSR even when the ranking is good.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    weights = np.where(counts > 0, labels.size / np.maximum(counts, 1), 0.0)
    present = weights[weights > 0]
    return tuple(weights / present.mean())


def train(m: Model, data: ImageSet, cfg: TrainConfig) -> tuple[Model, list[dict]]:
    """Plain minibatch SGD; returns the trained model and per-epoch stats."""
    if len(data) == 0:
        raise ParameterError("dataset is empty")
    if np.unique(data.labels).size < 2:
        raise ParameterError("need at least 2 classes to train")
    model = Model(copy.deepcopy(m.params), m.n_classes, m.seed)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        hits = 0
        for start in range(0, len(data), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(model, data.images[sel], data.labels[sel],
                                         cfg.class_weights)
            for name, g in grads.items():
                model.params[name] -= cfg.learning_rate * g
            losses.append(loss)
            probs, _ = forward(model, data.images[sel])
            hits += int((probs.argmax(axis=1) == data.labels[sel]).sum())
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "accuracy": hits / len(data),
        })
    return model, history


def evaluate(m: Model, test: ImageSet, batch_size: int = 64) -> MetricsReport:
    """Macro one-vs-rest metric suite over a held-out set."""
    if len(test) == 0:
        raise ParameterError("test set is empty")
    probs = np.empty((len(test), m.n_classes))
    elapsed = 0.0
    for start in range(0, len(test), batch_size):
        chunk = test.images[start:start + batch_size]
        probs[start:start + len(chunk)], dt = forward(m, chunk)
        elapsed += dt
    pred = probs.argmax(axis=1)
    confusion = np.zeros((m.n_classes, m.n_classes), dtype=np.int64)
    np.add.at(confusion, (test.labels, pred), 1)
    cm = metrics_from_confusion(confusion)

    aucs, prcs = [], []
    for k in range(m.n_classes):
        pos = (test.labels == k).astype(int)
        if 0 < pos.sum() < pos.size:
            aucs.append(roc_auc(probs[:, k], pos))
            prcs.append(average_precision(probs[:, k], pos))
    return MetricsReport(
        avg_time_s=elapsed / len(test),
        accuracy=cm.accuracy,
        specificity=cm.macro_specificity,
        precision=cm.macro_precision,
        recall=cm.macro_recall,
        f1=cm.macro_f1,
        prc=float(np.mean(prcs)) if prcs else 0.0,
        auc=float(np.mean(aucs)) if aucs else 0.0,
        confusion=confusion,
        undefined=cm.undefined,
    )


def _loss_and_pattern(m: Model, x: np.ndarray, y: np.ndarray):
    logits, cache = _forward_pass(m, x)
    (_, z1, _, _, _, idx1, z2, _, _, _, idx2, _) = cache
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(x.shape[0]), y].mean())
    return loss, (z1 > 0, idx1, z2 > 0, idx2)


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def grad_check(m: Model, images: np.ndarray, labels, eps: float = 1e-4,
               n_coords: int = 120, seed: int = 0) -> float:
    """Max relative error between analytic grads and central differences.

    Coordinates whose +/-eps perturbation flips a ReLU or pooling branch are
    resampled: across a kink the difference quotient no longer estimates the
    derivative, so those draws say nothing about the backward pass.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    x = _as_batch(images)
    if x.shape[0] > 4:
        raise ParameterError("grad_check expects a small batch (<= 4 images)")
    y = np.asarray(labels, dtype=np.int64)
    _, grads = loss_and_grads(m, images, labels)
    rng = np.random.default_rng(seed)
    names = sorted(m.params)
    sizes = np.array([m.params[n].size for n in names])
    starts = np.concatenate(([0], np.cumsum(sizes)))
    picks = rng.integers(0, sizes.sum(), size=8 * n_coords)
    worst = 0.0
    checked = 0
    for pick in picks:
        if checked >= n_coords:
            break
        sel = int(np.searchsorted(np.cumsum(sizes), pick, side="right"))
        name = names[sel]
        offset = int(pick - starts[sel])
        flat = m.params[name].reshape(-1)
        orig = flat[offset]
        flat[offset] = orig + eps
        up, pat_up = _loss_and_pattern(m, x, y)
        flat[offset] = orig - eps
        down, pat_down = _loss_and_pattern(m, x, y)
        flat[offset] = orig
        if not _same_pattern(pat_up, pat_down):
            continue
        numeric = (up - down) / (2 * eps)
        analytic = grads[name].reshape(-1)[offset]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
        checked += 1
    if checked < n_coords:
        raise ParameterError("could not find enough kink-free coordinates")
    return worst


CHECKPOINT_VERSION = 1


def save_checkpoint(m: Model, path: str | Path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "n_classes": m.n_classes,
        "seed": m.seed,
        "shapes": {k: list(v.shape) for k, v in m.params.items()},
    }
    # write via a handle so numpy does not append ".npz" to the given name
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=json.dumps(meta), **m.params)


def load_checkpoint(path: str | Path) -> Model:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        expected = param_shapes(int(meta["n_classes"]))
        params = {}
        for name, shape in expected.items():
            if name not in data:
                raise CheckpointError(f"missing tensor {name}")
            arr = np.asarray(data[name], dtype=np.float64)
            if arr.shape != shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {arr.shape} != {shape}")
            params[name] = arr
    return Model(params, int(meta["n_classes"]), int(meta["seed"]))
