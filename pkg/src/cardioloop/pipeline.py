"""Waveform-to-image pipeline shared by training, evaluation and the live loop.

Fixes the scale bands (0.5-40 Hz for PPG, 0.5-45 Hz for ECG, 32 log-spaced
scales) and the class-index conventions: binary models order classes
(NSR, AFIB); four-class models use the RhythmClass code order.
"""

from __future__ import annotations

import numpy as np

from .cnn import ImageSet, Model, forward
from .signals import Channel, ParameterError, RhythmClass, SimDataset
from .spectro import MorletParams, ScaleVector, cwt, make_scales, scalogram_to_image, segment_windows

PPG_BAND = (0.5, 40.0)
ECG_BAND = (0.5, 45.0)
N_SCALES = 32
WINDOW_S = 10.0

_scale_cache: dict[tuple, ScaleVector] = {}


def scales_for(channel: Channel, fs: float, n: int = N_SCALES,
               p: MorletParams = MorletParams()) -> ScaleVector:
    band = PPG_BAND if channel == Channel.PPG else ECG_BAND
    key = (channel, fs, n, p.f_c, p.sigma)
    if key not in _scale_cache:
        _scale_cache[key] = make_scales(band[0], band[1], n, fs, p)
    return _scale_cache[key]


def class_order(n_classes: int) -> tuple[RhythmClass, ...]:
    if n_classes == 2:
        return (RhythmClass.NSR, RhythmClass.AFIB)
    if n_classes == 4:
        return tuple(RhythmClass)
    raise ParameterError("n_classes must be 2 or 4")


def window_to_image(samples: np.ndarray, fs: float, channel: Channel,
                    p: MorletParams = MorletParams(), h: int = 64,
                    w: int = 64) -> np.ndarray:
    scalogram = cwt(samples, scales_for(channel, fs, p=p), p)
    return scalogram_to_image(scalogram, h, w).pixels


def dataset_to_imageset(ds: SimDataset, n_classes: int,
                        window_s: float = WINDOW_S,
                        stride_s: float | None = None,
                        p: MorletParams = MorletParams()) -> ImageSet:
    """Window every record, transform to spectrogram images, index the labels.

    In binary mode only NSR/AFIB-labeled windows are kept (bradycardic or
    tachycardic spans have no index in a two-class model).
    """
    order = class_order(n_classes)
    code_to_index = {int(c): i for i, c in enumerate(order)}
    images, labels = [], []
    for dr in ds.records:
        for win in segment_windows(dr.record, window_s, stride_s):
            idx = code_to_index.get(int(win.label))
            if idx is None:
                continue
            images.append(window_to_image(win.samples, dr.record.fs, ds.channel, p))
            labels.append(idx)
    if not images:
        raise ParameterError("dataset produced no usable windows")
    return ImageSet(np.stack(images), np.array(labels, dtype=np.int64))


def classify_image(model: Model, pixels: np.ndarray) -> tuple[RhythmClass, float]:
    probs, _ = forward(model, pixels[None])
    idx = int(probs[0].argmax())
    return class_order(model.n_classes)[idx], float(probs[0, idx])


def classify_window(model: Model, samples: np.ndarray, fs: float,
                    channel: Channel,
                    p: MorletParams = MorletParams()) -> tuple[RhythmClass, float]:
    return classify_image(model, window_to_image(samples, fs, channel, p))
