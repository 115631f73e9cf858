"""Morlet-wavelet scalograms and normalized spectrogram images.

Scales are dimensionless dilations measured in samples, so a scale a maps to
the pseudo-frequency f = f_c * fs / a.  The transform correlates the signal
with the conjugated, 1/sqrt(a)-normalized, a-dilated mother wavelet, with the
kernel truncated at |t| <= 4*sigma*a samples and edges zero-padded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .signals import ARRHYTHMIC, ParameterError, RhythmClass, WaveformRecord


@dataclass(frozen=True)
class MorletParams:
    f_c: float = 1.0    # central frequency in mother-wavelet time units
    sigma: float = 1.0  # Gaussian window width

    def __post_init__(self):
        if self.f_c <= 0 or self.sigma <= 0:
            raise ParameterError("f_c and sigma must be positive")


def morlet(t, p: MorletParams = MorletParams()):
    """Complex mother wavelet: cosine wave under a Gaussian window."""
    t = np.asarray(t, dtype=np.float64)
    out = np.exp(2j * math.pi * p.f_c * t) * np.exp(-(t ** 2) / (2.0 * p.sigma ** 2))
    return complex(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScaleVector:
    scales: tuple[float, ...]
    fs: float

    def __post_init__(self):
        arr = np.asarray(self.scales)
        if arr.size == 0 or np.any(arr <= 0) or np.any(np.diff(arr) <= 0):
            raise ParameterError("scales must be positive and strictly increasing")

    def __len__(self) -> int:
        return len(self.scales)

    def pseudo_frequencies(self, p: MorletParams = MorletParams()) -> np.ndarray:
        return p.f_c * self.fs / np.asarray(self.scales)


def make_scales(f_min: float, f_max: float, n: int, fs: float,
                p: MorletParams = MorletParams()) -> ScaleVector:
    """n log-spaced scales whose pseudo-frequencies span [f_min, f_max]."""
    if not 0 < f_min < f_max:
        raise ParameterError("need 0 < f_min < f_max")
    if f_max > fs / 2:
        raise ParameterError("f_max exceeds the Nyquist frequency")
    if n < 2:
        raise ParameterError("need at least 2 scales")
    a_min = p.f_c * fs / f_max
    a_max = p.f_c * fs / f_min
    scales = np.logspace(math.log10(a_min), math.log10(a_max), n)
    scales[0], scales[-1] = a_min, a_max  # pin endpoints exactly
    return ScaleVector(tuple(float(a) for a in scales), fs)


@dataclass
class Scalogram:
    coefficients: np.ndarray  # complex, [n_scales x n_samples]
    scales: ScaleVector
    window_origin: int = 0


def _kernel(a: float, p: MorletParams) -> np.ndarray:
    half = int(math.floor(4.0 * p.sigma * a))
    j = np.arange(-half, half + 1, dtype=np.float64)
    return morlet(j / a, p) / math.sqrt(a)


@lru_cache(maxsize=8)
def _kernel_ffts(scales: tuple[float, ...], f_c: float, sigma: float,
                 n_fft: int) -> tuple[np.ndarray, tuple[int, ...]]:
    p = MorletParams(f_c, sigma)
    ffts = np.empty((len(scales), n_fft), dtype=np.complex128)
    halves = []
    for r, a in enumerate(scales):
        g_rev = np.conj(_kernel(a, p))[::-1]
        halves.append((g_rev.size - 1) // 2)
        ffts[r] = sfft.fft(g_rev, n_fft)
    return ffts, tuple(halves)


def _window_samples(w) -> np.ndarray:
    samples = w.samples if hasattr(w, "samples") else w
    return np.asarray(samples, dtype=np.float64)


def cwt(w, s: ScaleVector, p: MorletParams = MorletParams()) -> Scalogram:
    """Scalogram of a signal window via frequency-domain correlation."""
    x = _window_samples(w)
    if x.size == 0:
        raise ParameterError("window is empty")
    n = x.size
    max_half = int(math.floor(4.0 * p.sigma * max(s.scales)))
    n_fft = sfft.next_fast_len(n + 2 * max_half)
    kernel_ffts, halves = _kernel_ffts(s.scales, p.f_c, p.sigma, n_fft)
    spectrum = sfft.fft(x, n_fft)
    coeffs = np.empty((len(s), n), dtype=np.complex128)
    for r in range(len(s)):
        full = sfft.ifft(spectrum * kernel_ffts[r])
        coeffs[r] = full[halves[r]: halves[r] + n]
    return Scalogram(coeffs, s, int(getattr(w, "origin", 0)))


@dataclass
class SpectroImage:
    pixels: np.ndarray  # [H x W] in [0, 1]
    label: RhythmClass | None = None


def bilinear_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    src_h, src_w = img.shape
    rows = np.linspace(0.0, src_h - 1.0, h)
    cols = np.linspace(0.0, src_w - 1.0, w)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, src_h - 1)
    c1 = np.minimum(c0 + 1, src_w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def scalogram_to_image(s: Scalogram, h: int = 64, w: int = 64,
                       eps: float = 1e-6,
                       label: RhythmClass | None = None) -> SpectroImage:
    """Log-magnitude, per-image min-max normalized, bilinearly resized."""
    if h < 8 or w < 8:
        raise ParameterError("image dimensions must be >= 8")
    if eps <= 0:
        raise ParameterError("eps must be positive")
    raw = np.log(np.abs(s.coefficients) + eps)
    if raw.max() == raw.min():
        return SpectroImage(np.zeros((h, w)), label)
    mag = bilinear_resize(raw, h, w)
    lo, hi = float(mag.min()), float(mag.max())
    if hi == lo:
        return SpectroImage(np.zeros((h, w)), label)
    return SpectroImage((mag - lo) / (hi - lo), label)


@dataclass
class Window:
    samples: np.ndarray
    origin: int          # sample index in the source record
    fs: float
    label: RhythmClass


def _majority_label(codes: np.ndarray) -> RhythmClass:
    counts = np.bincount(codes, minlength=len(RhythmClass))
    best = counts.max()
    tied = [RhythmClass(c) for c in np.flatnonzero(counts == best)]
    arrhythmic = [c for c in tied if c in ARRHYTHMIC]
    return arrhythmic[0] if arrhythmic else tied[0]


def segment_windows(w: WaveformRecord, window_s: float = 10.0,
                    stride_s: float | None = None) -> list[Window]:
    """Cut a record into fixed-length windows labeled by per-sample majority.

    Label ties are resolved in favor of the arrhythmic class.
    """
    stride_s = window_s if stride_s is None else stride_s
    win_n = int(round(window_s * w.fs))
    stride_n = int(round(stride_s * w.fs))
    if win_n < 1 or stride_n < 1:
        raise ParameterError("window and stride must be positive")
    if win_n > w.samples.size:
        raise ParameterError("window longer than record")
    out = []
    for start in range(0, w.samples.size - win_n + 1, stride_n):
        codes = w.sample_labels[start:start + win_n]
        out.append(Window(w.samples[start:start + win_n], start, w.fs,
                          _majority_label(codes)))
    return out


def save_spectro_pgm(img: SpectroImage, path: str | Path, *,
                     window_origin: int = 0, fs: float = 0.0,
                     scales: ScaleVector | None = None) -> tuple[Path, Path]:
    """Write a P2 ASCII PGM plus its JSON sidecar; returns both paths."""
    path = Path(path)
    h, w = img.pixels.shape
    gray = np.clip(np.rint(img.pixels * 255), 0, 255).astype(int)
    lines = ["P2", f"{w} {h}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in gray)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({
        "label": img.label.name if img.label is not None else None,
        "window_origin": window_origin,
        "fs": fs,
        "scales": list(scales.scales) if scales is not None else [],
    }, indent=2) + "\n", encoding="utf-8")
    return path, sidecar
