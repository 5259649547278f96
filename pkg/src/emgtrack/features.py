"""Windowing and feature extraction over rectified sEMG streams.

Per channel we compute
  * time domain:      MAV, RMS, VAR
  * frequency domain: MDF, MNF, PF as normalized bin positions
  * wavelet:          level-4 Daubechies-4 approximation and detail coefficients

Every function here is pure. The ``*_batch`` helpers are the vectorized
versions the model uses for whole datasets; they follow exactly the same
arithmetic as the scalar reference functions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import SAMPLE_RATE_HZ, TICK_MS, InvalidInputError

# Daubechies-4 (8 tap) scaling filter.
DB4_SCALING = np.array([
    0.23037781330885523, 0.7148465705525415, 0.6308807679295904,
    -0.02798376941698385, -0.18703481171888114, 0.030841381835986965,
    0.032883011666982945, -0.010597401784997278,
])
DEC_LO = DB4_SCALING[::-1].copy()
DEC_HI = np.array([(-1) ** (k + 1) * DB4_SCALING[k] for k in range(8)])

WAVELET_LEVEL = 4
TIME_FREQ_NAMES = ("mav", "rms", "var", "mdf", "mnf", "pf")


@dataclass(frozen=True)
class EmgWindow:
    """N x C block of rectified samples, rows 20 ms apart."""

    samples: np.ndarray
    start_time: int = 0
    sample_rate: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2:
            raise InvalidInputError(f"window must be 2-D (N x C), got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise InvalidInputError("window contains non-finite samples")
        if np.any(s < 0):
            raise InvalidInputError("rectified sEMG samples must be non-negative")
        if self.sample_rate != SAMPLE_RATE_HZ:
            raise InvalidInputError(f"sample rate must be {SAMPLE_RATE_HZ} Hz")
        object.__setattr__(self, "samples", s)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def c(self) -> int:
        return self.samples.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_time + TICK_MS * np.arange(self.n)

    def recent(self, n_hat: int) -> np.ndarray:
        """The trailing ``n_hat`` rows."""
        return self.samples[-n_hat:]


@dataclass(frozen=True)
class FeatureVector:
    time_freq: np.ndarray  # C x 6
    wavelet: np.ndarray    # C x (2 * level-4 length)


def make_windows(timestamps: Sequence[int], samples: np.ndarray, n: int, hop: int = 1) -> list[EmgWindow]:
    """Frame a timestamped stream into windows of ``n`` rows every ``hop`` samples.

    The partial tail is discarded; a stream shorter than ``n`` gives no windows.
    """
    if hop < 1 or n < 1:
        raise InvalidInputError("n and hop must be >= 1")
    samples = np.asarray(samples, dtype=np.float64)
    timestamps = np.asarray(timestamps)
    if samples.ndim != 2 or len(timestamps) != len(samples):
        raise InvalidInputError("samples must be T x C with one timestamp per row")
    return [
        EmgWindow(samples[i:i + n], start_time=int(timestamps[i]))
        for i in range(0, len(samples) - n + 1, hop)
    ]


def sliding_windows(samples: np.ndarray, n: int, hop: int = 1) -> np.ndarray:
    """Read-only (W x n x C) strided view of every window; no copy."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if len(samples) < n:
        return np.empty((0, n, samples.shape[1]))
    view = np.lib.stride_tricks.sliding_window_view(samples, n, axis=0)  # W x C x n
    return view.transpose(0, 2, 1)[::hop]


def _check_channel(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise InvalidInputError("channel must be a 1-D vector with at least 2 samples")
    return x


def time_features(channel) -> tuple[float, float, float]:
    """MAV, RMS and population variance of one channel."""
    x = _check_channel(channel)
    mav = float(np.mean(np.abs(x)))
    rms = float(np.sqrt(np.mean(x * x)))
    var = float(np.mean((x - x.mean()) ** 2))
    return mav, rms, var


def power_spectrum(channel) -> np.ndarray:
    """|X_k|^2 of the real DFT, bins 0..n//2."""
    x = _check_channel(channel)
    spec = np.fft.rfft(x)
    return spec.real ** 2 + spec.imag ** 2


def freq_features(spectrum) -> tuple[float, float, float]:
    """Median, mean and peak frequency bin, each divided by the highest bin index.

    The DC bin is excluded. A spectrum with no power outside DC maps to zeros.
    """
    p = np.asarray(spectrum, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise InvalidInputError("spectrum must have at least two bins")
    if np.any(p < 0):
        raise InvalidInputError("power spectrum must be non-negative")
    top = p.size - 1
    ac = p[1:]
    total = ac.sum()
    if not total > 0:
        return 0.0, 0.0, 0.0
    k = np.arange(1, p.size)
    csum = np.cumsum(ac)
    # half of the same running sum, so exact ties do not hinge on summation order
    mdf = int(k[np.searchsorted(csum, csum[-1] / 2.0)])
    mnf = float((k * ac).sum() / total)
    pf = int(k[np.argmax(ac)])
    return mdf / top, mnf / top, pf / top


def dwt_step(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One analysis step along the last axis: zero-padded full convolution, keep odd samples.

    Output length is (L + 7) // 2.
    """
    x = np.asarray(x, dtype=np.float64)
    lo = _conv_full(x, DEC_LO)[..., 1::2]
    hi = _conv_full(x, DEC_HI)[..., 1::2]
    return lo, hi


def _conv_full(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    length = x.shape[-1]
    out = np.zeros(x.shape[:-1] + (length + len(taps) - 1,))
    for k, h in enumerate(taps):
        out[..., k:k + length] += h * x
    return out


def wavedec_level4(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Level-4 approximation and detail along the last axis, any input length."""
    approx = np.asarray(x, dtype=np.float64)
    detail = None
    for _ in range(WAVELET_LEVEL):
        approx, detail = dwt_step(approx)
    return approx, detail


def level4_length(n: int) -> int:
    for _ in range(WAVELET_LEVEL):
        n = (n + 7) // 2
    return n


def dwt_level4(channel) -> tuple[np.ndarray, np.ndarray]:
    """15 approximation + 15 detail coefficients of a 150-sample channel."""
    x = np.asarray(channel, dtype=np.float64)
    if x.shape != (150,):
        raise InvalidInputError(f"dwt_level4 expects 150 samples, got shape {x.shape}")
    return wavedec_level4(x)


def extract_features(window: EmgWindow) -> FeatureVector:
    tf, wav = extract_features_batch(window.samples[None])
    return FeatureVector(time_freq=tf[0], wavelet=wav[0])


def extract_features_batch(windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Features for a (B x N x C) stack; returns (B x C x 6, B x C x 2L4).

    Matches :func:`time_features`, :func:`freq_features` and
    :func:`wavedec_level4` applied channel by channel. Values may be signed
    here (the model feeds standardized windows).
    """
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim != 3 or w.shape[1] < 2:
        raise InvalidInputError(f"expected B x N x C windows, got shape {w.shape}")
    x = w.transpose(0, 2, 1)  # B x C x N

    mav = np.mean(np.abs(x), axis=-1)
    rms = np.sqrt(np.mean(x * x, axis=-1))
    var = np.mean((x - x.mean(axis=-1, keepdims=True)) ** 2, axis=-1)

    spec = np.fft.rfft(x, axis=-1)
    ac = (spec.real ** 2 + spec.imag ** 2)[..., 1:]
    top = ac.shape[-1]
    k = np.arange(1, top + 1)
    total = ac.sum(axis=-1)
    live = total > 0
    safe_total = np.where(live, total, 1.0)
    csum = np.cumsum(ac, axis=-1)
    mdf_idx = np.argmax(csum >= csum[..., -1:] / 2.0, axis=-1)
    mdf = np.where(live, (mdf_idx + 1) / top, 0.0)
    mnf = np.where(live, (ac * k).sum(axis=-1) / safe_total / top, 0.0)
    pf = np.where(live, (np.argmax(ac, axis=-1) + 1) / top, 0.0)

    tf = np.stack([mav, rms, var, mdf, mnf, pf], axis=-1)
    a4, d4 = wavedec_level4(x)
    wav = np.concatenate([a4, d4], axis=-1)
    return tf, wav
