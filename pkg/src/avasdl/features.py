"""Audio input features: STFT, log-mel spectrogram and per-frame GCC-PHAT."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rig import N_MICS, RigConfig

SAMPLE_RATE = 48000
WINDOW_SIZE = 512
HOP = 100
N_MELS = 64
N_LAGS = 64
SEGMENT_SECONDS = 2.0
SEGMENT_SAMPLES = int(SAMPLE_RATE * SEGMENT_SECONDS)
SEGMENT_FRAMES = SEGMENT_SAMPLES // HOP  # 960
LOG_EPS = 1e-10
PHAT_FLOOR = 1e-12


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # complex, (time, freq)
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP
    window_size: int = WINDOW_SIZE

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FeatureTensor:
    values: np.ndarray  # (channels, time, freq-or-lag)
    layout: tuple[str, ...]

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class MultichannelClip:
    samples: np.ndarray  # (channels, n)
    sample_rate: int = SAMPLE_RATE

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(signal, window_size: int = WINDOW_SIZE, hop: int = HOP,
         sample_rate: int = SAMPLE_RATE) -> Spectrogram:
    """Frame ``t`` spans samples ``[t*hop, t*hop + window_size)``; the tail is
    zero padded so that the frame count is ``ceil(len / hop)``."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise FeatureError("stft expects a non-empty mono signal")
    if x.size < window_size:
        raise FeatureError(f"signal shorter than the window ({x.size} < {window_size})")
    n_frames = -(-x.size // hop)
    padded = np.zeros((n_frames - 1) * hop + window_size)
    padded[: x.size] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, window_size)[::hop]
    values = np.fft.rfft(frames * hann(window_size), axis=-1)
    return Spectrogram(values=values, sample_rate=sample_rate, hop=hop, window_size=window_size)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def _triangle_integral(x, lo, mid, hi):
    """Integral of the unit-peak triangle (lo, mid, hi) from -inf to x."""
    x = np.clip(x, lo, hi)
    rise = (x - lo) ** 2 / (2 * (mid - lo))
    fall = (mid - lo) / 2 + (hi - mid) / 2 - (hi - x) ** 2 / (2 * (hi - mid))
    return np.where(x <= mid, rise, fall)


def mel_filterbank(window_size: int = WINDOW_SIZE, n_mels: int = N_MELS,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filters from 0 Hz to Nyquist, shape ``(n_mels, window_size//2 + 1)``.

    Each weight is the mean of the triangle over the bin's frequency band
    rather than its value at the bin center, so the narrow low-frequency
    filters keep a non-zero area.
    """
    n_bins = window_size // 2 + 1
    if n_mels >= window_size // 2:
        raise FeatureError("n_mels must be smaller than window_size/2")
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    df = sample_rate / window_size
    centers = np.arange(n_bins) * df
    lo_band = centers - df / 2
    hi_band = centers + df / 2
    fb = np.empty((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges_hz[m : m + 3]
        area = _triangle_integral(hi_band, lo, mid, hi) - _triangle_integral(lo_band, lo, mid, hi)
        fb[m] = area / df
    return fb


def mel_center_frequencies(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


def log_mel(spec: Spectrogram, fb: np.ndarray) -> np.ndarray:
    power = np.abs(spec.values) ** 2
    if fb.shape[1] != power.shape[1]:
        raise FeatureError(f"filterbank has {fb.shape[1]} bins, spectrogram {power.shape[1]}")
    return np.log(power @ fb.T + LOG_EPS)


def gcc_phat(spec_ref: Spectrogram, spec_j: Spectrogram, n_lags: int = N_LAGS) -> np.ndarray:
    """Per-frame GCC-PHAT between the reference and channel ``j``.

    Output column ``k`` holds lag ``k - n_lags//2`` samples.  A positive lag
    means channel ``j`` lags behind the reference.  Identical frames give a
    peak of exactly 1 at lag 0.
    """
    if spec_ref.values.shape != spec_j.values.shape:
        raise FeatureError("spectrogram shapes differ")
    cross = spec_ref.values * np.conj(spec_j.values)
    phat = cross / np.maximum(np.abs(cross), PHAT_FLOOR)
    n_fft = spec_ref.window_size
    # irfft(X_ref X_j*) peaks at index -delay; reverse so the column index grows with delay.
    cc = np.fft.irfft(phat, n=n_fft, axis=-1)
    half = n_lags // 2
    lags = np.arange(-half, n_lags - half)
    return cc[:, (-lags) % n_fft]


def gcc_lags(n_lags: int = N_LAGS) -> np.ndarray:
    half = n_lags // 2
    return np.arange(-half, n_lags - half)


def assemble_features(clip: MultichannelClip, rig: RigConfig,
                      fb: np.ndarray | None = None) -> FeatureTensor:
    samples = np.asarray(clip.samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] != N_MICS:
        raise FeatureError(f"expected {N_MICS} channels, got {samples.shape[0] if samples.ndim == 2 else samples.shape}")
    if samples.shape[1] != SEGMENT_SAMPLES:
        raise FeatureError(f"expected {SEGMENT_SAMPLES} samples per segment, got {samples.shape[1]}")
    if fb is None:
        fb = mel_filterbank()
    ref = rig.layout.reference_index
    specs = [stft(ch) for ch in samples]
    out = np.empty((N_MICS, SEGMENT_FRAMES, N_MELS))
    out[0] = log_mel(specs[ref], fb)
    layout = ["logmel"]
    for k, j in enumerate(rig.layout.non_reference, start=1):
        out[k] = gcc_phat(specs[ref], specs[j], N_LAGS)
        layout.append(f"gcc{ref:02d}-{j:02d}")
    return FeatureTensor(values=out, layout=tuple(layout))


def split_segments(samples: np.ndarray) -> list[np.ndarray]:
    """Cut a (channels, n) block into whole 2-s segments; a short tail is dropped."""
    n = samples.shape[1] // SEGMENT_SAMPLES
    return [samples[:, i * SEGMENT_SAMPLES : (i + 1) * SEGMENT_SAMPLES] for i in range(n)]
