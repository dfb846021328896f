"""Waveform -> normalized real/imag STFT tensors of shape ``[n_f, T, 2]``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class SignalConfig:
    sample_rate: int = 8000
    window_length: int = 64
    hop: int = 32
    fft_size: int = 64
    clip_bound: float = 3.0

    def __post_init__(self):
        if self.window_length < 2:
            raise ValueError("window_length must be at least 2")
        if self.window_length > self.fft_size:
            raise ValueError("window_length must not exceed fft_size")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.fft_size < 1 or self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.clip_bound <= 0:
            raise ValueError("clip_bound must be positive")

    @property
    def n_freq(self):
        return self.fft_size // 2 + 1

    def frames_for(self, n_samples):
        return (n_samples - self.window_length) // self.hop + 1

    def samples_for(self, n_frames):
        return self.window_length + (n_frames - 1) * self.hop


@dataclass
class Spectrogram:
    """``data[..., 0]`` is the real part, ``data[..., 1]`` the imaginary part."""

    data: np.ndarray

    @property
    def frames(self):
        return self.data.shape[1]


def hann_window(length):
    """Symmetric Hann window, zero at both ends."""
    if length < 2:
        raise ValueError("Hann window needs length >= 2")
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (length - 1)))


def frame_signal(waveform, config):
    """Non-centered frames ``[T, L_w]``; frame ``t`` starts at sample ``t * hop``."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("waveform must be one-dimensional")
    if len(x) < config.window_length:
        raise ValueError(
            f"waveform of {len(x)} samples is shorter than one window ({config.window_length})"
        )
    n_frames = config.frames_for(len(x))
    starts = np.arange(n_frames) * config.hop
    return x[starts[:, None] + np.arange(config.window_length)]


def stft(waveform, config):
    frames = frame_signal(waveform, config) * hann_window(config.window_length)
    spec = np.fft.rfft(frames, n=config.fft_size, axis=1).T  # [n_f, T]
    return Spectrogram(np.stack([spec.real, spec.imag], axis=-1))


def normalize_clip(spec, config):
    """Standardize over all elements (both channels), then clip to ``[-c, c]``."""
    x = np.asarray(spec.data, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty spectrogram")
    var = x.var()
    if var < VARIANCE_FLOOR:
        return Spectrogram(np.zeros_like(x))
    z = (x - x.mean()) / np.sqrt(var)
    c = config.clip_bound
    return Spectrogram(np.clip(z, -c, c))


def pad_or_crop(spec, target_frames):
    """Center-crop or symmetrically zero-pad the time axis to ``target_frames``."""
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    x = spec.data
    t = x.shape[1]
    if t > target_frames:
        start = (t - target_frames) // 2
        return Spectrogram(x[:, start:start + target_frames].copy())
    if t < target_frames:
        left = (target_frames - t) // 2
        right = target_frames - t - left
        return Spectrogram(np.pad(x, ((0, 0), (left, right), (0, 0))))
    return Spectrogram(x.copy())


def featurize(waveform, config, target_frames=None):
    """stft -> normalize_clip -> (optional) pad_or_crop."""
    spec = normalize_clip(stft(waveform, config), config)
    if target_frames is not None:
        spec = pad_or_crop(spec, target_frames)
    return spec
