import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reverbfl import frontend as FE


def naive_dft(frame, n_fft):
    """O(F^2) DFT of a zero-padded frame, bins 0..F/2."""
    padded = np.zeros(n_fft)
    padded[:len(frame)] = frame
    n = np.arange(n_fft)
    bins = np.arange(n_fft // 2 + 1)
    return (padded[None, :] * np.exp(-2j * np.pi * bins[:, None] * n[None, :] / n_fft)).sum(axis=1)


def test_hann_small_cases():
    np.testing.assert_array_equal(FE.hann_window(2), [0.0, 0.0])
    np.testing.assert_allclose(FE.hann_window(3), [0.0, 1.0, 0.0], atol=1e-15)
    table = [0.5 * (1 - np.cos(2 * np.pi * k / 7)) for k in range(8)]
    np.testing.assert_allclose(FE.hann_window(8), table, atol=1e-12)
    with pytest.raises(ValueError):
        FE.hann_window(1)


def test_config_validation():
    with pytest.raises(ValueError):
        FE.SignalConfig(window_length=128, fft_size=64)
    with pytest.raises(ValueError):
        FE.SignalConfig(fft_size=96, window_length=64)
    with pytest.raises(ValueError):
        FE.SignalConfig(hop=0)


@pytest.mark.parametrize("fft_size,n_freq", [(256, 129), (1024, 513)])
def test_bin_count(fft_size, n_freq):
    cfg = FE.SignalConfig(16000, fft_size, fft_size // 2, fft_size)
    assert cfg.n_freq == n_freq
    assert FE.stft(np.zeros(fft_size * 2), cfg).data.shape[0] == n_freq


def test_zero_waveform_and_frame_count():
    cfg = FE.SignalConfig(8000, 64, 32, 64)
    spec = FE.stft(np.zeros(300), cfg)
    assert spec.frames == (300 - 64) // 32 + 1
    assert not spec.data.any()
    with pytest.raises(ValueError):
        FE.stft(np.zeros(63), cfg)


def test_sinusoid_frames_match_naive_dft():
    cfg = FE.SignalConfig(8000, 48, 20, 64)
    x = np.sin(2 * np.pi * 700 * np.arange(400) / 8000)
    spec = FE.stft(x, cfg).data
    w = FE.hann_window(48)
    for t in np.random.default_rng(0).choice(spec.shape[1], 5, replace=False):
        ref = naive_dft(x[t * 20:t * 20 + 48] * w, 64)
        np.testing.assert_allclose(spec[:, t, 0], ref.real, atol=1e-9)
        np.testing.assert_allclose(spec[:, t, 1], ref.imag, atol=1e-9)


def test_half_spectrum_reconstructs_frame():
    cfg = FE.SignalConfig(8000, 64, 32, 64)
    x = np.random.default_rng(1).standard_normal(200)
    spec = FE.stft(x, cfg).data
    half = spec[:, 2, 0] + 1j * spec[:, 2, 1]
    frame = np.fft.irfft(half, n=64)
    np.testing.assert_allclose(frame, x[64:128] * FE.hann_window(64), atol=1e-8)


def test_normalize_clip_cases():
    cfg = FE.SignalConfig()
    z = np.random.default_rng(2).standard_normal((5, 4, 2))
    z = np.clip((z - z.mean()) / z.std(), -2.5, 2.5)
    z = (z - z.mean()) / z.std()
    assert np.abs(z).max() < 3
    np.testing.assert_allclose(FE.normalize_clip(FE.Spectrogram(z), cfg).data, z, atol=1e-12)
    np.testing.assert_array_equal(FE.normalize_clip(FE.Spectrogram(np.full((3, 3, 2), 7.0)), cfg).data, 0)
    spike = np.zeros((10, 10, 2))
    spike[0, 0, 0] = 1.0
    out = FE.normalize_clip(FE.Spectrogram(spike), cfg).data
    assert out[0, 0, 0] == 3.0  # standardized value is about 14


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.5, 4.0))
def test_normalize_clip_bounds(seed, c):
    cfg = FE.SignalConfig(clip_bound=c)
    x = np.random.default_rng(seed).standard_cauchy((6, 5, 2))
    out = FE.normalize_clip(FE.Spectrogram(x), cfg).data
    assert np.abs(out).max() <= c
    pre = (x - x.mean()) / x.std()
    assert abs(pre.mean()) < 1e-10


def test_pad_or_crop():
    x = np.arange(5, dtype=float)[None, :, None] * np.ones((2, 5, 2))
    np.testing.assert_array_equal(FE.pad_or_crop(FE.Spectrogram(x), 5).data, x)
    np.testing.assert_array_equal(FE.pad_or_crop(FE.Spectrogram(x), 3).data[0, :, 0], [1, 2, 3])
    y = x[:, :2]
    np.testing.assert_array_equal(FE.pad_or_crop(FE.Spectrogram(y), 4).data[0, :, 0], [0, 0, 1, 0])
    with pytest.raises(ValueError):
        FE.pad_or_crop(FE.Spectrogram(x), 0)
