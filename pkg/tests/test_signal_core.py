import numpy as np
import pytest

from models import ComplexSpectrogram, MultichannelWaveform, StftConfig
from utils.signal_core import (SignalError, complex_matmul_as_real, complex_mul_as_real, frame_count, istft,
                               log_magnitude, read_wav, stft, write_wav)


def test_frame_count_matches_unpadded_framing():
    cfg = StftConfig()
    assert frame_count(400, cfg) == 1
    assert frame_count(16000, cfg) == (16000 - 400) // 160 + 1


def test_short_signal_is_rejected():
    wave = MultichannelWaveform(samples=np.zeros((2, 399)), sample_rate=16000)
    with pytest.raises(SignalError, match='insufficient samples'):
        stft(wave, StftConfig())


def test_stft_shape_and_dtype(stereo_noise):
    spec = stft(stereo_noise, StftConfig())
    assert spec.real.shape == (frame_count(8000, StftConfig()), 2, 257)
    assert spec.imag.shape == spec.real.shape
    assert spec.real.dtype == np.float64


def test_bin_centered_cosine_peaks_at_its_bin():
    cfg = StftConfig(window_length=512, hop=256, fft_size=512, window='rectangular')
    k0 = 32
    n = np.arange(512 * 3)
    wave = MultichannelWaveform(samples=np.cos(2 * np.pi * k0 * n / 512)[np.newaxis], sample_rate=16000)
    spec = stft(wave, cfg)
    magnitude = np.sqrt(spec.power())[0, 0]
    assert int(np.argmax(magnitude)) == k0
    assert magnitude[k0] == pytest.approx(256.0, rel=1e-9)
    assert np.max(np.delete(magnitude, k0)) < 1e-8


def test_stft_matches_naive_dft(rng):
    cfg = StftConfig(window_length=16, hop=8, fft_size=16, window='hann')
    x = rng.standard_normal(40)
    spec = stft(MultichannelWaveform(samples=x[np.newaxis], sample_rate=8000), cfg)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(16) / 16)
    for t in range(spec.frames):
        frame = x[t * 8:t * 8 + 16] * window
        for k in range(cfg.bins):
            expected = np.sum(frame * np.exp(-2j * np.pi * k * np.arange(16) / 16))
            assert spec.real[t, 0, k] == pytest.approx(expected.real, abs=1e-10)
            assert spec.imag[t, 0, k] == pytest.approx(expected.imag, abs=1e-10)


def test_stft_is_linear(rng):
    cfg = StftConfig()
    x, y = rng.standard_normal((2, 1200)), rng.standard_normal((2, 1200))
    a, b = 0.7, -2.5
    mixed = stft(MultichannelWaveform(samples=a * x + b * y, sample_rate=16000), cfg)
    sx = stft(MultichannelWaveform(samples=x, sample_rate=16000), cfg)
    sy = stft(MultichannelWaveform(samples=y, sample_rate=16000), cfg)
    np.testing.assert_allclose(mixed.real, a * sx.real + b * sy.real, atol=1e-10)
    np.testing.assert_allclose(mixed.imag, a * sx.imag + b * sy.imag, atol=1e-10)


def test_parseval_with_rectangular_window(rng):
    cfg = StftConfig(window_length=64, hop=64, fft_size=64, window='rectangular')
    x = rng.standard_normal(64)
    spec = stft(MultichannelWaveform(samples=x[np.newaxis], sample_rate=8000), cfg)
    power = spec.power()[0, 0]
    # one-sided spectrum: interior bins count twice
    total = power[0] + power[-1] + 2 * np.sum(power[1:-1])
    assert total / 64 == pytest.approx(np.sum(x ** 2), rel=1e-10)


def test_istft_resynthesizes_interior(rng):
    cfg = StftConfig()
    x = rng.standard_normal((1, 4000))
    spec = stft(MultichannelWaveform(samples=x, sample_rate=16000), cfg)
    back = istft(spec, cfg, n_samples=4000)
    np.testing.assert_allclose(back.samples[:, 400:3500], x[:, 400:3500], atol=1e-8)


def test_complex_products_match_numpy(rng):
    a = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
    re, im = complex_mul_as_real((a.real, a.imag), (a.real[::-1], a.imag[::-1]))
    np.testing.assert_allclose(re + 1j * im, a * a[::-1])
    re, im = complex_matmul_as_real((a.real, a.imag), (b.real, b.imag))
    np.testing.assert_allclose(re + 1j * im, a @ b)


def test_log_magnitude():
    assert log_magnitude((3.0, 4.0), eps=0.0) == pytest.approx(np.log(5.0))
    assert log_magnitude((0.0, 0.0), eps=1e-7) == pytest.approx(np.log(1e-7))
    with pytest.raises(SignalError):
        log_magnitude((1.0, 0.0), eps=-1.0)


def test_wav_round_trip_is_exact_for_pcm_values(tmp_path, rng):
    pcm = rng.integers(-32768, 32767, size=(2, 500))
    wave = MultichannelWaveform(samples=pcm / 32768.0, sample_rate=16000)
    path = str(tmp_path / 'x.wav')
    write_wav(path, wave)
    back = read_wav(path)
    assert back.sample_rate == 16000
    np.testing.assert_array_equal(back.samples, wave.samples)


def test_non_pcm16_wav_is_rejected(tmp_path):
    from scipy.io import wavfile
    path = str(tmp_path / 'float.wav')
    wavfile.write(path, 16000, np.zeros(100, dtype=np.float32))
    with pytest.raises(SignalError, match='Unsupported WAV encoding'):
        read_wav(path)
