import logging
from typing import Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

from models import ComplexSpectrogram, MultichannelWaveform, StftConfig

logger = logging.getLogger(__name__)

LOG_EPS = 1e-7

# scipy.signal.get_window names for the tapers accepted in StftConfig.window
WINDOW_ALIASES = {
    'hann': 'hann',
    'hanning': 'hann',
    'hamming': 'hamming',
    'rectangular': 'boxcar',
    'boxcar': 'boxcar',
    'blackman': 'blackman',
}


class SignalError(ValueError):
    """Raised for malformed signals or STFT configurations"""
    pass


def analysis_window(cfg: StftConfig) -> np.ndarray:
    name = WINDOW_ALIASES.get(cfg.window.lower())
    if name is None:
        raise SignalError(f"Unsupported window: {cfg.window}")
    return get_window(name, cfg.window_length, fftbins=True).astype(np.float64)


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.window_length:
        raise SignalError(
            f"insufficient samples: {n_samples} < window length {cfg.window_length}"
        )
    return (n_samples - cfg.window_length) // cfg.hop + 1


def stft(wave: MultichannelWaveform, cfg: StftConfig) -> ComplexSpectrogram:
    """
    Windowed STFT of every channel, no centering or padding.

    Frame t covers samples [t*hop, t*hop + L); each frame is zero padded to N
    before the real FFT, so K = N/2 + 1.

    Returns:
        ComplexSpectrogram with real/imag planes shaped [T, C, K]
    """
    cfg.validate()
    wave.validate()
    n_frames = frame_count(wave.n_samples, cfg)

    window = analysis_window(cfg)
    # [C, T_all, L] -> keep every hop-th frame
    frames = sliding_window_view(wave.samples, cfg.window_length, axis=-1)[:, ::cfg.hop]
    frames = frames[:, :n_frames] * window
    spectrum = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    spectrum = np.transpose(spectrum, (1, 0, 2))

    return ComplexSpectrogram(
        real=np.ascontiguousarray(spectrum.real),
        imag=np.ascontiguousarray(spectrum.imag),
        sample_rate=wave.sample_rate,
    )


def istft(spec: ComplexSpectrogram, cfg: StftConfig, n_samples: int = None) -> MultichannelWaveform:
    """Weighted overlap-add resynthesis; for debugging only."""
    window = analysis_window(cfg)
    frames = np.fft.irfft(spec.real + 1j * spec.imag, n=cfg.fft_size, axis=-1)
    frames = frames[..., :cfg.window_length]

    n_frames, n_channels, _ = frames.shape
    total = (n_frames - 1) * cfg.hop + cfg.window_length
    out = np.zeros((n_channels, total))
    norm = np.zeros(total)
    for t in range(n_frames):
        start = t * cfg.hop
        out[:, start:start + cfg.window_length] += frames[t] * window
        norm[start:start + cfg.window_length] += window ** 2
    out /= np.where(norm > 1e-10, norm, 1.0)

    if n_samples is not None:
        out = out[:, :n_samples]
    return MultichannelWaveform(samples=out, sample_rate=spec.sample_rate)


def complex_mul_as_real(a: Tuple, b: Tuple) -> Tuple:
    """(a_r + j a_i)(b_r + j b_i) computed on real planes; broadcasts like numpy."""
    ar, ai = a
    br, bi = b
    return ar * br - ai * bi, ar * bi + ai * br


def complex_matmul_as_real(a: Tuple, b: Tuple) -> Tuple:
    """Complex matrix product a @ b on real planes (batched like np.matmul)."""
    ar, ai = a
    br, bi = b
    return ar @ br - ai @ bi, ar @ bi + ai @ br


def log_magnitude(z: Tuple, eps: float = LOG_EPS) -> Union[float, np.ndarray]:
    zr, zi = z
    if np.any(np.asarray(eps) < 0):
        raise SignalError(f"eps must be nonnegative, got {eps}")
    return np.log(np.sqrt(np.square(zr) + np.square(zi)) + eps)


def read_wav(path: str) -> MultichannelWaveform:
    """Read a PCM16 WAV file (mono or interleaved multichannel) as floats in [-1, 1)."""
    try:
        sample_rate, data = wavfile.read(path)
    except (OSError, ValueError) as e:
        raise SignalError(f"Failed to read WAV {path}: {str(e)}")

    if data.dtype != np.int16:
        raise SignalError(f"Unsupported WAV encoding in {path}: {data.dtype} (only PCM 16-bit is accepted)")

    samples = data.astype(np.float64) / 32768.0
    samples = samples[np.newaxis, :] if samples.ndim == 1 else samples.T
    return MultichannelWaveform(samples=np.ascontiguousarray(samples), sample_rate=int(sample_rate))


def write_wav(path: str, wave: MultichannelWaveform):
    """Write PCM16 little-endian; samples outside [-1, 1) are clipped."""
    wave.validate()
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype('<i2')
    pcm = pcm[0] if wave.channels == 1 else pcm.T
    wavfile.write(path, int(wave.sample_rate), pcm)
    logger.debug(f"[WAV] wrote {path} ({wave.channels} ch, {wave.n_samples} samples)")
