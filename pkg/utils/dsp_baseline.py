import logging
from typing import Optional, Tuple

import librosa
import numpy as np

from models import (ArrayGeometry, DoaEstimate, LookDirectionBank,
                    MultichannelWaveform, StftConfig)
from utils.signal_core import LOG_EPS, stft

logger = logging.getLogger(__name__)

DEFAULT_LOOK_DIRECTIONS = [-90.0, -45.0, 0.0, 45.0, 90.0]
N_MELS = 40
GCC_INTERP = 16


class BeamformingError(ValueError):
    """Raised for invalid steering, geometry or DOA inputs"""
    pass


def check_azimuth(azimuth_deg: float):
    if not (-180.0 < azimuth_deg <= 180.0):
        raise BeamformingError(f"azimuth {azimuth_deg} outside (-180, 180]")


def wrap_azimuth(azimuth_deg):
    """Map any angle into (-180, 180]."""
    wrapped = np.mod(np.asarray(azimuth_deg, dtype=np.float64) + 180.0, 360.0) - 180.0
    wrapped = np.where(wrapped == -180.0, 180.0, wrapped)
    return float(wrapped) if wrapped.ndim == 0 else wrapped


def angular_distance(a, b):
    return np.abs(wrap_azimuth(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


def fractional_shift(samples: np.ndarray, shift_s: np.ndarray, sample_rate: int) -> np.ndarray:
    """
    Advance each row of samples by shift_s seconds (x_m(t + shift_m)).

    Done as a linear phase in the frequency domain over a zero-padded FFT, so
    sub-sample shifts are exact for band-limited content.
    """
    n = samples.shape[-1]
    pad = int(np.ceil(np.max(np.abs(shift_s)) * sample_rate)) + 1
    n_fft = 1 << int(np.ceil(np.log2(n + 2 * pad)))
    spectrum = np.fft.rfft(samples, n=n_fft, axis=-1)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    phase = np.exp(2j * np.pi * freqs[np.newaxis, :] * np.asarray(shift_s)[:, np.newaxis])
    return np.fft.irfft(spectrum * phase, n=n_fft, axis=-1)[:, :n]


def delay_and_sum(wave: MultichannelWaveform, geometry: ArrayGeometry, azimuth_deg: float,
                  speed_of_sound: float = 343.0) -> np.ndarray:
    """Align every channel on the far-field delays for azimuth_deg and average them."""
    if wave.channels < 2:
        raise BeamformingError(f"delay-and-sum needs >= 2 channels, got {wave.channels}")
    if wave.channels != geometry.n_mics:
        raise BeamformingError(f"{wave.channels} channels but {geometry.n_mics} microphones")
    check_azimuth(azimuth_deg)

    delays = geometry.steering_delays(azimuth_deg, speed_of_sound)
    if np.all(delays == 0.0):
        return wave.samples.mean(axis=0)
    aligned = fractional_shift(wave.samples, delays, wave.sample_rate)
    return aligned.mean(axis=0)


def gcc_phat(sig: np.ndarray, refsig: np.ndarray, fs: int, max_tau: Optional[float] = None,
             interp: int = GCC_INTERP) -> Tuple[float, np.ndarray]:
    """
    Offset of sig relative to refsig (positive when sig lags), by GCC-PHAT.

    Returns (tau seconds, cross-correlation restricted to +-max_tau).
    """
    n = sig.shape[0] + refsig.shape[0]
    SIG = np.fft.rfft(sig, n=n)
    REFSIG = np.fft.rfft(refsig, n=n)
    R = SIG * np.conj(REFSIG)
    cc = np.fft.irfft(R / (np.abs(R) + 1e-12), n=interp * n)

    max_shift = int(interp * n / 2)
    if max_tau:
        max_shift = min(int(interp * fs * max_tau), max_shift)
    cc = np.concatenate((cc[-max_shift:], cc[:max_shift + 1])) if max_shift > 0 else cc[:1]

    shift = int(np.argmax(np.abs(cc))) - max_shift
    return shift / float(interp * fs), cc


def estimate_doa_gccphat(wave: MultichannelWaveform, geometry: ArrayGeometry,
                         speed_of_sound: float = 343.0) -> DoaEstimate:
    """
    Azimuth from the GCC-PHAT time difference of a two-mic array.

    The front/back ambiguity is resolved to the front half-plane, so the
    estimate lies in [-90, 90].
    """
    if wave.channels != 2 or geometry.n_mics != 2:
        raise BeamformingError(f"GCC-PHAT DOA needs exactly 2 channels, got {wave.channels}")
    spacing = geometry.spacing
    span = spacing * wave.sample_rate / speed_of_sound
    if span < 1.0:
        raise BeamformingError(
            f"array too small to resolve: spacing {spacing:.4f} m spans {span:.2f} samples"
        )

    max_tau = spacing / speed_of_sound
    # mic 0 sits at -axis, so it hears a source at positive azimuth last
    tau, cc = gcc_phat(wave.samples[0], wave.samples[1], wave.sample_rate, max_tau=max_tau)
    sin_theta = np.clip(tau * speed_of_sound / spacing, -1.0, 1.0)
    azimuth = float(np.rad2deg(np.arcsin(sin_theta)))
    confidence = float(np.clip(np.max(np.abs(cc)) * GCC_INTERP, 0.0, 1.0))
    logger.debug(f"[DOA] tau={tau * 1e6:.1f}us azimuth={azimuth:.1f} confidence={confidence:.2f}")
    return DoaEstimate(azimuth_deg=azimuth + 0.0, confidence=confidence, tdoa_s=tau)


def nearest_direction_index(bank: LookDirectionBank, azimuth_deg: float) -> int:
    if not bank.directions:
        raise BeamformingError("empty look-direction bank")
    distances = angular_distance(np.asarray(bank.directions), azimuth_deg)
    return int(np.argmin(distances))


def select_direction(bank: LookDirectionBank, doa: DoaEstimate, error_rate: float,
                     rng: np.random.Generator) -> float:
    """
    Bank direction nearest the DOA, or with probability error_rate a uniformly
    chosen different bank direction. Always consumes one uniform draw so the
    rng stream does not depend on error_rate.
    """
    if not (0.0 <= error_rate <= 1.0):
        raise BeamformingError(f"error_rate must be in [0, 1], got {error_rate}")
    nearest = nearest_direction_index(bank, doa.azimuth_deg)
    draw = rng.random()
    if draw >= error_rate or len(bank.directions) == 1:
        return bank.directions[nearest]

    others = [i for i in range(len(bank.directions)) if i != nearest]
    return bank.directions[others[int(rng.integers(len(others)))]]


def mel_filterbank(cfg: StftConfig, sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """Area-normalized triangular mel filters, [n_mels, K], 0 Hz to Nyquist."""
    return librosa.filters.mel(sr=sample_rate, n_fft=cfg.fft_size, n_mels=n_mels, fmin=0.0,
                               fmax=sample_rate / 2.0, htk=True, norm='slaney').astype(np.float64)


def log_mel_features(mono: np.ndarray, sample_rate: int, cfg: StftConfig,
                     n_mels: int = N_MELS, eps: float = LOG_EPS) -> np.ndarray:
    spec = stft(MultichannelWaveform(samples=mono[np.newaxis, :], sample_rate=sample_rate), cfg)
    power = spec.power()[:, 0, :]
    energies = power @ mel_filterbank(cfg, sample_rate, n_mels).T
    return np.log(energies + eps)


def dsp_frontend(wave: MultichannelWaveform, geometry: ArrayGeometry, bank: LookDirectionBank,
                 error_rate: float, rng: np.random.Generator, cfg: Optional[StftConfig] = None,
                 speed_of_sound: float = 343.0, n_mels: int = N_MELS) -> np.ndarray:
    """
    Baseline features: GCC-PHAT DOA, look-direction choice (with injected
    errors), delay-and-sum, log mel energies per frame. Returns [T, n_mels].
    """
    cfg = cfg or StftConfig()
    doa = estimate_doa_gccphat(wave, geometry, speed_of_sound)
    azimuth = select_direction(bank, doa, error_rate, rng)
    beam = delay_and_sum(wave, geometry, azimuth, speed_of_sound)
    return log_mel_features(beam, wave.sample_rate, cfg, n_mels)


def save_features(path: str, features: np.ndarray):
    """Little-endian int32 header (T, dim) followed by float32 frames."""
    features = np.asarray(features)
    with open(path, 'wb') as f:
        f.write(np.asarray(features.shape, dtype='<i4').tobytes())
        f.write(np.ascontiguousarray(features, dtype='<f4').tobytes())


def load_features(path: str) -> np.ndarray:
    with open(path, 'rb') as f:
        header = np.frombuffer(f.read(8), dtype='<i4')
        data = np.frombuffer(f.read(), dtype='<f4')
    n_frames, dim = int(header[0]), int(header[1])
    if data.size != n_frames * dim:
        raise ValueError(f"feature cache {path} truncated: expected {n_frames * dim} values, got {data.size}")
    return data.reshape(n_frames, dim).astype(np.float64)
