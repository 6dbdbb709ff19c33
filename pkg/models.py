import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np


@dataclass
class MultichannelWaveform:
    samples: np.ndarray  # [C, n]
    sample_rate: int

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def validate(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError(f"samples must be shaped [C, n] with C >= 1, got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    def channel(self, index: int) -> 'MultichannelWaveform':
        return MultichannelWaveform(samples=self.samples[index:index + 1], sample_rate=self.sample_rate)


@dataclass
class ComplexSpectrogram:
    real: np.ndarray  # [T, C, K]
    imag: np.ndarray  # [T, C, K]
    sample_rate: int

    @property
    def frames(self) -> int:
        return self.real.shape[0]

    @property
    def channels(self) -> int:
        return self.real.shape[1]

    @property
    def bins(self) -> int:
        return self.real.shape[2]

    def power(self) -> np.ndarray:
        return np.square(self.real) + np.square(self.imag)


@dataclass
class StftConfig:
    window_length: int = 400
    hop: int = 160
    fft_size: int = 512
    window: str = 'hann'

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def validate(self):
        if not (0 < self.hop <= self.window_length <= self.fft_size):
            raise ValueError(
                f"STFT config needs 0 < hop <= window_length <= fft_size, got "
                f"hop={self.hop}, window_length={self.window_length}, fft_size={self.fft_size}"
            )
        if self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")


@dataclass
class RoomConfig:
    dimensions: Tuple[float, float, float]
    rt60: float
    speed_of_sound: float = 343.0
    sample_rate: int = 16000

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + ly * lz + lx * lz)

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=np.float64)
        dims = np.asarray(self.dimensions, dtype=np.float64)
        return bool(np.all(p > margin) and np.all(p < dims - margin))

    def to_dict(self) -> Dict:
        return {
            'dimensions': [float(d) for d in self.dimensions],
            'rt60': float(self.rt60),
            'speed_of_sound': float(self.speed_of_sound),
            'sample_rate': int(self.sample_rate),
        }


@dataclass
class ArrayGeometry:
    mic_positions: np.ndarray  # [M, 3] meters

    @classmethod
    def linear(cls, center, spacing: float, n_mics: int = 2) -> 'ArrayGeometry':
        """Uniform linear array along the room x axis; broadside is +y."""
        center = np.asarray(center, dtype=np.float64)
        offsets = (np.arange(n_mics) - (n_mics - 1) / 2.0) * spacing
        positions = np.tile(center, (n_mics, 1))
        positions[:, 0] += offsets
        return cls(mic_positions=positions)

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def center(self) -> np.ndarray:
        return self.mic_positions.mean(axis=0)

    @property
    def spacing(self) -> float:
        return float(np.linalg.norm(self.mic_positions[1] - self.mic_positions[0]))

    @property
    def axis(self) -> np.ndarray:
        d = self.mic_positions[-1] - self.mic_positions[0]
        return d / np.linalg.norm(d)

    def relative_positions(self) -> np.ndarray:
        return self.mic_positions - self.center

    def steering_delays(self, azimuth_deg, speed_of_sound: float = 343.0) -> np.ndarray:
        """
        Far-field arrival time of each mic relative to the array center.

        Azimuth is measured in the horizontal plane from broadside (+y) toward
        the array axis (+x). Returns seconds, shaped [..., M].
        """
        theta = np.deg2rad(np.asarray(azimuth_deg, dtype=np.float64))
        direction = np.stack([np.sin(theta), np.cos(theta), np.zeros_like(theta)], axis=-1)
        return -(direction @ self.relative_positions().T) / speed_of_sound


@dataclass
class ScenePlacement:
    source_position: np.ndarray
    noise_positions: List[np.ndarray]
    source_azimuth: float
    snr_db: float
    source_distance: float

    def to_dict(self) -> Dict:
        return {
            'source_position': [float(v) for v in self.source_position],
            'noise_positions': [[float(v) for v in p] for p in self.noise_positions],
            'source_azimuth': float(self.source_azimuth),
            'snr_db': None if np.isinf(self.snr_db) else float(self.snr_db),
            'source_distance': float(self.source_distance),
        }


@dataclass
class UtteranceRecord:
    utt_id: str
    wav_path: str
    transcript: str
    azimuth_deg: float
    snr_db: float
    rt60_s: float
    spacing_m: float
    split: str
    index: int = 0

    @property
    def words(self) -> List[str]:
        return self.transcript.split()

    def to_dict(self) -> Dict:
        return {
            'utt_id': self.utt_id,
            'path': self.wav_path,
            'transcript': self.transcript,
            'azimuth_deg': round(float(self.azimuth_deg), 6),
            # null when no noise was added
            'snr_db': None if np.isinf(self.snr_db) else round(float(self.snr_db), 6),
            'rt60_s': round(float(self.rt60_s), 6),
            'spacing_m': round(float(self.spacing_m), 6),
            'split': self.split,
            'index': int(self.index),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'UtteranceRecord':
        return cls(
            utt_id=data['utt_id'],
            wav_path=data['path'],
            transcript=data['transcript'],
            azimuth_deg=float(data['azimuth_deg']),
            snr_db=math.inf if data['snr_db'] is None else float(data['snr_db']),
            rt60_s=float(data['rt60_s']),
            spacing_m=float(data['spacing_m']),
            split=data['split'],
            index=int(data.get('index', 0)),
        )


@dataclass
class LookDirectionBank:
    directions: List[float]
    delays: np.ndarray = field(default=None)  # [D, M] seconds

    @classmethod
    def for_geometry(cls, directions, geometry: ArrayGeometry, speed_of_sound: float = 343.0) -> 'LookDirectionBank':
        if len(set(float(d) for d in directions)) != len(directions):
            raise ValueError(f"look directions must be distinct: {directions}")
        delays = geometry.steering_delays(np.asarray(directions, dtype=np.float64), speed_of_sound)
        return cls(directions=[float(d) for d in directions], delays=delays)


@dataclass
class DoaEstimate:
    azimuth_deg: float
    confidence: float
    tdoa_s: Optional[float] = None

    def to_dict(self) -> Dict:
        return {
            'azimuth_deg': float(self.azimuth_deg),
            'confidence': float(self.confidence),
            'tdoa_s': None if self.tdoa_s is None else float(self.tdoa_s),
        }
