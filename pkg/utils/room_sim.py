import os
import json
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.signal import fftconvolve
from scipy.stats import truncnorm
from sklearn.model_selection import train_test_split

from models import (ArrayGeometry, MultichannelWaveform, RoomConfig,
                    ScenePlacement, UtteranceRecord)
from utils.signal_core import write_wav

logger = logging.getLogger(__name__)

SABINE_CONSTANT = 24.0 * math.log(10.0)
FRAC_DELAY_ORDER = 16
WALL_MARGIN = 0.1
# half-aperture reserved around the array center; covers spacings up to 20 cm
ARRAY_CLEARANCE = 0.1
# frames quieter than this, relative to the loudest, count as silence
ACTIVITY_FLOOR_DB = -40.0

# Synthetic word inventory: every word is three tones drawn from disjoint
# thirds of a log-spaced frequency grid, so no two words share a tone.
WORDS = [
    'alpha', 'bravo', 'charlie', 'delta', 'echo', 'foxtrot',
    'golf', 'hotel', 'india', 'juliett', 'kilo', 'lima',
]
TONE_GRID = np.geomspace(250.0, 3800.0, 3 * len(WORDS))
WORD_DURATION = 0.2


class RoomError(ValueError):
    """Raised for infeasible rooms, placements or mixtures"""
    pass


def sabine_absorption(room: RoomConfig) -> float:
    """Wall absorption that Sabine's formula needs for the room's RT60."""
    if room.rt60 <= 0:
        raise RoomError(f"absorption out of range: rt60 must be positive, got {room.rt60}")
    return SABINE_CONSTANT * room.volume / (room.speed_of_sound * room.surface * room.rt60)


def min_feasible_rt60(room: RoomConfig) -> float:
    return SABINE_CONSTANT * room.volume / (room.speed_of_sound * room.surface)


def reflection_coefficient(room: RoomConfig) -> float:
    """
    Pressure reflection coefficient of every wall.

    Feasibility is judged by Sabine (absorption <= 1). The coefficient itself
    follows Eyring's inversion of the same constant, which is the energy decay
    an image-source room actually produces.
    """
    absorption = sabine_absorption(room)
    if absorption > 1.0:
        raise RoomError(
            f"absorption out of range: rt60={room.rt60:.3f}s needs Sabine absorption "
            f"{absorption:.3f} > 1 in a {room.dimensions} room"
        )
    return math.exp(-absorption / 2.0)


def default_max_order(room: RoomConfig, horizon_s: float) -> int:
    """Smallest image order whose images cover every direction up to horizon_s."""
    dims = np.asarray(room.dimensions, dtype=np.float64)
    reach = room.speed_of_sound * horizon_s
    return int(math.ceil(reach * math.sqrt(np.sum(1.0 / dims ** 2)))) + 1


def _image_sources(room: RoomConfig, source: np.ndarray, max_order: int) -> Tuple[np.ndarray, np.ndarray]:
    ind = np.arange(-max_order, max_order + 1)
    xyz = np.stack(np.meshgrid(ind, ind, ind, indexing='ij'), axis=-1).reshape(-1, 3)
    xyz = xyz[np.abs(xyz).sum(axis=1) <= max_order]

    dims = np.asarray(room.dimensions, dtype=np.float64)[np.newaxis, :]
    odd = (xyz % 2) == 1
    locations = np.where(odd, dims * (xyz + 1) - source, dims * xyz + source)
    reflections = np.abs(xyz).sum(axis=1)
    return locations, reflections


def _frac_delay_taps(frac: np.ndarray, order: int = FRAC_DELAY_ORDER) -> np.ndarray:
    """Hann-windowed sinc taps for delays frac in [-0.5, 0.5]; shape [..., order + 1]."""
    half = order // 2
    n = np.arange(-half, half + 1)
    x = n - frac[..., np.newaxis]
    window = np.where(np.abs(x) <= half + 1, 0.5 * (1.0 + np.cos(np.pi * x / (half + 1))), 0.0)
    return np.sinc(x) * window


def simulate_rir(room: RoomConfig, mic, src, max_order: int) -> np.ndarray:
    """
    Image-source room impulse response from src to mic.

    Each image contributes beta^reflections / (4 pi r) at delay r / c, realized
    with a windowed-sinc fractional delay. max_order bounds |nx|+|ny|+|nz|.
    """
    mic = np.asarray(mic, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    if max_order < 0:
        raise RoomError(f"max_order must be >= 0, got {max_order}")
    if not room.contains(mic):
        raise RoomError(f"microphone {mic.tolist()} outside room {room.dimensions}")
    if not room.contains(src):
        raise RoomError(f"source {src.tolist()} outside room {room.dimensions}")

    beta = reflection_coefficient(room)
    locations, reflections = _image_sources(room, src, max_order)
    dist = np.linalg.norm(locations - mic, axis=1)
    gain = beta ** reflections / (4.0 * np.pi * dist)

    delay = dist / room.speed_of_sound * room.sample_rate
    delay_int = np.round(delay).astype(np.int64)
    taps = _frac_delay_taps(delay - delay_int) * gain[:, np.newaxis]

    half = FRAC_DELAY_ORDER // 2
    length = int(delay_int.max()) + half + 1
    rir = np.zeros(length + half)
    index = delay_int[:, np.newaxis] + np.arange(-half, half + 1)[np.newaxis, :] + half
    np.add.at(rir, index.ravel(), taps.ravel())
    # shift back so sample i is time i / fs
    return rir[half:]


def schroeder_curve(rir: np.ndarray) -> np.ndarray:
    energy = np.cumsum(np.square(rir)[::-1])[::-1]
    return 10.0 * np.log10(energy / energy[0] + 1e-300)


def estimate_rt60(rir: np.ndarray, sample_rate: int, start_db: float = -5.0, stop_db: float = -25.0) -> float:
    """Schroeder backward integration, linear fit over [start_db, stop_db], extrapolated to -60 dB."""
    curve = schroeder_curve(rir)
    region = np.where((curve <= start_db) & (curve >= stop_db))[0]
    if region.size < 2:
        raise RoomError("impulse response too short to estimate decay")
    t = region / float(sample_rate)
    slope, _ = np.polyfit(t, curve[region], 1)
    if slope >= 0:
        raise RoomError("impulse response does not decay")
    return float(-60.0 / slope)


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def active_speech_power(speech: np.ndarray, sample_rate: int, floor_db: float = ACTIVITY_FLOOR_DB) -> float:
    """
    Mean power of speech [M, n] over its active 10 ms frames, i.e. frames
    within floor_db of the loudest frame (mic-averaged).
    """
    speech = np.atleast_2d(speech)
    hop = max(1, sample_rate // 100)
    n = speech.shape[1]
    starts = np.arange(0, n, hop)
    frame_power = np.add.reduceat(np.square(speech).mean(axis=0), starts) / np.diff(np.append(starts, n))
    active = frame_power >= frame_power.max() * 10.0 ** (floor_db / 10.0)
    mask = np.repeat(active, np.diff(np.append(starts, n)))
    return float(np.mean(np.square(speech[:, mask])))


def mix_scene(clean: np.ndarray, noise: np.ndarray, rirs_src: Sequence[np.ndarray],
              rirs_noise: Sequence[np.ndarray], snr_db: float, sample_rate: int) -> MultichannelWaveform:
    """
    Spatialize clean and noise through per-mic RIRs and mix at snr_db.

    The SNR is the ratio of reverberant speech power over its active frames
    to spatialized noise power over the full span, both averaged over all
    mics. The noise is looped or cropped to the reverberant-speech span.
    snr_db = +inf adds no noise.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if _power(clean) == 0.0:
        raise RoomError("zero-power source")
    if len(rirs_src) != len(rirs_noise):
        raise RoomError(f"mismatched RIR sets: {len(rirs_src)} source vs {len(rirs_noise)} noise")

    speech = [fftconvolve(clean, np.asarray(h, dtype=np.float64)) for h in rirs_src]
    n = max(len(s) for s in speech)
    speech = np.stack([np.pad(s, (0, n - len(s))) for s in speech])

    if np.isposinf(snr_db):
        return MultichannelWaveform(samples=speech, sample_rate=sample_rate)

    noise = np.asarray(noise, dtype=np.float64)
    spatial = [fftconvolve(noise, np.asarray(h, dtype=np.float64)) for h in rirs_noise]
    spatial = np.stack([np.resize(v, n) for v in spatial])
    noise_power = _power(spatial)
    if noise_power == 0.0:
        raise RoomError("zero-power noise")

    gain = math.sqrt(active_speech_power(speech, sample_rate) / (noise_power * 10.0 ** (snr_db / 10.0)))
    return MultichannelWaveform(samples=speech + gain * spatial, sample_rate=sample_rate)


def word_signal(word: str, sample_rate: int, duration: float = WORD_DURATION) -> np.ndarray:
    """Three-tone signature of a vocabulary word under a Hann envelope."""
    if word not in WORDS:
        raise RoomError(f"unknown word: {word}")
    w = WORDS.index(word)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    freqs = TONE_GRID[[w, w + len(WORDS), w + 2 * len(WORDS)]]
    tones = np.sum(np.sin(2.0 * np.pi * freqs[:, np.newaxis] * t), axis=0) / 3.0
    return tones * np.hanning(n)


@dataclass
class DatasetSpec:
    """Sampling ranges for the simulated corpus."""
    room_x: Tuple[float, float] = (4.0, 10.0)
    room_y: Tuple[float, float] = (4.0, 10.0)
    room_z: Tuple[float, float] = (2.5, 4.0)
    rt60: Tuple[float, float] = (0.05, 0.5)
    snr_mean: float = 10.0
    snr_std: float = 3.3
    snr_range: Tuple[float, float] = (0.0, 20.0)
    distance: Tuple[float, float] = (0.5, 7.0)
    source_height: Tuple[float, float] = (0.6, 2.0)
    noise_height: Tuple[float, float] = (0.4, 3.0)
    array_height: Tuple[float, float] = (0.6, 2.0)
    azimuth: Tuple[float, float] = (-90.0, 90.0)
    spacing: float = 0.04
    words_per_utt: Tuple[int, int] = (2, 8)
    word_gap: Tuple[float, float] = (0.05, 0.1)
    lead_silence: float = 0.1
    add_noise: bool = True
    max_order: Optional[int] = None
    max_order_cap: int = 40
    sample_rate: int = 16000
    speed_of_sound: float = 343.0
    vocabulary: List[str] = field(default_factory=lambda: list(WORDS))

    def validate(self):
        for name in ('room_x', 'room_y', 'room_z', 'rt60', 'snr_range', 'distance',
                     'source_height', 'noise_height', 'array_height', 'azimuth',
                     'words_per_utt', 'word_gap'):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise RoomError(f"{name}: lower bound {lo} above upper bound {hi}")
        if self.spacing <= 0:
            raise RoomError(f"spacing must be positive, got {self.spacing}")
        if self.snr_std <= 0:
            raise RoomError(f"snr_std must be positive, got {self.snr_std}")
        unknown = [w for w in self.vocabulary if w not in WORDS]
        if unknown:
            raise RoomError(f"vocabulary words without a signature: {unknown}")


def sample_snr(spec: DatasetSpec, rng: np.random.Generator, size=None):
    """Normal(mean, std) truncated to snr_range."""
    lo, hi = spec.snr_range
    a = (lo - spec.snr_mean) / spec.snr_std
    b = (hi - spec.snr_mean) / spec.snr_std
    return truncnorm.rvs(a, b, loc=spec.snr_mean, scale=spec.snr_std, size=size, random_state=rng)


def utterance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _sample_room(spec: DatasetSpec, rng: np.random.Generator, attempts: int = 20) -> RoomConfig:
    rt60 = float(rng.uniform(*spec.rt60))
    room = None
    for _ in range(attempts):
        dims = (float(rng.uniform(*spec.room_x)), float(rng.uniform(*spec.room_y)), float(rng.uniform(*spec.room_z)))
        room = RoomConfig(dimensions=dims, rt60=rt60, speed_of_sound=spec.speed_of_sound,
                          sample_rate=spec.sample_rate)
        if sabine_absorption(room) <= 1.0:
            return room
    room.rt60 = min_feasible_rt60(room) * 1.0001
    logger.debug(f"[RIR] rt60 {rt60:.3f}s infeasible, clipped to {room.rt60:.3f}s")
    return room


def _point_at(center: np.ndarray, azimuth_deg: float, distance: float, height: float) -> np.ndarray:
    theta = math.radians(azimuth_deg)
    return np.array([center[0] + distance * math.sin(theta), center[1] + distance * math.cos(theta), height])


def sample_scene(spec: DatasetSpec, room: RoomConfig, rng: np.random.Generator,
                 attempts: int = 50) -> Tuple[ArrayGeometry, ScenePlacement]:
    """Place array, source and one noise source inside room (source within the distance range)."""
    if spec.spacing / 2.0 > ARRAY_CLEARANCE:
        raise RoomError(f"array spacing {spec.spacing} m exceeds the {2 * ARRAY_CLEARANCE} m placement clearance")
    dims = np.asarray(room.dimensions)
    top = dims[2] - WALL_MARGIN
    array_z = float(rng.uniform(spec.array_height[0], min(spec.array_height[1], top)))
    center = np.array([
        rng.uniform(WALL_MARGIN + ARRAY_CLEARANCE, dims[0] - WALL_MARGIN - ARRAY_CLEARANCE),
        rng.uniform(WALL_MARGIN, dims[1] - WALL_MARGIN),
        array_z,
    ])
    geometry = ArrayGeometry.linear(center, spec.spacing)

    source = azimuth = distance = None
    for _ in range(attempts):
        azimuth = float(rng.uniform(*spec.azimuth))
        distance = float(rng.uniform(*spec.distance))
        height = float(rng.uniform(spec.source_height[0], min(spec.source_height[1], top)))
        candidate = _point_at(center, azimuth, distance, height)
        if room.contains(candidate, WALL_MARGIN):
            source = candidate
            break
    if source is None:
        # fall back to the largest distance that fits along the sampled azimuth
        for scale in np.linspace(1.0, 0.05, 40):
            candidate = _point_at(center, azimuth, max(spec.distance[0], distance * scale), height)
            if room.contains(candidate, WALL_MARGIN):
                source = candidate
                break
    if source is None:
        raise RoomError(f"could not place a source in room {room.dimensions}")
    distance = float(np.linalg.norm(source[:2] - center[:2]))

    noise = None
    for _ in range(attempts):
        noise_az = float(rng.uniform(-180.0, 180.0))
        noise_dist = float(rng.uniform(*spec.distance))
        noise_z = float(rng.uniform(spec.noise_height[0], min(spec.noise_height[1], top)))
        candidate = _point_at(center, noise_az, noise_dist, noise_z)
        if room.contains(candidate, WALL_MARGIN):
            noise = candidate
            break
    if noise is None:
        noise = np.array([WALL_MARGIN * 2, WALL_MARGIN * 2, min(spec.noise_height[0], top)])

    snr = float(sample_snr(spec, rng)) if spec.add_noise else math.inf
    placement = ScenePlacement(
        source_position=source,
        noise_positions=[noise],
        source_azimuth=azimuth,
        snr_db=snr,
        source_distance=distance,
    )
    return geometry, placement


def synthesize_words(words: List[str], spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    lead = np.zeros(int(spec.lead_silence * spec.sample_rate))
    pieces = [lead]
    for word in words:
        pieces.append(word_signal(word, spec.sample_rate))
        gap = float(rng.uniform(*spec.word_gap))
        pieces.append(np.zeros(int(gap * spec.sample_rate)))
    pieces.append(lead)
    return np.concatenate(pieces)


def simulate_utterance(spec: DatasetSpec, seed: int, index: int,
                       spacing: Optional[float] = None) -> Tuple[MultichannelWaveform, Dict]:
    """
    One utterance from its own random stream (seed, index).

    Passing spacing re-renders the same scene with a different array spacing.
    """
    rng = utterance_rng(seed, index)
    room = _sample_room(spec, rng)
    scene_spec = spec if spacing is None else _with_spacing(spec, spacing)
    geometry, placement = sample_scene(scene_spec, room, rng)

    n_words = int(rng.integers(spec.words_per_utt[0], spec.words_per_utt[1] + 1))
    words = [spec.vocabulary[i] for i in rng.integers(0, len(spec.vocabulary), size=n_words)]
    clean = synthesize_words(words, spec, rng)
    noise = rng.standard_normal(clean.size)

    max_order = spec.max_order
    if max_order is None:
        max_order = min(default_max_order(room, room.rt60 / 2.0), spec.max_order_cap)

    rirs_src = [simulate_rir(room, mic, placement.source_position, max_order)
                for mic in geometry.mic_positions]
    rirs_noise = [simulate_rir(room, mic, placement.noise_positions[0], max_order)
                  for mic in geometry.mic_positions]
    wave = mix_scene(clean, noise, rirs_src, rirs_noise, placement.snr_db, spec.sample_rate)

    peak = float(np.max(np.abs(wave.samples)))
    wave.samples = wave.samples * (0.9 / peak)

    meta = {
        'transcript': ' '.join(words),
        'azimuth_deg': placement.source_azimuth,
        'snr_db': placement.snr_db,
        'rt60_s': room.rt60,
        'spacing_m': geometry.spacing,
        'room': room.to_dict(),
        'scene': placement.to_dict(),
    }
    return wave, meta


def _with_spacing(spec: DatasetSpec, spacing: float) -> DatasetSpec:
    values = dict(spec.__dict__)
    values['spacing'] = spacing
    return DatasetSpec(**values)


def _render(spec: DatasetSpec, seed: int, index: int, split: str, out_dir: str,
            spacing: Optional[float], prefix: str) -> UtteranceRecord:
    utt_id = f"{prefix}{index:06d}"
    try:
        wave, meta = simulate_utterance(spec, seed, index, spacing)
        wav_path = os.path.join(out_dir, 'wav', f"{utt_id}.wav")
        write_wav(wav_path, wave)
    except Exception as e:
        logger.error(f"[DATA] utterance {utt_id} failed: {str(e)}")
        raise
    return UtteranceRecord(
        utt_id=utt_id,
        wav_path=os.path.relpath(wav_path, out_dir),
        transcript=meta['transcript'],
        azimuth_deg=meta['azimuth_deg'],
        snr_db=meta['snr_db'],
        rt60_s=meta['rt60_s'],
        spacing_m=meta['spacing_m'],
        split=split,
        index=index,
    )


def split_indices(n_total: int, n_dev: int, n_eval: int, seed: int) -> Dict[str, List[int]]:
    """Random train/dev/eval partition of utterance indices."""
    indices = list(range(n_total))
    rest, eval_idx = train_test_split(indices, test_size=n_eval, random_state=seed) if n_eval else (indices, [])
    train_idx, dev_idx = train_test_split(rest, test_size=n_dev, random_state=seed) if n_dev else (rest, [])
    return {'train': sorted(train_idx), 'dev': sorted(dev_idx), 'eval': sorted(eval_idx)}


def write_manifest(path: str, records: List[UtteranceRecord]):
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + '\n')


def read_manifest(path: str) -> List[UtteranceRecord]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Manifest not found: {path}")
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(UtteranceRecord.from_dict(json.loads(line)))
            except (KeyError, ValueError) as e:
                raise ValueError(f"{path}:{line_no}: malformed manifest line ({str(e)})")
    return records


def generate_dataset(spec: DatasetSpec, out_dir: str, n_utts: int, seed: int,
                     splits: Optional[Dict[str, List[int]]] = None, spacing: Optional[float] = None,
                     manifest_name: str = 'manifest.jsonl', prefix: str = 'utt',
                     n_jobs: int = 1) -> List[UtteranceRecord]:
    """
    Render n_utts utterances and write WAVs plus a JSON-lines manifest.

    Every utterance draws from its own stream (seed, index), so the output
    does not depend on n_jobs.
    """
    spec.validate()
    try:
        os.makedirs(os.path.join(out_dir, 'wav'), exist_ok=True)
    except OSError as e:
        raise RoomError(f"unwritable output dir {out_dir}: {str(e)}")
    if not os.access(out_dir, os.W_OK):
        raise RoomError(f"unwritable output dir {out_dir}")

    if splits is None:
        splits = {'train': list(range(n_utts))}
    split_of = {i: name for name, members in splits.items() for i in members}
    order = sorted(split_of)

    logger.info(f"[DATA] rendering {len(order)} utterances into {out_dir} (seed={seed}, n_jobs={n_jobs})")
    records = Parallel(n_jobs=n_jobs)(
        delayed(_render)(spec, seed, i, split_of[i], out_dir, spacing, prefix) for i in order
    )
    write_manifest(os.path.join(out_dir, manifest_name), records)
    logger.info(f"[DATA] wrote {os.path.join(out_dir, manifest_name)}")
    return records
