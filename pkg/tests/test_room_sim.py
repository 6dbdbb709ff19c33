import json
import math

import numpy as np
import pytest

from models import ArrayGeometry, RoomConfig, UtteranceRecord
from utils.dsp_baseline import gcc_phat
from utils.room_sim import (WORDS, DatasetSpec, RoomError, active_speech_power, default_max_order,
                            estimate_rt60, generate_dataset, mix_scene, read_manifest, reflection_coefficient,
                            sample_scene, sample_snr, simulate_rir, simulate_utterance, split_indices,
                            word_signal, write_manifest)


def _parabolic_peak(x: np.ndarray) -> float:
    i = int(np.argmax(x))
    a, b, c = x[i - 1], x[i], x[i + 1]
    return i + 0.5 * (a - c) / (a - 2 * b + c)


def test_anechoic_integer_delay_is_a_single_scaled_impulse():
    room = RoomConfig(dimensions=(10.0, 10.0, 10.0), rt60=0.3)
    d = 343.0 * 64 / 16000
    mic = np.array([3.0, 5.0, 5.0])
    rir = simulate_rir(room, mic, mic + np.array([d, 0.0, 0.0]), max_order=0)
    assert int(np.argmax(np.abs(rir))) == 64
    assert rir[64] == pytest.approx(1.0 / (4 * np.pi * d), rel=1e-9)
    rest = np.delete(rir, 64)
    assert np.max(np.abs(rest)) < 1e-12


def test_anechoic_delay_tracks_distance():
    room = RoomConfig(dimensions=(10.0, 10.0, 10.0), rt60=0.3)
    mic = np.array([2.0, 2.0, 2.0])
    for dist in (0.8, 1.37, 2.9):
        rir = simulate_rir(room, mic, mic + np.array([0.0, dist, 0.0]), max_order=0)
        assert _parabolic_peak(rir) == pytest.approx(dist / 343.0 * 16000, abs=0.25)


@pytest.mark.parametrize('rt60,dims', [(0.1, (4.0, 3.5, 2.8)), (0.3, (5.0, 4.0, 3.0)), (0.5, (5.0, 4.0, 3.0))])
def test_schroeder_rt60_within_twenty_percent(rt60, dims):
    room = RoomConfig(dimensions=dims, rt60=rt60)
    order = default_max_order(room, 0.75 * rt60)
    rir = simulate_rir(room, [1.3, 1.1, 1.2], [dims[0] - 1.4, dims[1] - 1.2, 1.6], max_order=order)
    estimate = estimate_rt60(rir, 16000)
    assert abs(estimate - rt60) / rt60 < 0.2


def test_inter_mic_delay_matches_geometry(rng):
    room = RoomConfig(dimensions=(12.0, 12.0, 4.0), rt60=0.3)
    geometry = ArrayGeometry.linear(center=[6.0, 6.0, 1.5], spacing=0.2)
    for _ in range(50):
        az = rng.uniform(-90, 90)
        theta = math.radians(az)
        src = np.array([6.0 + 3.0 * math.sin(theta), 6.0 + 3.0 * math.cos(theta), 1.5])
        r0, r1 = (simulate_rir(room, m, src, max_order=0) for m in geometry.mic_positions)
        d0, d1 = (np.linalg.norm(src - m) for m in geometry.mic_positions)
        tau, _ = gcc_phat(r0, r1, 16000, interp=64)
        measured = tau * 16000
        assert measured == pytest.approx((d0 - d1) / 343.0 * 16000, abs=0.25)


def test_rir_gain_falls_with_distance():
    room = RoomConfig(dimensions=(10.0, 10.0, 10.0), rt60=0.3)
    mic = np.array([2.0, 5.0, 5.0])
    near = simulate_rir(room, mic, mic + [1.0, 0, 0], max_order=0)
    far = simulate_rir(room, mic, mic + [4.0, 0, 0], max_order=0)
    assert np.max(np.abs(near)) > np.max(np.abs(far))


def test_infeasible_rt60_and_placements_are_rejected():
    with pytest.raises(RoomError, match='absorption out of range'):
        reflection_coefficient(RoomConfig(dimensions=(10.0, 10.0, 3.0), rt60=0.01))
    room = RoomConfig(dimensions=(4.0, 4.0, 3.0), rt60=0.3)
    with pytest.raises(RoomError, match='outside room'):
        simulate_rir(room, [5.0, 1.0, 1.0], [1.0, 1.0, 1.0], max_order=2)


def test_mix_scene_hits_target_snr(rng):
    clean = rng.standard_normal(4000)
    noise = rng.standard_normal(3000)
    rirs = [np.array([1.0, 0.3]), np.array([0.8, 0.0, 0.2])]
    noise_rirs = [np.array([0.5]), np.array([0.0, 0.7])]
    speech_only = mix_scene(clean, noise, rirs, noise_rirs, math.inf, 16000).samples
    mixed = mix_scene(clean, noise, rirs, noise_rirs, 5.0, 16000).samples
    residual = mixed - speech_only
    snr = 10 * np.log10(active_speech_power(speech_only, 16000) / np.mean(residual ** 2))
    assert snr == pytest.approx(5.0, abs=1e-9)


def test_mix_scene_snr_ignores_silence(rng):
    clean = np.concatenate([np.zeros(4000), rng.standard_normal(4000), np.zeros(4000)])
    noise = rng.standard_normal(12000)
    speech_only = mix_scene(clean, noise, [np.ones(1)] * 2, [np.ones(1)] * 2, math.inf, 16000).samples
    mixed = mix_scene(clean, noise, [np.ones(1)] * 2, [np.ones(1)] * 2, 0.0, 16000).samples
    residual = mixed - speech_only
    active = slice(4000, 8000)
    assert active_speech_power(speech_only, 16000) == pytest.approx(np.mean(speech_only[:, active] ** 2), rel=1e-12)
    snr = 10 * np.log10(np.mean(speech_only[:, active] ** 2) / np.mean(residual ** 2))
    assert snr == pytest.approx(0.0, abs=1e-9)


def test_mix_scene_rejects_silence(rng):
    with pytest.raises(RoomError, match='zero-power source'):
        mix_scene(np.zeros(100), rng.standard_normal(100), [np.ones(1)], [np.ones(1)], 5.0, 16000)
    with pytest.raises(RoomError, match='zero-power noise'):
        mix_scene(np.ones(100), np.zeros(100), [np.ones(1)], [np.ones(1)], 5.0, 16000)


def test_snr_distribution_is_truncated(rng):
    values = sample_snr(DatasetSpec(), rng, size=5000)
    assert values.min() >= 0.0 and values.max() <= 20.0
    assert np.mean(values) == pytest.approx(10.0, abs=0.3)


def test_word_signatures_are_distinct():
    signals = np.stack([word_signal(w, 16000) for w in WORDS])
    spectra = np.abs(np.fft.rfft(signals, axis=1))
    assert len({int(np.argmax(s)) for s in spectra}) == len(WORDS)


def test_simulate_utterance_is_deterministic_and_in_range():
    spec = DatasetSpec(room_x=(3.0, 4.0), room_y=(3.0, 4.0), room_z=(2.5, 3.0), distance=(0.5, 1.5), max_order=3)
    wave_a, meta_a = simulate_utterance(spec, seed=3, index=5)
    wave_b, meta_b = simulate_utterance(spec, seed=3, index=5)
    np.testing.assert_array_equal(wave_a.samples, wave_b.samples)
    assert meta_a == meta_b
    assert wave_a.channels == 2
    assert np.max(np.abs(wave_a.samples)) == pytest.approx(0.9)
    assert -90.0 <= meta_a['azimuth_deg'] <= 90.0
    assert 0.0 <= meta_a['snr_db'] <= 20.0
    assert meta_a['spacing_m'] == pytest.approx(0.04)


def test_no_noise_scene_has_infinite_snr():
    spec = DatasetSpec(room_x=(3.0, 4.0), room_y=(3.0, 4.0), room_z=(2.5, 3.0), distance=(0.5, 1.5),
                       max_order=2, add_noise=False)
    _, meta = simulate_utterance(spec, seed=1, index=0)
    assert math.isinf(meta['snr_db'])
    assert meta['scene']['snr_db'] is None


def test_splits_partition_indices():
    splits = split_indices(50, 5, 3, seed=0)
    assert len(splits['eval']) == 3 and len(splits['dev']) == 5 and len(splits['train']) == 42
    assert sorted(sum(splits.values(), [])) == list(range(50))
    assert splits == split_indices(50, 5, 3, seed=0)


def test_generate_dataset_writes_manifest_and_wavs(tmp_path):
    spec = DatasetSpec(room_x=(3.0, 4.0), room_y=(3.0, 4.0), room_z=(2.5, 3.0), distance=(0.5, 1.5), max_order=2)
    splits = split_indices(4, 1, 1, seed=2)
    records = generate_dataset(spec, str(tmp_path), 4, seed=2, splits=splits)
    assert [r.index for r in records] == [0, 1, 2, 3]
    assert read_manifest(str(tmp_path / 'manifest.jsonl')) == records
    for record in records:
        assert (tmp_path / record.wav_path).exists()
        assert set(record.words) <= set(WORDS)
    with open(tmp_path / 'manifest.jsonl') as f:
        assert set(json.loads(f.readline())) >= {'utt_id', 'path', 'transcript', 'azimuth_deg', 'snr_db',
                                                  'rt60_s', 'spacing_m', 'split'}


def test_same_seed_writes_identical_manifests(tmp_path):
    spec = DatasetSpec(room_x=(3.0, 4.0), room_y=(3.0, 4.0), room_z=(2.5, 3.0), distance=(0.5, 1.5), max_order=2)
    splits = split_indices(3, 1, 1, seed=9)
    for name in ('a', 'b'):
        generate_dataset(spec, str(tmp_path / name), 3, seed=9, splits=splits)
    assert (tmp_path / 'a' / 'manifest.jsonl').read_bytes() == (tmp_path / 'b' / 'manifest.jsonl').read_bytes()


def test_spacing_override_rerenders_same_transcripts(tmp_path):
    spec = DatasetSpec(room_x=(3.0, 4.0), room_y=(3.0, 4.0), room_z=(2.5, 3.0), distance=(0.5, 1.5), max_order=2)
    base = generate_dataset(spec, str(tmp_path / 'a'), 2, seed=4)
    wide = generate_dataset(spec, str(tmp_path / 'b'), 2, seed=4, spacing=0.1)
    assert [r.transcript for r in base] == [r.transcript for r in wide]
    assert all(r.spacing_m == pytest.approx(0.1) for r in wide)


def test_spacing_does_not_move_the_scene():
    room = RoomConfig(dimensions=(4.0, 3.5, 2.8), rt60=0.3)
    scenes = {}
    for spacing in (0.04, 0.06, 0.08, 0.10):
        spec = DatasetSpec(distance=(0.5, 1.5), spacing=spacing)
        scenes[spacing] = sample_scene(spec, room, np.random.default_rng(21))
    base_geometry, base_placement = scenes[0.04]
    for spacing, (geometry, placement) in scenes.items():
        np.testing.assert_allclose(geometry.center, base_geometry.center, rtol=0, atol=1e-12)
        assert geometry.spacing == pytest.approx(spacing)
        assert placement.to_dict() == base_placement.to_dict()
    with pytest.raises(RoomError, match='placement clearance'):
        sample_scene(DatasetSpec(spacing=0.3), room, np.random.default_rng(0))


def test_no_noise_snr_is_stored_as_null(tmp_path):
    record = UtteranceRecord(utt_id='utt000000', wav_path='wav/utt000000.wav', transcript='alpha', azimuth_deg=12.5,
                             snr_db=math.inf, rt60_s=0.2, spacing_m=0.04, split='eval')
    path = str(tmp_path / 'manifest.jsonl')
    write_manifest(path, [record])
    with open(path) as f:
        line = f.read()
    assert 'Infinity' not in line
    assert json.loads(line)['snr_db'] is None
    assert read_manifest(path) == [record]
