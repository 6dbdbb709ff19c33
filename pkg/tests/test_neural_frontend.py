import numpy as np
import pytest

from models import MultichannelWaveform, StftConfig
from utils.config import FRONTEND_MODES, FrontendConfig
from utils.dsp_baseline import angular_distance
from utils.gradcheck import _frontend_case, grad_check, small_frontend_config
from utils.neural_frontend import (FrontendError, StaleCacheError, angle_bin, direction_attentive, direction_aware,
                                   frontend_backward, frontend_forward, init_frontend_params, look_azimuths,
                                   perturb_azimuth, pool_attention, pool_max, pool_projection, spatial_filter,
                                   spectral_filter_logcompress, steering_filters)
from utils.signal_core import stft


def _planes(rng, shape):
    return rng.standard_normal(shape), rng.standard_normal(shape)


def test_spatial_filter_selector_and_coherent_sum(rng):
    Xr, Xi = _planes(rng, (6, 2, 9))
    Hr, Hi = np.zeros((3, 2, 9)), np.zeros((3, 2, 9))
    Hr[:, 0, :] = 1.0
    Yr, Yi = spatial_filter(Xr, Xi, Hr, Hi)
    for p in range(3):
        np.testing.assert_array_equal(Yr[:, p], Xr[:, 0])
        np.testing.assert_array_equal(Yi[:, p], Xi[:, 0])

    same_r, same_i = np.repeat(Xr[:, :1], 2, axis=1), np.repeat(Xi[:, :1], 2, axis=1)
    Yr, Yi = spatial_filter(same_r, same_i, np.full((1, 2, 9), 0.5), np.zeros((1, 2, 9)))
    np.testing.assert_allclose(Yr[:, 0], Xr[:, 0])
    np.testing.assert_allclose(Yi[:, 0], Xi[:, 0])


def test_filters_match_naive_loops(rng):
    Xr, Xi = _planes(rng, (3, 2, 5))
    Hr, Hi = _planes(rng, (2, 2, 5))
    Sr, Si = _planes(rng, (2, 4, 5))
    Yr, Yi = spatial_filter(Xr, Xi, Hr, Hi)
    O, _ = spectral_filter_logcompress(Yr, Yi, Sr, Si, eps=1e-7)
    X, H, S = Xr + 1j * Xi, Hr + 1j * Hi, Sr + 1j * Si
    for t in range(3):
        for p in range(2):
            y = sum(X[t, c] * H[p, c] for c in range(2))
            np.testing.assert_allclose(Yr[t, p] + 1j * Yi[t, p], y, atol=1e-12)
            for f in range(4):
                z = sum(y[k] * S[p, f, k] for k in range(5))
                assert O[t, p, f] == pytest.approx(np.log(abs(z) + 1e-7), abs=1e-12)


def test_spectral_filter_shape_mismatch(rng):
    Yr, Yi = _planes(rng, (3, 2, 5))
    with pytest.raises(FrontendError, match='shape mismatch'):
        spectral_filter_logcompress(Yr, Yi, np.zeros((2, 4, 6)), np.zeros((2, 4, 6)))


def test_spectral_delta_filter_reads_one_bin(rng):
    Yr, Yi = _planes(rng, (4, 1, 6))
    Sr, Si = np.zeros((1, 1, 6)), np.zeros((1, 1, 6))
    Sr[0, 0, 2] = 1.0
    O, _ = spectral_filter_logcompress(Yr, Yi, Sr, Si, eps=1e-7)
    np.testing.assert_allclose(O[:, 0, 0], np.log(np.hypot(Yr[:, 0, 2], Yi[:, 0, 2]) + 1e-7))


def test_max_pool_dominates_and_is_idempotent(rng):
    O = rng.standard_normal((5, 4, 3))
    out, index = pool_max(O)
    assert np.all(out[:, np.newaxis, :] >= O)
    flat = np.repeat(out[:, np.newaxis, :], 4, axis=1)
    again, tie_index = pool_max(flat)
    np.testing.assert_array_equal(again, out)
    assert np.all(tie_index == 0)


def test_max_pool_ignores_direction_order(rng):
    O = rng.standard_normal((5, 4, 3))
    out, _ = pool_max(O)
    for order in ([3, 2, 1, 0], [1, 3, 0, 2]):
        shuffled, _ = pool_max(O[:, order])
        np.testing.assert_array_equal(shuffled, out)


def test_projection_pool_bias_and_selector(rng):
    O = rng.standard_normal((5, 3, 4))
    b = rng.standard_normal(4)
    np.testing.assert_array_equal(pool_projection(np.zeros_like(O), rng.standard_normal((12, 4)), b),
                                  np.tile(b, (5, 1)))
    M = np.zeros((12, 4))
    M[4:8] = np.eye(4)
    np.testing.assert_allclose(pool_projection(O, M, np.zeros(4)), O[:, 1])


def test_attention_pool_weights_on_simplex(rng):
    O = rng.standard_normal((6, 3, 4))
    out, alpha = pool_attention(O, np.zeros((4, 4)))
    np.testing.assert_allclose(out, O.mean(axis=1))
    out, alpha = pool_attention(O, rng.standard_normal((4, 4)))
    assert np.all(alpha >= 0)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0)
    assert np.all(out <= O.max(axis=1) + 1e-12) and np.all(out >= O.min(axis=1) - 1e-12)


def test_direction_aware_uses_the_embedding(rng):
    O = rng.standard_normal((5, 3, 4))
    M, b = rng.standard_normal((12 + 2, 6)), rng.standard_normal(6)
    a = direction_aware(O, np.array([1.0, 0.0]), M, b)
    c = direction_aware(O, np.array([0.0, 1.0]), M, b)
    assert not np.allclose(a, c)

    ablated = M.copy()
    ablated[12:] = 0.0
    np.testing.assert_allclose(direction_aware(O, np.array([3.0, -2.0]), ablated, b), pool_projection(O, M[:12], b))


def test_direction_attentive_single_beam_and_uniform_cases(rng):
    e = rng.standard_normal(3)
    W0, We = rng.standard_normal((4, 10)), rng.standard_normal((4, 3))
    Yr, Yi = _planes(rng, (6, 1, 5))
    (Ybr, Ybi), _ = direction_attentive(Yr, Yi, e, W0, We, rng.standard_normal(4))
    np.testing.assert_allclose(Ybr, Yr[:, 0])
    np.testing.assert_allclose(Ybi, Yi[:, 0])

    Yr, Yi = _planes(rng, (6, 3, 5))
    (Ybr, Ybi), cache = direction_attentive(Yr, Yi, e, W0, We, np.zeros(4))
    np.testing.assert_allclose(Ybr, Yr.mean(axis=1))
    np.testing.assert_allclose(cache['alpha'], 1.0 / 3)

    (Ybr, _), cache = direction_attentive(Yr, Yi, e, W0, We, rng.standard_normal(4))
    np.testing.assert_allclose(cache['alpha'].sum(axis=1), 1.0)
    assert np.all(Ybr <= Yr.max(axis=1) + 1e-12) and np.all(Ybr >= Yr.min(axis=1) - 1e-12)


def test_angle_bins():
    assert angle_bin(180.0) == 0
    assert angle_bin(-179.5) == 0
    assert angle_bin(-170.0) == 1
    assert angle_bin(0.0) == 18
    assert angle_bin(179.9) == 35
    with pytest.raises(FrontendError, match='unknown bin'):
        angle_bin(-180.0)


def test_perturbed_prior_stays_close_and_wrapped(rng):
    for _ in range(200):
        value = perturb_azimuth(175.0, 10.0, rng)
        assert -180.0 < value <= 180.0
        assert angular_distance(value, 175.0) <= 10.0 + 1e-9


def test_steering_init_is_real_average_at_broadside():
    cfg = FrontendConfig()
    azimuths = look_azimuths(cfg.n_directions)
    assert azimuths[-1] == 180.0 and len(azimuths) == 10
    np.testing.assert_allclose(np.diff(azimuths), 36.0)
    Hr, Hi = steering_filters(cfg, np.array([0.0]))
    np.testing.assert_allclose(Hr, 0.5)
    np.testing.assert_allclose(Hi, 0.0, atol=1e-15)


@pytest.mark.parametrize('mode', FRONTEND_MODES)
def test_every_mode_emits_forty_dim_features(stereo_noise, mode):
    cfg = FrontendConfig(mode=mode)
    params = init_frontend_params(cfg, np.random.default_rng(0))
    assert params['frontend.H_re'].shape == (10, 2, 257)
    features, _ = frontend_forward(stereo_noise, params, cfg, azimuth=30.0)
    assert features.shape == (48, 40)
    assert np.all(np.isfinite(features))


def test_direction_modes_need_an_azimuth(stereo_noise):
    cfg = small_frontend_config('dir_aware')
    params = init_frontend_params(cfg, np.random.default_rng(0))
    with pytest.raises(FrontendError, match='missing azimuth'):
        frontend_forward(stereo_noise, params, cfg)
    with pytest.raises(FrontendError, match='not initialized'):
        frontend_forward(stereo_noise, params, cfg, mode='attention')


def test_backward_rejects_stale_cache(stereo_noise):
    cfg = small_frontend_config('projection')
    params = init_frontend_params(cfg, np.random.default_rng(0))
    features, cache = frontend_forward(stereo_noise, params, cfg)
    params.bump()
    with pytest.raises(StaleCacheError):
        frontend_backward(np.ones_like(features), cache, params)


def test_zero_upstream_gives_zero_gradients(stereo_noise):
    cfg = small_frontend_config('dir_attentive')
    params = init_frontend_params(cfg, np.random.default_rng(0))
    features, cache = frontend_forward(stereo_noise, params, cfg, azimuth=-60.0)
    grads = frontend_backward(np.zeros_like(features), cache, params)
    assert all(not np.any(g) for g in grads.values())


def test_unused_mode_blocks_get_zero_gradients(stereo_noise):
    cfg = small_frontend_config('projection')
    params = init_frontend_params(cfg, np.random.default_rng(0), modes=['projection', 'attention', 'dir_aware'])
    features, cache = frontend_forward(stereo_noise, params, cfg, mode='projection')
    grads = frontend_backward(np.ones_like(features), cache, params)
    assert set(grads) == set(params.names('frontend.'))
    for name in ('frontend.att_W', 'frontend.angle_E', 'frontend.aware_M', 'frontend.aware_b'):
        assert not np.any(grads[name])
    assert np.any(grads['frontend.H_re']) and np.any(grads['frontend.proj_M'])


def test_single_direction_matches_complex_reference(rng):
    cfg = FrontendConfig(mode='max', n_directions=1, n_filters=4, feature_dim=4,
                         window_length=16, hop=8, fft_size=16)
    params = init_frontend_params(cfg, np.random.default_rng(3))
    wave = MultichannelWaveform(samples=rng.standard_normal((2, 80)), sample_rate=16000)
    features, _ = frontend_forward(wave, params, cfg)

    spec = stft(wave, StftConfig(window_length=16, hop=8, fft_size=16))
    X = spec.real + 1j * spec.imag
    H = params['frontend.H_re'][0] + 1j * params['frontend.H_im'][0]
    S = params['frontend.S_re'][0] + 1j * params['frontend.S_im'][0]
    Y = np.sum(X * H, axis=1)
    expected = np.log(np.abs(Y @ S.T) + cfg.eps)
    np.testing.assert_allclose(features, expected, rtol=1e-10, atol=1e-12)


@pytest.mark.slow
def test_full_size_frontend_gradients():
    fn, blocks = _frontend_case('projection', FrontendConfig(mode='projection'), n_samples=8000)(
        np.random.default_rng(11))
    report = grad_check(fn, blocks, max_coords=50)
    assert max(report.values()) < 1e-3
