import logging
from typing import Dict, Iterable, Optional, Tuple, Union

import librosa
import numpy as np

from models import ArrayGeometry, ComplexSpectrogram, MultichannelWaveform, StftConfig
from utils.config import DIRECTION_MODES, FRONTEND_MODES, FrontendConfig
from utils.params import ParamStore
from utils.signal_core import complex_matmul_as_real, complex_mul_as_real, stft

logger = logging.getLogger(__name__)

PREFIX = 'frontend.'

# parameter blocks owned by each frontend mode
MODE_BLOCKS = {
    'max': ('H_re', 'H_im', 'S_re', 'S_im'),
    'projection': ('H_re', 'H_im', 'S_re', 'S_im', 'proj_M', 'proj_b'),
    'attention': ('H_re', 'H_im', 'S_re', 'S_im', 'att_W'),
    'dir_aware': ('H_re', 'H_im', 'S_re', 'S_im', 'angle_E', 'aware_M', 'aware_b'),
    'dir_attentive': ('H_re', 'H_im', 'Sc_re', 'Sc_im', 'angle_E', 'beam_W0', 'beam_We', 'beam_v'),
}


class FrontendError(ValueError):
    """Raised for shape mismatches, bad modes or missing direction priors"""
    pass


class StaleCacheError(FrontendError):
    """Raised when a forward cache is replayed after its parameters changed"""
    pass


def _check_shape(name: str, array: np.ndarray, expected: Tuple):
    if tuple(array.shape) != tuple(expected):
        raise FrontendError(f"shape mismatch for {name}: expected {tuple(expected)}, got {tuple(array.shape)}")


# ---------------------------------------------------------------- angle bins

def angle_bin(azimuth_deg: float, n_bins: int = 36) -> int:
    """Bin index of an azimuth in (-180, 180]; 180 shares bin 0 with -180+."""
    if not (-180.0 < azimuth_deg <= 180.0):
        raise FrontendError(f"unknown bin: azimuth {azimuth_deg} outside (-180, 180]")
    width = 360.0 / n_bins
    return int(np.floor((azimuth_deg + 180.0) / width)) % n_bins


def perturb_azimuth(azimuth_deg: float, max_deg: float, rng: np.random.Generator) -> float:
    """True azimuth plus a uniform error in [-max_deg, max_deg], wrapped to (-180, 180]."""
    value = azimuth_deg + rng.uniform(-max_deg, max_deg)
    value = (value + 180.0) % 360.0 - 180.0
    return 180.0 if value == -180.0 else float(value)


# ---------------------------------------------------------------- filtering

def spatial_filter(Xr: np.ndarray, Xi: np.ndarray, Hr: np.ndarray, Hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Y_p[t] = sum_c X_c[t] * H_c^p, element-wise over bins.

    X planes are [T, C, K], H planes [P, C, K]; returns Y planes [T, P, K].
    """
    if Xr.shape[1:] != Hr.shape[1:]:
        raise FrontendError(
            f"shape mismatch: spectrogram has {Xr.shape[1]} channels x {Xr.shape[2]} bins, "
            f"spatial filters expect {Hr.shape[1]} x {Hr.shape[2]}"
        )
    Yr, Yi = complex_mul_as_real((Xr[:, np.newaxis], Xi[:, np.newaxis]), (Hr[np.newaxis], Hi[np.newaxis]))
    return Yr.sum(axis=2), Yi.sum(axis=2)


def spatial_filter_backward(gYr: np.ndarray, gYi: np.ndarray, Xr: np.ndarray, Xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gHr = np.einsum('tpk,tck->pck', gYr, Xr) + np.einsum('tpk,tck->pck', gYi, Xi)
    gHi = np.einsum('tpk,tck->pck', gYi, Xr) - np.einsum('tpk,tck->pck', gYr, Xi)
    return gHr, gHi


def spectral_filter_logcompress(Yr: np.ndarray, Yi: np.ndarray, Sr: np.ndarray, Si: np.ndarray,
                                eps: float = 1e-7) -> Tuple[np.ndarray, Dict]:
    """
    O_f^p[t] = log(|sum_k Y_p[t,k] S_f^p[k]| + eps).

    Y planes [T, P, K], S planes [P, F, K]. Returns O [T, P, F] and the
    activations needed by the backward pass.
    """
    if Yr.shape[1:] != (Sr.shape[0], Sr.shape[2]):
        raise FrontendError(
            f"shape mismatch: beams are {Yr.shape[1]} x {Yr.shape[2]}, "
            f"spectral filters expect {Sr.shape[0]} x {Sr.shape[2]}"
        )
    # [P, T, K] @ [P, K, F] -> [P, T, F]
    Zr, Zi = complex_matmul_as_real((Yr.transpose(1, 0, 2), Yi.transpose(1, 0, 2)),
                                    (Sr.transpose(0, 2, 1), Si.transpose(0, 2, 1)))
    Zr, Zi = Zr.transpose(1, 0, 2), Zi.transpose(1, 0, 2)
    mag = np.sqrt(np.square(Zr) + np.square(Zi))
    out = np.log(mag + eps)
    return out, {'Zr': Zr, 'Zi': Zi, 'mag': mag, 'eps': eps}


def spectral_filter_backward(gO: np.ndarray, cache: Dict, Yr: np.ndarray, Yi: np.ndarray,
                             Sr: np.ndarray, Si: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Returns (gYr, gYi, gSr, gSi)."""
    mag = cache['mag']
    safe = mag > 0
    scale = np.where(safe, gO / (mag + cache['eps']) / np.where(safe, mag, 1.0), 0.0)
    gZr = scale * cache['Zr']
    gZi = scale * cache['Zi']

    # per direction: [F, T] @ [T, K]
    gZr_p, gZi_p = gZr.transpose(1, 2, 0), gZi.transpose(1, 2, 0)
    Yr_p, Yi_p = Yr.transpose(1, 0, 2), Yi.transpose(1, 0, 2)
    gSr = gZr_p @ Yr_p + gZi_p @ Yi_p
    gSi = gZi_p @ Yr_p - gZr_p @ Yi_p

    # per direction: [T, F] @ [F, K]
    gZr_t, gZi_t = gZr.transpose(1, 0, 2), gZi.transpose(1, 0, 2)
    gYr = gZr_t @ Sr + gZi_t @ Si
    gYi = gZi_t @ Sr - gZr_t @ Si
    return gYr.transpose(1, 0, 2), gYi.transpose(1, 0, 2), gSr, gSi


# ---------------------------------------------------------------- pooling

def pool_max(O: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Max over directions per (t, f); argmax keeps the lowest index on ties."""
    index = np.argmax(O, axis=1)
    return np.take_along_axis(O, index[:, np.newaxis, :], axis=1)[:, 0, :], index


def pool_max_backward(g: np.ndarray, index: np.ndarray, n_directions: int) -> np.ndarray:
    gO = np.zeros((g.shape[0], n_directions, g.shape[1]))
    np.put_along_axis(gO, index[:, np.newaxis, :], g[:, np.newaxis, :], axis=1)
    return gO


def pool_projection(O: np.ndarray, M: np.ndarray, b: np.ndarray) -> np.ndarray:
    T, P, F = O.shape
    if M.shape[0] != P * F:
        raise FrontendError(f"shape mismatch: projection expects {M.shape[0]} inputs, got {P} x {F}")
    return O.reshape(T, P * F) @ M + b


def pool_projection_backward(g: np.ndarray, O: np.ndarray, M: np.ndarray) -> Tuple[np.ndarray, ...]:
    T, P, F = O.shape
    flat = O.reshape(T, P * F)
    return (g @ M.T).reshape(T, P, F), flat.T @ g, g.sum(axis=0)


def _softmax(scores: np.ndarray, axis: int) -> np.ndarray:
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def pool_attention(O: np.ndarray, W: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Softmax over directions of score_p = 1^T (W O_p), then the weighted sum of O_p.

    Returns the pooled [T, F] features and the [T, P] weights.
    """
    F = O.shape[2]
    _check_shape('att_W', W, (F, F))
    w_bar = W.sum(axis=0)
    alpha = _softmax(O @ w_bar, axis=1)
    return np.einsum('tp,tpf->tf', alpha, O), alpha


def pool_attention_backward(g: np.ndarray, O: np.ndarray, W: np.ndarray, alpha: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    w_bar = W.sum(axis=0)
    g_alpha = np.einsum('tf,tpf->tp', g, O)
    g_score = alpha * (g_alpha - np.sum(alpha * g_alpha, axis=1, keepdims=True))
    gO = alpha[:, :, np.newaxis] * g[:, np.newaxis, :] + g_score[:, :, np.newaxis] * w_bar
    g_wbar = np.einsum('tp,tpf->f', g_score, O)
    gW = np.broadcast_to(g_wbar, W.shape).copy()
    return gO, gW


# ---------------------------------------------------------------- direction priors

def direction_aware(O: np.ndarray, e: np.ndarray, M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate every direction's features with the angle embedding, then project."""
    T, P, F = O.shape
    if M.shape[0] != P * F + e.shape[0]:
        raise FrontendError(
            f"shape mismatch: direction-aware projection expects {M.shape[0]} inputs, "
            f"got {P * F} + {e.shape[0]}"
        )
    z = np.concatenate([O.reshape(T, P * F), np.broadcast_to(e, (T, e.shape[0]))], axis=1)
    return z @ M + b


def direction_aware_backward(g: np.ndarray, O: np.ndarray, e: np.ndarray, M: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Returns (gO, gM, gb, ge)."""
    T, P, F = O.shape
    z = np.concatenate([O.reshape(T, P * F), np.broadcast_to(e, (T, e.shape[0]))], axis=1)
    gz = g @ M.T
    return gz[:, :P * F].reshape(T, P, F), z.T @ g, g.sum(axis=0), gz[:, P * F:].sum(axis=0)


def direction_attentive(Yr: np.ndarray, Yi: np.ndarray, e: np.ndarray, W0: np.ndarray,
                        We: np.ndarray, v: np.ndarray) -> Tuple[Tuple[np.ndarray, np.ndarray], Dict]:
    """
    Additive attention over beams guided by the angle embedding.

    u_p(t) = v^T tanh(W0 [Re Y_p; Im Y_p] + We e); the weights are a softmax
    over p and the output is the weighted sum of beams, [T, K] per plane.
    """
    T, P, K = Yr.shape
    _check_shape('beam_W0', W0, (W0.shape[0], 2 * K))
    _check_shape('beam_We', We, (W0.shape[0], e.shape[0]))
    _check_shape('beam_v', v, (W0.shape[0],))

    psi = np.concatenate([Yr, Yi], axis=2)
    h = np.tanh(psi @ W0.T + We @ e)
    alpha = _softmax(h @ v, axis=1)
    Ybr = np.einsum('tp,tpk->tk', alpha, Yr)
    Ybi = np.einsum('tp,tpk->tk', alpha, Yi)
    return (Ybr, Ybi), {'psi': psi, 'h': h, 'alpha': alpha}


def direction_attentive_backward(gYbr: np.ndarray, gYbi: np.ndarray, cache: Dict, Yr: np.ndarray, Yi: np.ndarray,
                                 e: np.ndarray, W0: np.ndarray, We: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Returns (gYr, gYi, gW0, gWe, gv, ge)."""
    psi, h, alpha = cache['psi'], cache['h'], cache['alpha']
    K = Yr.shape[2]

    g_alpha = np.einsum('tk,tpk->tp', gYbr, Yr) + np.einsum('tk,tpk->tp', gYbi, Yi)
    g_u = alpha * (g_alpha - np.sum(alpha * g_alpha, axis=1, keepdims=True))
    gv = np.einsum('tp,tpa->a', g_u, h)
    g_a = g_u[:, :, np.newaxis] * v * (1.0 - np.square(h))
    gW0 = np.einsum('tpa,tpk->ak', g_a, psi)
    g_sum = g_a.sum(axis=(0, 1))
    gWe = np.outer(g_sum, e)
    ge = We.T @ g_sum

    g_psi = g_a @ W0
    gYr = alpha[:, :, np.newaxis] * gYbr[:, np.newaxis, :] + g_psi[:, :, :K]
    gYi = alpha[:, :, np.newaxis] * gYbi[:, np.newaxis, :] + g_psi[:, :, K:]
    return gYr, gYi, gW0, gWe, gv, ge


# ---------------------------------------------------------------- parameters

def look_azimuths(n_directions: int) -> np.ndarray:
    """n equally spaced azimuths in (-180, 180], the last one at 180."""
    return -180.0 + 360.0 * (np.arange(n_directions) + 1) / n_directions


def steering_filters(cfg: FrontendConfig, azimuths: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Delay-and-sum filters (1/C) exp(+j 2 pi f tau) for a centered linear array, [P, C, K]."""
    geometry = ArrayGeometry.linear(center=np.zeros(3), spacing=cfg.spacing, n_mics=cfg.n_channels)
    tau = geometry.steering_delays(azimuths, cfg.speed_of_sound)  # [P, C]
    freqs = np.arange(cfg.bins) * cfg.sample_rate / cfg.fft_size
    phase = 2.0 * np.pi * tau[:, :, np.newaxis] * freqs
    return np.cos(phase) / cfg.n_channels, np.sin(phase) / cfg.n_channels


def mel_prototypes(cfg: FrontendConfig) -> np.ndarray:
    """Unit-peak triangular mel bands, [F, K]."""
    return librosa.filters.mel(sr=cfg.sample_rate, n_fft=cfg.fft_size, n_mels=cfg.n_filters, fmin=0.0,
                               fmax=cfg.sample_rate / 2.0, htk=True, norm=None).astype(np.float64)


def init_frontend_params(cfg: FrontendConfig, rng: np.random.Generator,
                         modes: Optional[Iterable[str]] = None, store: Optional[ParamStore] = None) -> ParamStore:
    """
    Register the parameter blocks used by the given modes (default cfg.mode).

    H starts at delay-and-sum steering for cfg.n_directions look directions,
    S at mel band-pass prototypes; both get N(0, init_noise) perturbations.
    """
    modes = list(modes) if modes is not None else [cfg.mode]
    for mode in modes:
        if mode not in FRONTEND_MODES:
            raise FrontendError(f"unknown frontend mode: {mode}")
    store = store if store is not None else ParamStore()
    needed = {name for mode in modes for name in MODE_BLOCKS[mode]}

    P, C, K, F = cfg.n_directions, cfg.n_channels, cfg.bins, cfg.n_filters
    De, Da, D = cfg.embed_dim, cfg.attention_dim, cfg.feature_dim
    sigma = cfg.init_noise

    def noisy(base: np.ndarray) -> np.ndarray:
        return base + sigma * rng.standard_normal(base.shape)

    def gaussian(shape, scale: float) -> np.ndarray:
        return scale * rng.standard_normal(shape)

    Hr, Hi = steering_filters(cfg, look_azimuths(P))
    mel = mel_prototypes(cfg)
    builders = {
        'H_re': lambda: noisy(Hr),
        'H_im': lambda: noisy(Hi),
        'S_re': lambda: noisy(np.tile(mel, (P, 1, 1))),
        'S_im': lambda: noisy(np.zeros((P, F, K))),
        'Sc_re': lambda: noisy(mel[np.newaxis]),
        'Sc_im': lambda: noisy(np.zeros((1, F, K))),
        'proj_M': lambda: gaussian((P * F, D), 1.0 / np.sqrt(P * F)),
        'proj_b': lambda: np.zeros(D),
        'att_W': lambda: gaussian((F, F), sigma),
        'angle_E': lambda: gaussian((cfg.angle_bins, De), 0.1),
        'aware_M': lambda: gaussian((P * F + De, D), 1.0 / np.sqrt(P * F + De)),
        'aware_b': lambda: np.zeros(D),
        'beam_W0': lambda: gaussian((Da, 2 * K), sigma / np.sqrt(2 * K)),
        'beam_We': lambda: gaussian((Da, De), 1.0 / np.sqrt(De)),
        'beam_v': lambda: gaussian((Da,), 1.0 / np.sqrt(Da)),
    }
    # fixed order keeps rng draws reproducible whatever the mode list
    for name, build in builders.items():
        if name in needed and PREFIX + name not in store:
            store.add(PREFIX + name, build())

    logger.info(f"[FRONTEND] initialized modes={modes} P={P} C={C} K={K} F={F}")
    return store


# ---------------------------------------------------------------- composition

def _stft_config(cfg: FrontendConfig) -> StftConfig:
    return StftConfig(window_length=cfg.window_length, hop=cfg.hop, fft_size=cfg.fft_size, window=cfg.window)


def frontend_forward(inp: Union[MultichannelWaveform, ComplexSpectrogram], params: ParamStore, cfg: FrontendConfig,
                     mode: Optional[str] = None, azimuth: Optional[float] = None) -> Tuple[np.ndarray, Dict]:
    """
    stft -> spatial filtering -> (beam attention | spectral filtering + pooling).

    Returns [T, feature_dim] features and a cache for frontend_backward.
    """
    mode = mode or cfg.mode
    if mode not in FRONTEND_MODES:
        raise FrontendError(f"unknown frontend mode: {mode}")
    if mode in DIRECTION_MODES and azimuth is None:
        raise FrontendError(f"missing azimuth: mode {mode} needs a source direction")
    missing = [PREFIX + n for n in MODE_BLOCKS[mode] if PREFIX + n not in params]
    if missing:
        raise FrontendError(f"parameters for mode {mode} not initialized: {missing}")

    spec = inp if isinstance(inp, ComplexSpectrogram) else stft(inp, _stft_config(cfg))
    Xr, Xi = spec.real, spec.imag
    p = lambda name: params[PREFIX + name]

    Yr, Yi = spatial_filter(Xr, Xi, p('H_re'), p('H_im'))
    cache = {'mode': mode, 'version': params.version, 'Xr': Xr, 'Xi': Xi, 'Yr': Yr, 'Yi': Yi}

    if mode == 'dir_attentive':
        bin_index = angle_bin(azimuth, cfg.angle_bins)
        e = p('angle_E')[bin_index]
        (Ybr, Ybi), beam_cache = direction_attentive(Yr, Yi, e, p('beam_W0'), p('beam_We'), p('beam_v'))
        O, spec_cache = spectral_filter_logcompress(Ybr[:, np.newaxis], Ybi[:, np.newaxis],
                                                    p('Sc_re'), p('Sc_im'), cfg.eps)
        cache.update({'bin': bin_index, 'e': e, 'beam': beam_cache, 'Ybr': Ybr, 'Ybi': Ybi,
                      'spectral': spec_cache})
        return O[:, 0, :], cache

    O, spec_cache = spectral_filter_logcompress(Yr, Yi, p('S_re'), p('S_im'), cfg.eps)
    cache.update({'O': O, 'spectral': spec_cache})

    if mode == 'max':
        out, index = pool_max(O)
        cache['argmax'] = index
    elif mode == 'projection':
        out = pool_projection(O, p('proj_M'), p('proj_b'))
    elif mode == 'attention':
        out, alpha = pool_attention(O, p('att_W'))
        cache['alpha'] = alpha
    else:
        bin_index = angle_bin(azimuth, cfg.angle_bins)
        e = p('angle_E')[bin_index]
        out = direction_aware(O, e, p('aware_M'), p('aware_b'))
        cache.update({'bin': bin_index, 'e': e})
    return out, cache


def frontend_backward(g: np.ndarray, cache: Dict, params: ParamStore) -> Dict[str, np.ndarray]:
    """
    Reverse pass of frontend_forward.

    Returns a gradient for every frontend block in the store; blocks the
    cached mode does not use get zeros.
    """
    if cache is None:
        raise FrontendError("no forward cache")
    if cache['version'] != params.version:
        raise StaleCacheError(
            f"stale cache: parameters at version {params.version}, cache built at {cache['version']}"
        )
    mode = cache['mode']
    grads = {name: np.zeros_like(value) for name, value in params.items() if name.startswith(PREFIX)}
    p = lambda name: params[PREFIX + name]
    Yr, Yi = cache['Yr'], cache['Yi']

    if mode == 'dir_attentive':
        gO = g[:, np.newaxis, :]
        gYbr, gYbi, gSr, gSi = spectral_filter_backward(gO, cache['spectral'], cache['Ybr'][:, np.newaxis],
                                                        cache['Ybi'][:, np.newaxis], p('Sc_re'), p('Sc_im'))
        grads[PREFIX + 'Sc_re'] += gSr
        grads[PREFIX + 'Sc_im'] += gSi
        gYr, gYi, gW0, gWe, gv, ge = direction_attentive_backward(
            gYbr[:, 0], gYbi[:, 0], cache['beam'], Yr, Yi, cache['e'], p('beam_W0'), p('beam_We'), p('beam_v'))
        grads[PREFIX + 'beam_W0'] += gW0
        grads[PREFIX + 'beam_We'] += gWe
        grads[PREFIX + 'beam_v'] += gv
        grads[PREFIX + 'angle_E'][cache['bin']] += ge
    else:
        O = cache['O']
        if mode == 'max':
            gO = pool_max_backward(g, cache['argmax'], O.shape[1])
        elif mode == 'projection':
            gO, gM, gb = pool_projection_backward(g, O, p('proj_M'))
            grads[PREFIX + 'proj_M'] += gM
            grads[PREFIX + 'proj_b'] += gb
        elif mode == 'attention':
            gO, gW = pool_attention_backward(g, O, p('att_W'), cache['alpha'])
            grads[PREFIX + 'att_W'] += gW
        else:
            gO, gM, gb, ge = direction_aware_backward(g, O, cache['e'], p('aware_M'))
            grads[PREFIX + 'aware_M'] += gM
            grads[PREFIX + 'aware_b'] += gb
            grads[PREFIX + 'angle_E'][cache['bin']] += ge
        gYr, gYi, gSr, gSi = spectral_filter_backward(gO, cache['spectral'], Yr, Yi, p('S_re'), p('S_im'))
        grads[PREFIX + 'S_re'] += gSr
        grads[PREFIX + 'S_im'] += gSi

    gHr, gHi = spatial_filter_backward(gYr, gYi, cache['Xr'], cache['Xi'])
    grads[PREFIX + 'H_re'] += gHr
    grads[PREFIX + 'H_im'] += gHi
    return grads
