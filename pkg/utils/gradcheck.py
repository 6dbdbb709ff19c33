import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from models import MultichannelWaveform
from utils.asr_backend import (asr_loss, attention_decoder_loss, ctc_loss, encoder_backward,
                               encoder_forward, init_asr_params)
from utils.config import FrontendConfig, ModelConfig
from utils.layers import (add_attention, layer_norm, layer_norm_backward, multi_head_attention,
                          multi_head_attention_backward)
from utils.neural_frontend import (direction_attentive, direction_attentive_backward, direction_aware,
                                   direction_aware_backward, frontend_backward, frontend_forward,
                                   init_frontend_params, pool_attention, pool_attention_backward,
                                   pool_max, pool_max_backward, pool_projection, pool_projection_backward,
                                   spatial_filter, spatial_filter_backward, spectral_filter_backward,
                                   spectral_filter_logcompress)
from utils.params import ParamStore

logger = logging.getLogger(__name__)

Blocks = Dict[str, np.ndarray]
LossFn = Callable[[Blocks], Tuple[float, Blocks]]

DEFAULT_STEP = 1e-5
GRAD_FLOOR = 1e-8


class VerificationError(RuntimeError):
    """Raised when a gradient check exceeds its tolerance"""
    pass


def grad_check(fn: LossFn, blocks: Blocks, step: float = DEFAULT_STEP, max_coords: int = 200,
               rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """
    Compare fn's analytic gradients with central differences.

    fn(blocks) returns (loss, {block: gradient}) and must read the arrays in
    blocks at call time; coordinates are perturbed in place. Blocks larger
    than max_coords are checked on a random subset. Returns the maximum
    relative error per block over coordinates where either gradient exceeds
    1e-8 in magnitude.
    """
    rng = rng or np.random.default_rng(0)
    _, analytic = fn(blocks)
    report = {}
    for name, value in blocks.items():
        if value.size <= max_coords:
            coords = np.arange(value.size)
        else:
            coords = np.sort(rng.choice(value.size, size=max_coords, replace=False))
        flat = value.reshape(-1)
        worst = 0.0
        for index in coords:
            original = flat[index]
            flat[index] = original + step
            plus, _ = fn(blocks)
            flat[index] = original - step
            minus, _ = fn(blocks)
            flat[index] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = float(analytic[name].reshape(-1)[index])
            scale = max(abs(exact), abs(numeric))
            if scale > GRAD_FLOOR:
                worst = max(worst, abs(exact - numeric) / scale)
        report[name] = worst
    return report


def sign_flip(fn: LossFn) -> LossFn:
    """Mutation canary: the same loss with every gradient negated."""
    def flipped(blocks: Blocks):
        loss, grads = fn(blocks)
        return loss, {name: -g for name, g in grads.items()}
    return flipped


# ---------------------------------------------------------------- instances

def _cotangent(rng: np.random.Generator, shape) -> np.ndarray:
    return 0.1 * rng.standard_normal(shape)


def _linear_case(rng):
    x = rng.standard_normal((5, 4))
    R = _cotangent(rng, (5, 3))
    blocks = {'W': rng.standard_normal((4, 3))}
    return lambda b: (float(np.sum((x @ b['W']) * R)), {'W': x.T @ R}), blocks


def _spatial_case(rng):
    Xr, Xi = rng.standard_normal((4, 2, 5)), rng.standard_normal((4, 2, 5))
    Rr, Ri = _cotangent(rng, (4, 3, 5)), _cotangent(rng, (4, 3, 5))
    blocks = {'H_re': rng.standard_normal((3, 2, 5)), 'H_im': rng.standard_normal((3, 2, 5))}

    def fn(b):
        Yr, Yi = spatial_filter(Xr, Xi, b['H_re'], b['H_im'])
        gHr, gHi = spatial_filter_backward(Rr, Ri, Xr, Xi)
        return float(np.sum(Yr * Rr) + np.sum(Yi * Ri)), {'H_re': gHr, 'H_im': gHi}
    return fn, blocks


def _spectral_case(rng):
    R = _cotangent(rng, (4, 3, 6))
    blocks = {'Y_re': rng.standard_normal((4, 3, 5)), 'Y_im': rng.standard_normal((4, 3, 5)),
              'S_re': rng.standard_normal((3, 6, 5)), 'S_im': rng.standard_normal((3, 6, 5))}

    def fn(b):
        O, cache = spectral_filter_logcompress(b['Y_re'], b['Y_im'], b['S_re'], b['S_im'])
        gYr, gYi, gSr, gSi = spectral_filter_backward(R, cache, b['Y_re'], b['Y_im'], b['S_re'], b['S_im'])
        return float(np.sum(O * R)), {'Y_re': gYr, 'Y_im': gYi, 'S_re': gSr, 'S_im': gSi}
    return fn, blocks


def _pool_max_case(rng):
    R = _cotangent(rng, (3, 5))
    blocks = {'O': rng.standard_normal((3, 4, 5))}

    def fn(b):
        out, index = pool_max(b['O'])
        return float(np.sum(out * R)), {'O': pool_max_backward(R, index, 4)}
    return fn, blocks


def _pool_projection_case(rng):
    R = _cotangent(rng, (3, 6))
    blocks = {'O': rng.standard_normal((3, 4, 5)), 'M': rng.standard_normal((20, 6)), 'b': rng.standard_normal(6)}

    def fn(b):
        out = pool_projection(b['O'], b['M'], b['b'])
        gO, gM, gb = pool_projection_backward(R, b['O'], b['M'])
        return float(np.sum(out * R)), {'O': gO, 'M': gM, 'b': gb}
    return fn, blocks


def _pool_attention_case(rng):
    R = _cotangent(rng, (3, 5))
    blocks = {'O': rng.standard_normal((3, 4, 5)), 'W': rng.standard_normal((5, 5))}

    def fn(b):
        out, alpha = pool_attention(b['O'], b['W'])
        gO, gW = pool_attention_backward(R, b['O'], b['W'], alpha)
        return float(np.sum(out * R)), {'O': gO, 'W': gW}
    return fn, blocks


def _direction_aware_case(rng):
    R = _cotangent(rng, (3, 6))
    bin_index = 2
    blocks = {'O': rng.standard_normal((3, 4, 5)), 'E': rng.standard_normal((4, 3)),
              'M': rng.standard_normal((23, 6)), 'b': rng.standard_normal(6)}

    def fn(b):
        e = b['E'][bin_index]
        out = direction_aware(b['O'], e, b['M'], b['b'])
        gO, gM, gb, ge = direction_aware_backward(R, b['O'], e, b['M'])
        gE = np.zeros_like(b['E'])
        gE[bin_index] = ge
        return float(np.sum(out * R)), {'O': gO, 'E': gE, 'M': gM, 'b': gb}
    return fn, blocks


def _direction_attentive_case(rng):
    Rr, Ri = _cotangent(rng, (4, 5)), _cotangent(rng, (4, 5))
    blocks = {'Y_re': rng.standard_normal((4, 3, 5)), 'Y_im': rng.standard_normal((4, 3, 5)),
              'e': rng.standard_normal(3), 'W0': 0.3 * rng.standard_normal((6, 10)),
              'We': rng.standard_normal((6, 3)), 'v': rng.standard_normal(6)}

    def fn(b):
        (Ybr, Ybi), cache = direction_attentive(b['Y_re'], b['Y_im'], b['e'], b['W0'], b['We'], b['v'])
        gYr, gYi, gW0, gWe, gv, ge = direction_attentive_backward(
            Rr, Ri, cache, b['Y_re'], b['Y_im'], b['e'], b['W0'], b['We'], b['v'])
        loss = float(np.sum(Ybr * Rr) + np.sum(Ybi * Ri))
        return loss, {'Y_re': gYr, 'Y_im': gYi, 'e': ge, 'W0': gW0, 'We': gWe, 'v': gv}
    return fn, blocks


def small_frontend_config(mode: str) -> FrontendConfig:
    return FrontendConfig(mode=mode, n_directions=3, n_filters=4, feature_dim=4 if mode != 'projection' else 5,
                          angle_bins=36, embed_dim=3, attention_dim=4, n_channels=2, spacing=0.04,
                          window_length=16, hop=8, fft_size=16, window='hann')


def _frontend_case(mode: str, cfg: Optional[FrontendConfig] = None, n_samples: int = 64):
    def build(rng):
        fcfg = cfg or small_frontend_config(mode)
        params = init_frontend_params(fcfg, rng, modes=[mode])
        # wider spread than the steering init so no |Z| sits near zero
        for name in params:
            params[name][...] += 0.1 * rng.standard_normal(params[name].shape)
        wave = MultichannelWaveform(samples=rng.standard_normal((fcfg.n_channels, n_samples)),
                                    sample_rate=fcfg.sample_rate)
        out, _ = frontend_forward(wave, params, fcfg, mode, azimuth=37.0)
        R = _cotangent(rng, out.shape)
        blocks = {name: params[name] for name in params}

        def fn(b):
            features, cache = frontend_forward(wave, params, fcfg, mode, azimuth=37.0)
            return float(np.sum(features * R)), frontend_backward(R, cache, params)
        return fn, blocks
    return build


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(d_model=8, heads=2, d_ff=12, encoder_blocks=1, decoder_blocks=1, subsampling=2,
                  ctc_weight=0.1, beam_width=2, max_decode_len=4)
    values.update(overrides)
    return ModelConfig(**values)


def _layer_norm_case(rng):
    x = rng.standard_normal((4, 6))
    R = _cotangent(rng, (4, 6))
    store = ParamStore()
    store.add('ln.gamma', 1.0 + 0.1 * rng.standard_normal(6))
    store.add('ln.beta', rng.standard_normal(6))
    blocks = {'x': x, 'ln.gamma': store['ln.gamma'], 'ln.beta': store['ln.beta']}

    def fn(b):
        out, cache = layer_norm(b['x'], store, 'ln')
        grads = {}
        gx = layer_norm_backward(R, cache, store, 'ln', grads)
        grads['x'] = gx
        return float(np.sum(out * R)), grads
    return fn, blocks


def _attention_case(rng):
    store = ParamStore()
    add_attention(store, 'mha', 8, rng)
    xq, xkv = rng.standard_normal((3, 8)), rng.standard_normal((5, 8))
    R = _cotangent(rng, (3, 8))
    blocks = {name: store[name] for name in store}
    blocks['xq'], blocks['xkv'] = xq, xkv

    def fn(b):
        out, cache = multi_head_attention(b['xq'], b['xkv'], store, 'mha', 2)
        grads = {}
        g_q, g_kv = multi_head_attention_backward(R, cache, store, 'mha', 2, grads)
        grads['xq'], grads['xkv'] = g_q, g_kv
        return float(np.sum(out * R)), grads
    return fn, blocks


def _encoder_case(rng):
    cfg = tiny_model_config()
    store = init_asr_params(cfg, 7, 4, rng)
    for name in store.names('encoder.'):
        store[name][...] += 0.05 * rng.standard_normal(store[name].shape)
    features = rng.standard_normal((7, 4))
    h, _ = encoder_forward(features, store, cfg)
    R = _cotangent(rng, h.shape)
    blocks = {name: store[name] for name in store.names('encoder.')}
    blocks['features'] = features

    def fn(b):
        out, cache = encoder_forward(b['features'], store, cfg)
        grads = {}
        grads['features'] = encoder_backward(R, cache, store, cfg, grads)
        return float(np.sum(out * R)), grads
    return fn, blocks


def _decoder_case(rng):
    cfg = tiny_model_config()
    store = init_asr_params(cfg, 7, 4, rng)
    h = rng.standard_normal((3, 8))
    target = [4, 6, 5, 2]
    blocks = {name: store[name] for name in store.names('decoder.')}
    blocks['h'] = h

    def fn(b):
        loss, grads, gh = attention_decoder_loss(b['h'], target, store, cfg)
        grads['h'] = gh
        return loss, grads
    return fn, blocks


def _ctc_case(rng):
    logits = rng.standard_normal((6, 4))
    blocks = {'log_probs': logits - np.log(np.sum(np.exp(logits), axis=1, keepdims=True))}

    def fn(b):
        loss, grad = ctc_loss(b['log_probs'], [1, 3, 3])
        return loss, {'log_probs': grad}
    return fn, blocks


def _joint_case(rng):
    cfg = tiny_model_config(ctc_weight=0.3)
    store = init_asr_params(cfg, 7, 4, rng)
    features = rng.standard_normal((9, 4))
    blocks = {name: store[name] for name in store}
    blocks['features'] = features

    def fn(b):
        losses, grads, g_features = asr_loss(b['features'], [4, 5, 2], store, cfg)
        grads['features'] = g_features
        return losses['theta'], grads
    return fn, blocks


# op name -> instance builder, scope, tolerance, optional difference step
GRADCHECK_OPS = {
    # linear in W, central differences are exact at any step
    'linear': {'build': _linear_case, 'scope': 'backend', 'tolerance': 1e-9, 'step': 1e-2},
    'spatial_filter': {'build': _spatial_case, 'scope': 'frontend', 'tolerance': 1e-4},
    'spectral_filter_logcompress': {'build': _spectral_case, 'scope': 'frontend', 'tolerance': 1e-4},
    'pool_max': {'build': _pool_max_case, 'scope': 'frontend', 'tolerance': 1e-4},
    'pool_projection': {'build': _pool_projection_case, 'scope': 'frontend', 'tolerance': 1e-4},
    'pool_attention': {'build': _pool_attention_case, 'scope': 'frontend', 'tolerance': 1e-4},
    'direction_aware': {'build': _direction_aware_case, 'scope': 'frontend', 'tolerance': 1e-4},
    'direction_attentive': {'build': _direction_attentive_case, 'scope': 'frontend', 'tolerance': 1e-4},
    'frontend_max': {'build': _frontend_case('max'), 'scope': 'frontend', 'tolerance': 1e-4},
    'frontend_projection': {'build': _frontend_case('projection'), 'scope': 'frontend', 'tolerance': 1e-4},
    'frontend_attention': {'build': _frontend_case('attention'), 'scope': 'frontend', 'tolerance': 1e-4},
    'frontend_dir_aware': {'build': _frontend_case('dir_aware'), 'scope': 'frontend', 'tolerance': 1e-4},
    'frontend_dir_attentive': {'build': _frontend_case('dir_attentive'), 'scope': 'frontend', 'tolerance': 1e-4},
    'layer_norm': {'build': _layer_norm_case, 'scope': 'backend', 'tolerance': 1e-4},
    'multi_head_attention': {'build': _attention_case, 'scope': 'backend', 'tolerance': 1e-4},
    'encoder': {'build': _encoder_case, 'scope': 'backend', 'tolerance': 1e-4},
    'attention_decoder_loss': {'build': _decoder_case, 'scope': 'backend', 'tolerance': 1e-4},
    'ctc_loss': {'build': _ctc_case, 'scope': 'backend', 'tolerance': 1e-4},
    'joint_loss': {'build': _joint_case, 'scope': 'backend', 'tolerance': 1e-4},
}

SCOPES = ('frontend', 'backend', 'all')


def run_gradchecks(scope: str = 'all', canary: Optional[str] = None, seed: int = 0,
                   max_coords: int = 200) -> List[Dict]:
    """
    Check every registered op in scope; returns one row per (op, block).

    With canary set, that op's gradients are sign-flipped before checking.
    """
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope: {scope} (expected one of {SCOPES})")
    if canary is not None and canary not in GRADCHECK_OPS:
        raise ValueError(f"unknown op for canary: {canary}")

    rows = []
    for op, entry in GRADCHECK_OPS.items():
        if scope != 'all' and entry['scope'] != scope and op != canary:
            continue
        rng = np.random.default_rng([seed, len(rows)])
        fn, blocks = entry['build'](rng)
        if op == canary:
            fn = sign_flip(fn)
        report = grad_check(fn, blocks, step=entry.get('step', DEFAULT_STEP), max_coords=max_coords, rng=rng)
        for block, error in report.items():
            rows.append({'op': op, 'block': block, 'max_rel_err': error,
                         'tolerance': entry['tolerance'], 'passed': bool(error < entry['tolerance'])})
        worst = max(report.values()) if report else 0.0
        level = logging.INFO if worst < entry['tolerance'] else logging.ERROR
        logger.log(level, f"[GRADCHECK] {op}: max rel err {worst:.2e} over {len(report)} blocks")
    return rows


def failed_ops(rows: List[Dict]) -> List[str]:
    seen = []
    for row in rows:
        if not row['passed'] and row['op'] not in seen:
            seen.append(row['op'])
    return seen
