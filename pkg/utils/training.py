import os
import glob
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from models import ArrayGeometry, LookDirectionBank, StftConfig, UtteranceRecord
from utils.asr_backend import (Vocabulary, asr_loss, beam_search_decode, corpus_wer,
                               encoder_forward, greedy_decode, init_asr_params)
from utils.config import ExperimentConfig, FrontendConfig
from utils.dsp_baseline import dsp_frontend, load_features, save_features
from utils.neural_frontend import frontend_backward, frontend_forward, init_frontend_params, perturb_azimuth
from utils.params import ParamStore, load_blocks, save_blocks
from utils.signal_core import read_wav

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['epoch', 'step', 'lr', 'theta', 'theta_ctc', 'theta_att', 'dev_wer']


class TrainingError(RuntimeError):
    """Raised for manifest/feature mismatches and unusable checkpoints"""
    pass


class GradientBlowupError(TrainingError):
    """Raised when a gradient block holds non-finite values"""
    pass


# ---------------------------------------------------------------- schedule / optimizer

def lr_at(step: int, base_lr: float = 0.001, warmup_steps: int = 4000) -> float:
    """Warmup then inverse-sqrt decay, peaking at base_lr when step == warmup_steps."""
    if step < 1:
        raise ValueError(f"learning rate undefined at step {step}; steps start at 1")
    if warmup_steps < 1:
        raise ValueError(f"warmup_steps must be >= 1, got {warmup_steps}")
    scale = base_lr * np.sqrt(warmup_steps)
    return float(scale * min(step ** -0.5, step * warmup_steps ** -1.5))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> 'OptimizerState':
        return cls(beta1=beta1, beta2=beta2, eps=eps,
                   m={name: np.zeros_like(value) for name, value in params.items()},
                   v={name: np.zeros_like(value) for name, value in params.items()})


def check_gradients(grads: Dict[str, np.ndarray]):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientBlowupError(f"gradient blowup in block {name}")


def adam_step(params: ParamStore, grads: Dict[str, np.ndarray], state: OptimizerState, lr: float):
    """One bias-corrected Adam update of every block in grads, in place."""
    check_gradients(grads)
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name}: gradient {g.shape} vs parameter {params[name].shape}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        params[name][...] -= update
    params.bump()


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    check_gradients(grads)
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


# ---------------------------------------------------------------- systems and data

@dataclass(frozen=True)
class SystemSpec:
    name: str
    frontend: str  # 'dsp' or 'neural'
    mode: Optional[str] = None

    @property
    def uses_direction(self) -> bool:
        return self.mode in ('dir_aware', 'dir_attentive')

    @property
    def slug(self) -> str:
        return self.name.lower().replace(' ', '_').replace('-', '_')


@dataclass
class Utterance:
    record: UtteranceRecord
    wav_path: str
    target: List[int]
    prior_azimuth: Optional[float] = None


def prior_for(record: UtteranceRecord, seed: int, max_deg: float) -> float:
    """Source-direction prior: true azimuth plus a uniform error fixed by (seed, index)."""
    rng = np.random.default_rng([seed, record.index, 7])
    return perturb_azimuth(record.azimuth_deg, max_deg, rng)


def prepare_utterances(records: Sequence[UtteranceRecord], data_dir: str, vocab: Vocabulary,
                       seed: int, prior_deg: float = 10.0) -> List[Utterance]:
    items = []
    for record in records:
        path = os.path.join(data_dir, record.wav_path)
        if not os.path.exists(path):
            raise TrainingError(f"manifest/feature mismatch: {record.utt_id} points to missing {path}")
        try:
            target = vocab.encode(record.words)
        except ValueError as e:
            raise TrainingError(f"transcript of {record.utt_id} not covered by the vocabulary: {str(e)}")
        items.append(Utterance(record=record, wav_path=path, target=target,
                               prior_azimuth=prior_for(record, seed, prior_deg)))
    return items


def _stft_config(cfg: FrontendConfig) -> StftConfig:
    return StftConfig(window_length=cfg.window_length, hop=cfg.hop, fft_size=cfg.fft_size, window=cfg.window)


def dsp_features(item: Utterance, config: ExperimentConfig, error_rate: float, cache_dir: Optional[str]) -> np.ndarray:
    """Baseline features for one utterance, cached on disk per DOA error rate."""
    cache_path = None
    if cache_dir:
        # corpus directory name keeps re-rendered sets (same utt ids) apart
        corpus = os.path.basename(os.path.dirname(os.path.dirname(os.path.abspath(item.wav_path))))
        cache_path = os.path.join(cache_dir, f"{corpus}_{item.record.utt_id}_err{error_rate:.2f}.feat")
        if os.path.exists(cache_path):
            return load_features(cache_path)

    wave = read_wav(item.wav_path)
    fcfg = config.frontend
    geometry = ArrayGeometry.linear(center=np.zeros(3), spacing=config.evaluation.design_spacing, n_mics=wave.channels)
    bank = LookDirectionBank.for_geometry(config.evaluation.look_directions, geometry, fcfg.speed_of_sound)
    # one stream per utterance, shared by every error rate
    rng = np.random.default_rng([config.seed, item.record.index])
    features = dsp_frontend(wave, geometry, bank, error_rate, rng, _stft_config(fcfg), fcfg.speed_of_sound,
                            n_mels=fcfg.feature_dim)

    if cache_path:
        save_features(cache_path, features)
        features = load_features(cache_path)
    return features


def utterance_gradients(system: SystemSpec, params: ParamStore, config: ExperimentConfig, item: Utterance,
                        cache_dir: Optional[str] = None) -> Tuple[Dict[str, float], Dict[str, np.ndarray]]:
    """Joint loss and gradients of every parameter block for one utterance."""
    fcfg = config.frontend
    if system.frontend == 'dsp':
        features = dsp_features(item, config, 0.0, cache_dir)
        if features.shape[1] != fcfg.feature_dim:
            raise TrainingError(
                f"manifest/feature mismatch: {item.record.utt_id} has {features.shape[1]}-dim features, "
                f"expected {fcfg.feature_dim}"
            )
        losses, grads, _ = asr_loss(features, item.target, params, config.model)
        return losses, grads

    wave = read_wav(item.wav_path)
    azimuth = item.prior_azimuth if system.uses_direction else None
    features, cache = frontend_forward(wave, params, fcfg, system.mode, azimuth)
    losses, grads, g_features = asr_loss(features, item.target, params, config.model)
    grads.update(frontend_backward(g_features, cache, params))
    return losses, grads


def init_system_params(system: SystemSpec, config: ExperimentConfig, vocab: Vocabulary) -> ParamStore:
    rng = np.random.default_rng(config.seed)
    params = ParamStore()
    if system.frontend == 'neural':
        init_frontend_params(config.frontend, rng, modes=[system.mode], store=params)
    init_asr_params(config.model, len(vocab), config.frontend.feature_dim, rng, store=params)
    return params


# ---------------------------------------------------------------- checkpoints

def checkpoint_stem(run_dir: str, epoch: int) -> str:
    return os.path.join(run_dir, 'checkpoints', f"epoch_{epoch:03d}")


def save_checkpoint(stem: str, params: ParamStore, state: OptimizerState, meta: Dict):
    blocks = dict(params.items())
    for name in params:
        blocks[f"adam.m/{name}"] = state.m[name]
        blocks[f"adam.v/{name}"] = state.v[name]
    save_blocks(stem, blocks)
    meta = dict(meta, adam_step=state.step, beta1=state.beta1, beta2=state.beta2, adam_eps=state.eps)
    with open(f"{stem}.json", 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    logger.info(f"[CKPT] saved {stem} (epoch {meta.get('epoch')}, step {state.step})")


def load_checkpoint(stem: str) -> Tuple[ParamStore, OptimizerState, Dict]:
    try:
        blocks = load_blocks(stem)
        with open(f"{stem}.json", 'r', encoding='utf-8') as f:
            meta = json.load(f)
    except (OSError, ValueError) as e:
        raise TrainingError(f"unusable checkpoint {stem}: {str(e)}")

    params = ParamStore()
    state = OptimizerState(beta1=meta['beta1'], beta2=meta['beta2'], eps=meta['adam_eps'], step=meta['adam_step'])
    for name, value in blocks.items():
        if name.startswith('adam.m/'):
            state.m[name[len('adam.m/'):]] = value
        elif name.startswith('adam.v/'):
            state.v[name[len('adam.v/'):]] = value
        else:
            params.add(name, value)
    return params, state, meta


def latest_checkpoint(run_dir: str) -> Optional[str]:
    stems = sorted(p[:-len('.json')] for p in glob.glob(os.path.join(run_dir, 'checkpoints', 'epoch_*.json')))
    return stems[-1] if stems else None


# ---------------------------------------------------------------- trainer

class Trainer:
    """Trains and decodes one system (frontend + transformer backend) under a run directory"""

    def __init__(self, system: SystemSpec, config: ExperimentConfig, vocab: Vocabulary, run_dir: str):
        self.system = system
        self.config = config
        self.vocab = vocab
        self.run_dir = run_dir
        self.metrics_path = os.path.join(run_dir, 'metrics.csv')
        self.feature_dir = os.path.join(run_dir, 'features') if system.frontend == 'dsp' else None
        self.params: Optional[ParamStore] = None
        self.state: Optional[OptimizerState] = None
        self.epoch = 0
        self.checkpoint_meta: Dict = {}

        os.makedirs(os.path.join(run_dir, 'checkpoints'), exist_ok=True)
        if self.feature_dir:
            os.makedirs(self.feature_dir, exist_ok=True)

    def initialize(self):
        tcfg = self.config.training
        self.params = init_system_params(self.system, self.config, self.vocab)
        self.state = OptimizerState.for_params(self.params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
        self.epoch = 0
        self.checkpoint_meta = {}

    def load_model(self, stem: Optional[str] = None) -> bool:
        """Load the given checkpoint, or the latest one in the run directory."""
        stem = stem or latest_checkpoint(self.run_dir)
        if stem is None:
            logger.info(f"[TRAIN] no checkpoint under {self.run_dir}")
            return False
        try:
            params, state, meta = load_checkpoint(stem)
            if meta.get('system') != self.system.name:
                raise TrainingError(f"checkpoint {stem} belongs to system {meta.get('system')!r}, "
                                    f"not {self.system.name!r}")
        except Exception as e:
            logger.error(f"[CKPT] {self.system.name}: cannot load {stem}: {str(e)}")
            raise
        self.params, self.state = params, state
        self.epoch = int(meta['epoch'])
        self.checkpoint_meta = meta
        logger.info(f"[TRAIN] loaded {stem} (epoch {self.epoch}, step {self.state.step})")
        return True

    def save_model(self):
        meta = {
            'epoch': self.epoch,
            'step': self.state.step,
            'seed': self.config.seed,
            'system': self.system.name,
            'mode': self.system.mode or 'dsp',
            'ctc_weight': self.config.model.ctc_weight,
        }
        save_checkpoint(checkpoint_stem(self.run_dir, self.epoch), self.params, self.state, meta)

    def _batch_gradients(self, batch: List[Utterance]) -> Tuple[Dict[str, float], Dict[str, np.ndarray]]:
        results = Parallel(n_jobs=self.config.training.n_jobs)(
            delayed(utterance_gradients)(self.system, self.params, self.config, item, self.feature_dir)
            for item in batch
        )
        # order-fixed reduction
        totals = {'theta': 0.0, 'theta_ctc': 0.0, 'theta_att': 0.0}
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        for losses, item_grads in results:
            for key in totals:
                totals[key] += losses[key]
            for name, g in item_grads.items():
                grads[name] += g
        scale = 1.0 / len(batch)
        return totals, {name: g * scale for name, g in grads.items()}

    def _load_metrics(self) -> pd.DataFrame:
        if not os.path.exists(self.metrics_path):
            return pd.DataFrame(columns=METRIC_COLUMNS)
        metrics = pd.read_csv(self.metrics_path)
        return metrics[metrics['epoch'] <= self.epoch].reset_index(drop=True)

    def train_model(self, train_items: List[Utterance], dev_items: List[Utterance],
                    resume: bool = False) -> pd.DataFrame:
        """
        Run the remaining epochs, writing a checkpoint and a metrics row per epoch.

        Batch order comes from (seed, epoch) only, so a resumed run replays
        the epochs an unbroken run would have.
        """
        tcfg = self.config.training
        if not train_items:
            raise TrainingError("empty training set")
        if not (resume and self.load_model()):
            self.initialize()
        metrics = self._load_metrics()

        logger.info(f"[TRAIN] {self.system.name}: {len(train_items)} train / {len(dev_items)} dev utterances, "
                    f"epochs {self.epoch + 1}..{tcfg.epochs}, ctc_weight={self.config.model.ctc_weight}")

        try:
            metrics = self._run_epochs(train_items, dev_items, metrics)
        except Exception as e:
            logger.error(f"[TRAIN] {self.system.name} failed after epoch {self.epoch} "
                         f"(step {self.state.step}): {str(e)}")
            raise
        return metrics

    def _run_epochs(self, train_items: List[Utterance], dev_items: List[Utterance],
                    metrics: pd.DataFrame) -> pd.DataFrame:
        tcfg = self.config.training
        for epoch in range(self.epoch + 1, tcfg.epochs + 1):
            order = np.random.default_rng([self.config.seed, epoch]).permutation(len(train_items))
            epoch_totals = {'theta': 0.0, 'theta_ctc': 0.0, 'theta_att': 0.0}
            lr = 0.0
            for start in range(0, len(order), tcfg.batch_size):
                batch = [train_items[i] for i in order[start:start + tcfg.batch_size]]
                totals, grads = self._batch_gradients(batch)
                grads, norm = clip_by_global_norm(grads, tcfg.clip_norm)
                lr = lr_at(self.state.step + 1, tcfg.base_lr, tcfg.warmup_steps)
                adam_step(self.params, grads, self.state, lr)
                for key in epoch_totals:
                    epoch_totals[key] += totals[key]
                logger.debug(f"[TRAIN] step {self.state.step} lr={lr:.2e} |g|={norm:.3f} "
                             f"theta={totals['theta'] / len(batch):.4f}")

            self.epoch = epoch
            dev_wer = self.evaluate(dev_items, beam_width=tcfg.dev_decode_beam)['wer'] if dev_items else float('nan')
            row = {'epoch': epoch, 'step': self.state.step, 'lr': lr, 'dev_wer': dev_wer}
            row.update({key: value / len(train_items) for key, value in epoch_totals.items()})
            new_row = pd.DataFrame([row], columns=METRIC_COLUMNS)
            metrics = pd.concat([metrics, new_row], ignore_index=True) if len(metrics) else new_row
            metrics.to_csv(self.metrics_path, index=False)
            self.save_model()
            logger.info(f"[TRAIN] epoch {epoch}: theta={row['theta']:.4f} ctc={row['theta_ctc']:.4f} "
                        f"att={row['theta_att']:.4f} dev_wer={dev_wer:.3f}")
        return metrics

    def features(self, item: Utterance, error_rate: float = 0.0, prior: Optional[float] = None) -> np.ndarray:
        if self.system.frontend == 'dsp':
            return dsp_features(item, self.config, error_rate, self.feature_dir)
        azimuth = None
        if self.system.uses_direction:
            azimuth = item.prior_azimuth if prior is None else prior
        features, _ = frontend_forward(read_wav(item.wav_path), self.params, self.config.frontend,
                                       self.system.mode, azimuth)
        return features

    def predict(self, item: Utterance, beam_width: int = 1, error_rate: float = 0.0) -> List[str]:
        if self.params is None:
            raise TrainingError("model not trained or loaded")
        h, _ = encoder_forward(self.features(item, error_rate), self.params, self.config.model)
        if beam_width == 1:
            hyp = greedy_decode(h, self.params, self.config.model)
        else:
            hyp = beam_search_decode(h, self.params, self.config.model, beam_width)
        return self.vocab.decode(hyp.tokens)

    def evaluate(self, items: List[Utterance], beam_width: int = 1, error_rate: float = 0.0) -> Dict:
        hypotheses = {}
        pairs = []
        for item in items:
            try:
                words = self.predict(item, beam_width, error_rate)
            except Exception as e:
                logger.error(f"[EVAL] {self.system.name}: decoding {item.record.utt_id} failed: {str(e)}")
                raise
            hypotheses[item.record.utt_id] = ' '.join(words)
            pairs.append((words, item.record.words))
        return {'wer': corpus_wer(pairs) if pairs else float('nan'), 'hypotheses': hypotheses}

    def get_model_info(self) -> Dict:
        if self.params is None:
            return {'system': self.system.name, 'is_trained': False, 'status': 'Not trained'}
        return {
            'system': self.system.name,
            'is_trained': self.epoch > 0,
            'epoch': self.epoch,
            'step': self.state.step,
            'n_parameters': self.params.n_values(),
            'frontend': self.system.mode or 'dsp',
            'ctc_weight': self.checkpoint_meta.get('ctc_weight', self.config.model.ctc_weight),
        }
