import os
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from utils.asr_backend import Vocabulary
from utils.config import SYSTEMS, ConfigError, ExperimentConfig, save_experiment_config
from utils.room_sim import WORDS, DatasetSpec, generate_dataset, read_manifest, split_indices
from utils.training import SystemSpec, Trainer, Utterance, prepare_utterances

logger = logging.getLogger(__name__)

PRIOR_SYSTEMS = ['NBE2E proj', 'dir-aware', 'dir-attentive']


class ExperimentError(ConfigError):
    """Raised when artifacts on disk do not match the experiment config"""
    pass


def get_system(name: str) -> SystemSpec:
    if name not in SYSTEMS:
        raise ConfigError(f"systems: unknown system {name!r} (known: {list(SYSTEMS)})")
    entry = SYSTEMS[name]
    return SystemSpec(name=name, frontend=entry['frontend'], mode=entry['mode'])


def vocabulary() -> Vocabulary:
    return Vocabulary(WORDS)


# ---------------------------------------------------------------- layout

def data_dir(config: ExperimentConfig, prior_set: bool = False) -> str:
    return os.path.join(config.output_dir, 'data_prior' if prior_set else 'data')


def spacing_dir(config: ExperimentConfig, spacing: float) -> str:
    return os.path.join(data_dir(config), f"spacing_{round(spacing * 100):02d}cm")


def run_dir(config: ExperimentConfig, system: str, prior_set: bool = False) -> str:
    return os.path.join(config.output_dir, 'runs_prior' if prior_set else 'runs', get_system(system).slug)


def results_dir(config: ExperimentConfig) -> str:
    path = os.path.join(config.output_dir, 'results')
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------- data

def dataset_spec(config: ExperimentConfig, add_noise: Optional[bool] = None) -> DatasetSpec:
    sim = config.simulation
    return DatasetSpec(
        room_x=sim.room_x, room_y=sim.room_y, room_z=sim.room_z, rt60=sim.rt60,
        snr_mean=sim.snr_mean, snr_std=sim.snr_std, snr_range=sim.snr_range,
        distance=sim.distance, source_height=sim.source_height, noise_height=sim.noise_height,
        azimuth=sim.azimuth, spacing=sim.spacing, words_per_utt=sim.words_per_utt,
        add_noise=sim.add_noise if add_noise is None else add_noise, max_order=sim.max_order,
        sample_rate=config.frontend.sample_rate, speed_of_sound=config.frontend.speed_of_sound,
    )


def generate_corpus(config: ExperimentConfig, spacing_sweep: bool = False, prior_set: bool = False) -> Dict[str, str]:
    """
    Render the train/dev/eval corpus, plus optional spacing-swept eval sets and
    the no-added-noise corpus used by the direction-prior systems.

    Returns manifest paths keyed by set name.
    """
    sim = config.simulation
    n_eval = sim.eval_count()
    n_total = sim.n_train + sim.n_dev + n_eval
    splits = split_indices(n_total, sim.n_dev, n_eval, config.seed)
    manifests = {}

    out = data_dir(config)
    spec = dataset_spec(config)
    generate_dataset(spec, out, n_total, config.seed, splits=splits, n_jobs=sim.n_jobs)
    manifests['main'] = os.path.join(out, 'manifest.jsonl')

    if spacing_sweep:
        for spacing in sim.spacing_sweep:
            path = spacing_dir(config, spacing)
            generate_dataset(spec, path, n_total, config.seed, splits={'eval': splits['eval']},
                             spacing=spacing, n_jobs=sim.n_jobs)
            manifests[f"spacing_{spacing:.2f}"] = os.path.join(path, 'manifest.jsonl')

    if prior_set:
        path = data_dir(config, prior_set=True)
        generate_dataset(dataset_spec(config, add_noise=False), path, n_total, config.seed + 1,
                         splits=splits, n_jobs=sim.n_jobs)
        manifests['prior'] = os.path.join(path, 'manifest.jsonl')

    save_experiment_config(os.path.join(config.output_dir, 'config.json'), config)
    logger.info(f"[EXPERIMENT] generated {len(manifests)} manifests under {config.output_dir}")
    return manifests


def load_split(config: ExperimentConfig, directory: str, split: str) -> List[Utterance]:
    manifest = os.path.join(directory, 'manifest.jsonl')
    try:
        records = [r for r in read_manifest(manifest) if r.split == split]
    except FileNotFoundError as e:
        raise ExperimentError(f"{str(e)}; run `generate` first")
    return prepare_utterances(records, directory, vocabulary(), config.seed,
                              config.frontend.prior_perturbation_deg)


# ---------------------------------------------------------------- training / loading

def train_system(config: ExperimentConfig, system: str, prior_set: bool = False,
                 resume: bool = False) -> pd.DataFrame:
    directory = data_dir(config, prior_set)
    trainer = Trainer(get_system(system), config, vocabulary(), run_dir(config, system, prior_set))
    train_items = load_split(config, directory, 'train')
    dev_items = load_split(config, directory, 'dev')
    return trainer.train_model(train_items, dev_items, resume=resume)


def load_trainer(config: ExperimentConfig, system: str, prior_set: bool = False,
                 checkpoint: Optional[str] = None) -> Trainer:
    trainer = Trainer(get_system(system), config, vocabulary(), run_dir(config, system, prior_set))
    if not trainer.load_model(checkpoint):
        raise ExperimentError(f"no checkpoint for {system} under {trainer.run_dir}; run `train` first")
    info = trainer.get_model_info()
    if info['ctc_weight'] != config.model.ctc_weight:
        raise ExperimentError(f"checkpoint/config mismatch for {system}: ctc_weight differs")
    expected = Trainer(get_system(system), config, vocabulary(), trainer.run_dir)
    expected.initialize()
    for name in expected.params:
        if name not in trainer.params or trainer.params[name].shape != expected.params[name].shape:
            raise ExperimentError(f"checkpoint/config mismatch for {system}: parameter block {name}")
    return trainer


# ---------------------------------------------------------------- tables

def evaluate_table(config: ExperimentConfig, systems: Sequence[str], conditions: Dict[str, Dict],
                   prior_set: bool = False) -> pd.DataFrame:
    """
    WER (%) per system (rows) and condition (columns).

    Each condition is {'data': directory, 'error_rate': float}.
    """
    rows = {}
    cache: Dict[str, List[Utterance]] = {}
    beam = config.evaluation.beam_width
    for system in systems:
        row = {}
        label = None
        try:
            trainer = load_trainer(config, system, prior_set)
            for label, condition in conditions.items():
                directory = condition['data']
                if directory not in cache:
                    cache[directory] = load_split(config, directory, 'eval')
                result = trainer.evaluate(cache[directory], beam_width=beam,
                                          error_rate=condition.get('error_rate', 0.0))
                row[label] = 100.0 * result['wer']
                logger.info(f"[EVAL] {system} {label}: WER {row[label]:.2f}%")
        except Exception as e:
            where = f" on {label}" if label else ""
            logger.error(f"[EVAL] {system} failed{where}: {str(e)}")
            raise
        rows[system] = row
    table = pd.DataFrame.from_dict(rows, orient='index', columns=list(conditions))
    table.index.name = 'system'
    return table


def doa_sweep(config: ExperimentConfig, systems: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """WER against injected DOA error rate; systems without a DOA input are evaluated at every rate too."""
    systems = systems or config.systems
    conditions = {f"{rate:.2f}": {'data': data_dir(config), 'error_rate': rate}
                  for rate in config.evaluation.doa_error_rates}
    return evaluate_table(config, systems, conditions)


def spacing_sweep(config: ExperimentConfig, systems: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """WER on eval sets re-rendered at each array spacing (the DSP baseline keeps its design spacing)."""
    systems = systems or config.systems
    conditions = {f"{round(s * 100)}cm": {'data': spacing_dir(config, s)} for s in config.simulation.spacing_sweep}
    return evaluate_table(config, systems, conditions)


def prior_table(config: ExperimentConfig, systems: Sequence[str] = PRIOR_SYSTEMS) -> pd.DataFrame:
    """WER on the no-added-noise set, with the reduction relative to the first (vanilla) system."""
    table = evaluate_table(config, systems, {'wer': {'data': data_dir(config, prior_set=True)}}, prior_set=True)
    baseline = float(table['wer'].iloc[0])
    table['rel_reduction'] = (baseline - table['wer']) / baseline if baseline > 0 else 0.0
    return table


def trend_report(table: pd.DataFrame) -> Dict[str, Dict]:
    """Spearman rank correlation of WER against the column order, per system."""
    report = {}
    positions = np.arange(table.shape[1])
    for system, row in table.iterrows():
        values = row.to_numpy(dtype=float)
        flat = bool(np.all(values == values[0]))
        rho = 0.0 if flat else float(spearmanr(positions, values)[0])
        report[system] = {'spearman_rho': rho, 'flat': flat}
    return report


def write_table(table: pd.DataFrame, stem: str) -> Dict[str, str]:
    """Write <stem>.csv and an aligned markdown <stem>.md."""
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    table.to_csv(f"{stem}.csv", float_format='%.17g')
    with open(f"{stem}.md", 'w', encoding='utf-8') as f:
        f.write(table.to_markdown(floatfmt='.2f') + '\n')
    return {'csv': f"{stem}.csv", 'markdown': f"{stem}.md"}


def read_table(path: str) -> pd.DataFrame:
    table = pd.read_csv(path, index_col='system')
    table.columns = [str(c) for c in table.columns]
    return table
