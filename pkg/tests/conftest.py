import numpy as np
import pytest

from models import MultichannelWaveform
from utils.config import ExperimentConfig, FrontendConfig, ModelConfig, SimulationConfig, TrainingConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def stereo_noise(rng):
    return MultichannelWaveform(samples=rng.standard_normal((2, 8000)), sample_rate=16000)


def tiny_experiment(tmp_path, **training) -> ExperimentConfig:
    """A corpus and model small enough to train for a couple of epochs inside a test."""
    train_cfg = dict(epochs=2, batch_size=4, warmup_steps=10, n_jobs=1)
    train_cfg.update(training)
    return ExperimentConfig(
        name='tiny',
        seed=7,
        output_dir=str(tmp_path / 'out'),
        systems=['DSPE2E', 'NBE2E proj'],
        simulation=SimulationConfig(n_train=8, n_dev=2, n_eval=2, room_x=(3.0, 4.0), room_y=(3.0, 4.0),
                                    room_z=(2.5, 3.0), rt60=(0.15, 0.25), distance=(0.5, 1.5),
                                    words_per_utt=(2, 3), max_order=4, spacing_sweep=[0.04, 0.08]),
        frontend=FrontendConfig(n_directions=3, n_filters=8, feature_dim=8, embed_dim=4, attention_dim=4),
        model=ModelConfig(d_model=8, heads=2, d_ff=16, encoder_blocks=1, decoder_blocks=1, max_decode_len=5,
                          beam_width=2),
        training=TrainingConfig(**train_cfg),
    )


@pytest.fixture
def tiny_config(tmp_path):
    return tiny_experiment(tmp_path)
