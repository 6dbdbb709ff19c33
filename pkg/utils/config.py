import os
import json
import logging
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, get_args, get_origin, get_type_hints

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = 'BEAMFLOW_OUTPUT_DIR'

FRONTEND_MODES = ('max', 'projection', 'attention', 'dir_aware', 'dir_attentive')
DIRECTION_MODES = ('dir_aware', 'dir_attentive')

# modes whose pooled output has the filter dimension
FILTER_DIM_MODES = ('max', 'attention', 'dir_attentive')

# System registry: name -> frontend kind and mode
SYSTEMS = {
    'DSPE2E': {
        'frontend': 'dsp',
        'mode': None,
        'description': 'GCC-PHAT look-direction choice, delay-and-sum, log-mel features',
    },
    'NBE2E max-pool': {
        'frontend': 'neural',
        'mode': 'max',
        'description': 'Neural beamforming, max pooling over look directions',
    },
    'NBE2E attn': {
        'frontend': 'neural',
        'mode': 'attention',
        'description': 'Neural beamforming, attention pooling over look directions',
    },
    'NBE2E proj': {
        'frontend': 'neural',
        'mode': 'projection',
        'description': 'Neural beamforming, projection pooling over look directions',
    },
    'dir-aware': {
        'frontend': 'neural',
        'mode': 'dir_aware',
        'description': 'Projection pooling with the angle embedding concatenated',
    },
    'dir-attentive': {
        'frontend': 'neural',
        'mode': 'dir_attentive',
        'description': 'Beam attention guided by the angle embedding',
    },
}


class ConfigError(ValueError):
    """Raised when an experiment config fails validation"""
    pass


@dataclass
class SimulationConfig:
    n_train: int = 2000
    n_dev: int = 100
    n_eval: Optional[int] = 200
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
    azimuth: Tuple[float, float] = (-90.0, 90.0)
    spacing: float = 0.04
    words_per_utt: Tuple[int, int] = (2, 8)
    add_noise: bool = True
    max_order: Optional[int] = None
    spacing_sweep: List[float] = field(default_factory=lambda: [0.04, 0.06, 0.08, 0.10])
    n_jobs: int = 1

    def eval_count(self) -> int:
        """Explicit n_eval, else 1% of the training set."""
        if self.n_eval is not None:
            return self.n_eval
        return max(1, round(0.01 * self.n_train))


@dataclass
class FrontendConfig:
    mode: str = 'projection'
    n_directions: int = 10
    n_filters: int = 40
    feature_dim: int = 40
    angle_bins: int = 36
    embed_dim: int = 16
    attention_dim: int = 32
    init_noise: float = 0.01
    eps: float = 1e-7
    n_channels: int = 2
    spacing: float = 0.04
    speed_of_sound: float = 343.0
    sample_rate: int = 16000
    window_length: int = 400
    hop: int = 160
    fft_size: int = 512
    window: str = 'hann'
    prior_perturbation_deg: float = 10.0

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def uses_direction(self) -> bool:
        return self.mode in DIRECTION_MODES


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    encoder_blocks: int = 7
    decoder_blocks: int = 2
    subsampling: int = 4
    ctc_weight: float = 0.1
    beam_width: int = 4
    max_decode_len: int = 12


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 0.001
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    n_jobs: int = 1
    dev_decode_beam: int = 1


@dataclass
class EvaluationConfig:
    doa_error_rates: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    look_directions: List[float] = field(default_factory=lambda: [-90.0, -45.0, 0.0, 45.0, 90.0])
    design_spacing: float = 0.04
    beam_width: int = 4


@dataclass
class ExperimentConfig:
    name: str = 'beamflow'
    seed: int = 1234
    output_dir: str = 'runs'
    systems: List[str] = field(default_factory=lambda: ['DSPE2E', 'NBE2E max-pool', 'NBE2E attn', 'NBE2E proj'])
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self):
        if self.frontend.mode not in FRONTEND_MODES:
            raise ConfigError(f"frontend.mode: expected one of {FRONTEND_MODES}, got {self.frontend.mode!r}")
        if not 0.0 <= self.model.ctc_weight <= 1.0:
            raise ConfigError(f"model.ctc_weight: expected a value in [0, 1], got {self.model.ctc_weight}")
        if self.model.d_model % self.model.heads:
            raise ConfigError(f"model.d_model: {self.model.d_model} not divisible by model.heads={self.model.heads}")
        for path, value in (('training.batch_size', self.training.batch_size),
                            ('training.epochs', self.training.epochs),
                            ('training.warmup_steps', self.training.warmup_steps),
                            ('model.subsampling', self.model.subsampling),
                            ('frontend.n_directions', self.frontend.n_directions)):
            if value < 1:
                raise ConfigError(f"{path}: expected >= 1, got {value}")
        for rate in self.evaluation.doa_error_rates:
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"evaluation.doa_error_rates: {rate} outside [0, 1]")
        if self.frontend.n_filters != self.frontend.feature_dim:
            modes = [("frontend.mode", self.frontend.mode)]
            modes += [(f"system {name!r}", SYSTEMS[name]['mode']) for name in self.systems if name in SYSTEMS]
            for owner, mode in modes:
                if mode in FILTER_DIM_MODES:
                    raise ConfigError(
                        f"frontend.n_filters: {owner} uses mode {mode}, which outputs the filter dimension, "
                        f"so n_filters must equal feature_dim={self.frontend.feature_dim}"
                    )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = get_origin(hint)
    args = get_args(hint)

    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return _build(hint, value, path)
    if origin is Optional or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (tuple, Tuple):
        if not isinstance(value, list) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected float, got {type(value).__name__}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected str, got {type(value).__name__}")
        return value
    return value


def _build(cls, data: Dict[str, Any], path: str):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {key: _coerce(value, hints[key], f"{path + '.' if path else ''}{key}") for key, value in data.items()}
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root: expected an object")
    config = _build(ExperimentConfig, data, '')
    config.validate()
    return config


def load_experiment_config(path: str) -> ExperimentConfig:
    """
    Read and validate a JSON experiment config.

    BEAMFLOW_OUTPUT_DIR, when set, replaces output_dir.
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({str(e)})")

    config = config_from_dict(data)
    override = os.environ.get(OUTPUT_DIR_ENV)
    if override:
        logger.info(f"Output directory overridden by {OUTPUT_DIR_ENV}: {override}")
        config.output_dir = override
    return config


def save_experiment_config(path: str, config: ExperimentConfig):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
