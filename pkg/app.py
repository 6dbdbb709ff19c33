import os
import sys
import logging

from utils.config import ExperimentConfig

LOG_LEVEL_ENV = 'BEAMFLOW_LOG_LEVEL'
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(level: str = None):
    """Log to stderr; BEAMFLOW_LOG_LEVEL (default INFO) unless a level is passed."""
    level = (level or os.environ.get(LOG_LEVEL_ENV, 'INFO')).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT,
                        stream=sys.stderr, force=True)
    # numba/librosa chatter at DEBUG
    for noisy in ('numba', 'matplotlib'):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def prepare_output_dir(config: ExperimentConfig) -> str:
    """Create the experiment's output folders and return the root."""
    for sub in ('', 'data', 'runs', 'results'):
        os.makedirs(os.path.join(config.output_dir, sub), exist_ok=True)
    return config.output_dir
