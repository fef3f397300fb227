"""Imitation learning for sequence policies: MLE, IQLearn and GAIL on synthetic tasks."""

from .config import ExperimentConfig, load_config, parse_config
from .envs import Trajectory, ToyMdp, gen_dataset, make_task
from .objectives import IqlConfig, extract_rewards
from .policy import PolicyModel, SamplerConfig
from .trainer import setup_experiment, train

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "load_config", "parse_config", "Trajectory", "ToyMdp", "gen_dataset",
           "make_task", "IqlConfig", "extract_rewards", "PolicyModel", "SamplerConfig",
           "setup_experiment", "train", "__version__"]
