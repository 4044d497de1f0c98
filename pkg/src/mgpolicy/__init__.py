"""Masked generative action policies for small 2D control tasks.

Two-stage pipeline: a convolutional VQ tokenizer turns action chunks into
discrete codes, then a masked transformer learns to fill in code canvases
conditioned on short observation windows. Samplers decode those canvases
with a fixed number of forward passes and refine the not-yet-executed
suffix as new observations arrive.
"""

from .config import ExperimentConfig, default_config, load_config
from .envs import ToyEnv, DropoutWrapper, collect_demonstrations
from .samplers import SamplerConfig, generate_plan, rollout_episode
from .tokenizer import ActionTokenizer
from .transformer import MaskedGenerativePolicy

__all__ = [
    "ActionTokenizer",
    "DropoutWrapper",
    "ExperimentConfig",
    "MaskedGenerativePolicy",
    "SamplerConfig",
    "ToyEnv",
    "collect_demonstrations",
    "default_config",
    "generate_plan",
    "load_config",
    "rollout_episode",
]
