"""Hierarchical motion encoder-decoder trajectory forecaster on a numpy autodiff core."""
from .harness import Checkpoint, RunConfig, evaluate, load_config, train
from .model import HMNet, ModelConfig, SceneBatch

__all__ = ["Checkpoint", "HMNet", "ModelConfig", "RunConfig", "SceneBatch", "evaluate",
           "load_config", "train"]
__version__ = "0.1.0"
