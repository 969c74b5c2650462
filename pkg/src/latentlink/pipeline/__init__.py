"""Replay, configuration, staged training, evaluation and metrics."""

from .config import RunConfig, RunSettings, load_config, paper_preset, smoke_preset
from .metrics import MetricsSink, read_metrics
from .replay import NotReady, ReplayBuffer
from .train import StageError, Trainer, train

__all__ = ["MetricsSink", "NotReady", "ReplayBuffer", "RunConfig", "RunSettings", "StageError",
           "Trainer", "load_config", "paper_preset", "read_metrics", "smoke_preset", "train"]
