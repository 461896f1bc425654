"""Grounded video-language pre-training at desk scale."""

__version__ = "0.1.0"

from .config import AugmentConfig, LossConfig, ModelConfig, TrainConfig  # noqa: F401
from .synthcorpus import CorpusSpec, generate_corpus, load_corpus, save_corpus  # noqa: F401
