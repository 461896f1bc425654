import numpy as np
import pytest
import torch

from gvilm.config import AugmentConfig, LossConfig, ModelConfig, TrainConfig
from gvilm.synthcorpus import CorpusSpec, generate_corpus

torch.set_num_threads(1)


TINY_MODEL = ModelConfig(
    layers=2,
    dim=32,
    groups_m=4,
    grouping_layers=(),
    common_dim=16,
    text_layers=1,
    patch=(2, 8, 8),
    nouns_k=2,
)


@pytest.fixture(scope="session")
def tiny_spec() -> CorpusSpec:
    return CorpusSpec(size=14, val_size=2, test_size=4, twoscene_frac=0.5)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    return generate_corpus(tiny_spec, seed=11)


@pytest.fixture(scope="session")
def tiny_config() -> TrainConfig:
    return TrainConfig(
        steps=6,
        batch=4,
        lr=0.05,
        warmup=0.2,
        seed=3,
        checkpoint_every=3,
        model=TINY_MODEL,
        aug=AugmentConfig(window_size_t=2),
        loss=LossConfig(),
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
