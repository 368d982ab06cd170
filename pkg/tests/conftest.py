import numpy as np
import pytest
import torch

from distfsar.config import Config
from distfsar.data import SyntheticSpec, generate_synthetic

torch.set_num_threads(1)  # bit-stable reductions for the determinism checks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Desk-scale shapes small enough for loop oracles and gradient checks."""
    cfg = Config()
    cfg.encoder.frames = 3
    cfg.encoder.patches = 4
    cfg.encoder.feature_dim = 8
    cfg.skc.num_prototypes = 2
    cfg.train.way = 2
    cfg.train.train_queries = 2
    cfg.train.eval_queries = 2
    return cfg.validate()


@pytest.fixture
def default_config():
    return Config().validate()


@pytest.fixture(scope="session")
def synthetic_pair():
    """The shipped 10-class synthetic dataset with its fixture knowledge base."""
    cfg = Config()
    dataset, kb = generate_synthetic(SyntheticSpec(), seed=1, cfg=cfg)
    return dataset, kb, cfg
