import numpy as np
import pytest

from gaitdis.mocap import SynthConfig, synth_generate
from gaitdis.model import ModelConfig
from gaitdis.preprocessing import preprocess_pipeline


def tiny_model_config(**overrides) -> ModelConfig:
    """A model small enough for finite-difference checks (45 x 16 input)."""
    base = dict(length=16, encoder=((6, 3, 2), (8, 3, 2)), subject_dim=3, affect_dim=2, dropout=0.1)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_synth():
    """2 subjects x 4 affects x 4 cycles: quick end-to-end fixture."""
    cfg = SynthConfig(n_subjects=2, cycles_per_pair=4, rng_seed=3)
    seqs, manifest, gen = synth_generate(cfg)
    return cfg, seqs, manifest, gen


@pytest.fixture(scope="session")
def small_cycles(small_synth):
    return preprocess_pipeline(small_synth[1]).cycles


@pytest.fixture(scope="session")
def default_synth():
    seqs, manifest, gen = synth_generate(SynthConfig())
    return seqs, manifest, gen


@pytest.fixture(scope="session")
def default_cycles(default_synth):
    return preprocess_pipeline(default_synth[0]).cycles


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
