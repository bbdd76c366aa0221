"""Shared fixtures: micro-scale encoders and tasks sized for fast tests."""
import pytest

from latentloop.encoder import EncoderConfig, init_encoder_weights
from latentloop.gradcheck import MICRO_ENCODER
from latentloop.refinement import RefineConfig
from latentloop.tasks import SyntheticTaskSpec, generate_task, split_base_novel


@pytest.fixture(scope="session")
def micro_cfg() -> EncoderConfig:
    return MICRO_ENCODER


@pytest.fixture(scope="session")
def micro_frozen(micro_cfg):
    """Random frozen towers; identity and caching tests need no pretraining."""
    weights = init_encoder_weights(micro_cfg, seed=11)
    weights.freeze()
    return weights


@pytest.fixture(scope="session")
def micro_task(micro_cfg):
    spec = SyntheticTaskSpec(n_classes=6, shots=3, queries_per_class=2, seed=5)
    return split_base_novel(generate_task(spec, micro_cfg))


@pytest.fixture()
def micro_refine() -> RefineConfig:
    return RefineConfig(injection_depths=(2,), k_steps=2)
