"""Shared fixtures: a small synthetic split and models trained on it.

The micro spec keeps the 5 encoder stages the validator requires, still
ending at 256 filters, but shrinks the early stages and the latent so a
training epoch takes a couple of seconds.
"""

import pytest

from anomavae import (
    ModelSpec,
    SynthConfig,
    TrainingConfig,
    generate_synthetic,
    train,
)

TINY_SPEC = ModelSpec(latent_dim=64, encoder_filters=(8, 8, 16, 16, 256))
TINY_CAE_SPEC = ModelSpec(
    kind="cae", latent_dim=64, encoder_filters=(8, 8, 16, 16, 256)
)
TINY_SYNTH = SynthConfig(
    train_count=16, val_count=6, test_normal_count=4, test_abnormal_count=4
)


def tiny_training_config(**overrides) -> TrainingConfig:
    base = dict(epochs=2, batch_size=8, alpha=0.03, beta=3.0, seed=11)
    base.update(overrides)
    return TrainingConfig(**base)


@pytest.fixture(scope="session")
def tiny_split():
    return generate_synthetic(TINY_SYNTH, seed=5)


@pytest.fixture(scope="session")
def trained_tiny(tiny_split):
    return train(tiny_split, TINY_SPEC, tiny_training_config())


@pytest.fixture(scope="session")
def trained_tiny_cae(tiny_split):
    return train(tiny_split, TINY_CAE_SPEC, tiny_training_config(beta=0.0))
