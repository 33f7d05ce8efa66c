import pytest

from una_lab.config import TrainConfig
from una_lab.policy import TabularPolicy, Vocab


@pytest.fixture
def vocab():
    return Vocab(4, 1)


@pytest.fixture
def uniform_ref(vocab):
    return TabularPolicy.uniform(vocab, 4, frozen=True)


def make_config(**overrides) -> TrainConfig:
    """TrainConfig with quiet defaults for tests; ``grad_norm_cap`` off unless given."""
    values = {"grad_norm_cap": None, "eval_every": 100, "progress": False}
    values.update(overrides)
    return TrainConfig(**values).validate()
