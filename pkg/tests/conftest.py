import pytest

from fedsim.config import DatasetConfig, SimConfig


@pytest.fixture
def tiny_config():
    """Smallest useful simulation: fast enough for per-test runs."""

    def make(**overrides) -> SimConfig:
        settings = dict(
            workers=3,
            rounds=2,
            epochs_per_round=2,
            top_k=2,
            reward=100,
            collateral=10,
            seed=7,
            dataset=DatasetConfig(n=300, d=16, classes=4, spread=0.3),
            holdout_n=100,
            encrypt=False,
        )
        settings.update(overrides)
        return SimConfig(**settings)

    return make
