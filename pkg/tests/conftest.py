import numpy as np
import pytest

from mimo_d2d import Scenario, ScenarioConfig


@pytest.fixture(scope="session")
def small_scenario():
    """Two cells, two CUs each, two D2D pairs; cheap enough for oracles."""
    cfg = ScenarioConfig(num_cells=2, antennas_per_bs=24, cus_per_cell=2,
                         num_d2d_pairs=2, num_d2d_pilots=2, coherence_len=200,
                         area_side=600.0)
    return Scenario.build(cfg, seed=42)


@pytest.fixture(scope="session")
def default_scenario():
    """The reference 9-cell configuration."""
    return Scenario.build(ScenarioConfig(), seed=1)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
