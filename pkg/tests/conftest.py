import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from stnp.anp import ModelConfig
from stnp.synthworld import WorldConfig, sample_footprints

TINY = ModelConfig(embed_dim=4, feature_dim=16, repr_dim=16, latent_dim=8, decoder_hidden=16,
                   conv_channels=4, heads=4)
SMALL = ModelConfig(embed_dim=8, feature_dim=32, repr_dim=32, latent_dim=16, decoder_hidden=32,
                    conv_channels=8, heads=4)


def small_world(**changes) -> WorldConfig:
    base = dict(tiles=(3, 3), years=(2019, 2020, 2021), footprints_per_tile_year=60,
                embed_dim=8, seed=3)
    base.update(changes)
    return WorldConfig(**base)


@pytest.fixture(scope="session")
def small_sample():
    return sample_footprints(small_world())


@pytest.fixture(scope="session")
def smoke_tile():
    """One tile, one year, about 200 footprints."""
    cfg = WorldConfig(tiles=(1, 1), years=(2019,), footprints_per_tile_year=200, embed_dim=8,
                      seed=5, events=())
    return sample_footprints(cfg).footprints


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance verdict; printed again in the terminal summary."""
    ACCEPTANCE[number] = (passed, detail)
    print(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} {detail}")
