import numpy as np
import pytest
from hypothesis import settings

from cellpr.boxes import BoundingBox
from cellpr.encoder import TrainConfig, pretrain_extractor
from cellpr.synth import SceneSpec, generate_scenes

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_box(rng, width=100.0, height=100.0, min_side=0.0):
    x = np.sort(rng.uniform(0, width, 2))
    y = np.sort(rng.uniform(0, height, 2))
    x[1] = max(x[1], min(x[0] + min_side, width))
    y[1] = max(y[1], min(y[0] + min_side, height))
    return BoundingBox(x[0], y[0], x[1], y[1])


@pytest.fixture(scope="session")
def scenes():
    """A small fixed set of default synthetic scenes."""
    return generate_scenes(SceneSpec(), 12, seed=7)


@pytest.fixture(scope="session")
def small_encoder_config():
    return TrainConfig(epochs=12, batch_size=16, batches_per_epoch=4, hidden=(64, 32), embed_dim=16,
                       patch_size=32, seed=3)


@pytest.fixture(scope="session")
def extractor(scenes, small_encoder_config):
    return pretrain_extractor(scenes, 2, small_encoder_config)[0]


ACCEPTANCE_LINES: list[str] = []   # one line per acceptance criterion, filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
