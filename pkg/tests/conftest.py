import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from unissda.datagen import SyntheticConfig, make_benchmark  # noqa: E402
from unissda.train import TrainingData  # noqa: E402

OPEN_PARTIAL = {"common": 6, "source_private": 3, "target_private": 3}


@pytest.fixture(scope="session")
def small_open_partial():
    cfg = SyntheticConfig(samples_per_class_per_domain=40, seed=3)
    src, trg, ls = make_benchmark(cfg, "open_partial", OPEN_PARTIAL, k=3)
    return TrainingData.from_datasets(src, trg, ls)


@pytest.fixture(scope="session")
def small_closed():
    cfg = SyntheticConfig(samples_per_class_per_domain=40, seed=3)
    src, trg, ls = make_benchmark(cfg, "closed", k=3)
    return TrainingData.from_datasets(src, trg, ls)
