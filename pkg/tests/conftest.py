import json
from pathlib import Path

import numpy as np
import pytest

from sammix import dataio
from sammix.classifier import ClassifierConfig
from sammix.segnet import SegnetConfig
from sammix.trainer import TrainConfig

GOLDEN_DIR = Path(__file__).parent / "goldens"

# canonical phantom corpus parameters shared by unit and golden tests
PHANTOM_N_VOLUMES = 8
PHANTOM_SEED = 123


def load_golden(name: str):
    return json.loads((GOLDEN_DIR / name).read_text())


@pytest.fixture(scope="session")
def phantom_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("phantoms")
    dataio.generate_phantoms(PHANTOM_N_VOLUMES, PHANTOM_SEED, root, keep_raw=True)
    return root


@pytest.fixture(scope="session")
def phantom_splits(phantom_root) -> dict[str, dataio.Dataset]:
    return {name: dataio.load_dataset(phantom_root, name) for name in ("train", "val", "test")}


def desk_config(**overrides) -> TrainConfig:
    """Small-but-real config for 64 px phantoms; tests override fields as needed."""
    base = dict(
        mode="sam_mix_e2e",
        n_labeled=5,
        epochs=2,
        batch_size=16,
        seed=0,
        classifier=ClassifierConfig(),
        segnet=SegnetConfig(patch_size=8),
    )
    base.update(overrides)
    return TrainConfig(**base)
