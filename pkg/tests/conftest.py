from pathlib import Path

import numpy as np
import pytest

from ldnkit.dataio import SegmentationDataset, SynthSpec, generateSynthetic
from ldnkit.nets import ArchSpec, LadderModel, buildLadderModel, initParameters


CONFIGS_DIR = Path(__file__).resolve().parent.parent / "configs"


def toySpec(**overrides) -> ArchSpec:
    """Small dense ladder model: k=8, units [2, 3, 4, 3], 5 classes"""
    fields = dict(
        backbone="toy", units=[2, 3, 4, 3], growth_rate=8, downsample_factor=32, output_stride=4,
        upsample_width=32, num_classes=5,
    )
    fields.update(overrides)
    return ArchSpec(**fields)


def toyModel(dtype=np.float32, seed: int = 0, **overrides) -> LadderModel:
    model = buildLadderModel(toySpec(**overrides), dtype)
    initParameters(model.network, seed)
    return model


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def model() -> LadderModel:
    return toyModel()


@pytest.fixture
def dataset(tmp_path: Path) -> SegmentationDataset:
    generateSynthetic(SynthSpec(image_size=64, count=12, max_radius=20, seed=3), tmp_path / "data")
    return SegmentationDataset(tmp_path / "data")
