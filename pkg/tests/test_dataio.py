import json

import numpy as np
import pytest

from ldnkit.dataio import (
    DEFAULT_PALETTE,
    IGNORE_LABEL,
    SegmentationDataset,
    SynthSpec,
    colorize,
    generateSample,
    generateSynthetic,
    loadImage,
    readPgm,
    readPpm,
    writePgm,
    writePpm,
)
from ldnkit.exceptions import ConfigError, FormatError


# ==================================================================================================
# Synthetic data
# ==================================================================================================


def test_samples_are_reproducible():
    spec = SynthSpec(image_size=64, max_radius=20, seed=7)
    first, second = generateSample(spec, 3), generateSample(spec, 3)
    assert np.array_equal(first[0], second[0])
    assert np.array_equal(first[1], second[1])
    other = generateSample(spec, 4)
    assert not np.array_equal(first[1], other[1]) or not np.array_equal(first[0], other[0])


def test_sample_contents():
    spec = SynthSpec(image_size=64, max_radius=20, num_classes=3, seed=1)
    image, labels = generateSample(spec, 0)
    assert image.shape == (64, 64, 3) and image.dtype == np.uint8
    assert labels.shape == (64, 64) and labels.dtype == np.uint8
    assert set(np.unique(labels).tolist()) <= {0, 1, 2}


def test_generated_dataset(dataset):
    assert len(dataset) == 12
    assert dataset.numClasses == 5
    assert dataset.ignoreLabel == IGNORE_LABEL
    sample = dataset[0]
    assert sample.image.shape == (3, 64, 64) and sample.image.dtype == np.float32
    assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
    assert sample.labels.shape == (64, 64)
    assert np.all(sample.labels < 5)
    means = np.mean([s.image.mean(axis=(1, 2)) for s in dataset], axis=0)
    np.testing.assert_allclose(dataset.meanPixel, means, atol=1e-3)


def test_generation_is_deterministic(tmp_path):
    spec = SynthSpec(image_size=32, count=3, max_radius=10, seed=2)
    generateSynthetic(spec, tmp_path / "a")
    generateSynthetic(spec, tmp_path / "b")
    assert SegmentationDataset(tmp_path / "a").checksum() == SegmentationDataset(tmp_path / "b").checksum()


def test_generation_writes_metadata(tmp_path):
    meta = generateSynthetic(SynthSpec(image_size=32, count=2, max_radius=10, num_classes=4), tmp_path)
    written = json.loads((tmp_path / "meta.json").read_text())
    assert written["count"] == 2
    assert written["class_names"] == ["background", "disk", "rectangle", "triangle"]
    assert len(written["palette"]) == 4
    assert written["mean_pixel"] == pytest.approx(meta.mean_pixel)


@pytest.mark.parametrize(
    "fields",
    [
        {"num_classes": 1},
        {"num_classes": 6},
        {"image_size": 8},
        {"count": 0},
        {"min_shapes": 3, "max_shapes": 2},
        {"max_radius": 64},
        {"max_radius": 6},
        {"small_fraction": 1.5},
        {"noise": -0.1},
    ],
)
def test_invalid_synth_specs(fields):
    with pytest.raises(ConfigError):
        SynthSpec(**fields).validate()


def test_synth_spec_from_dict():
    assert SynthSpec.fromDict({"count": 5}).count == 5
    with pytest.raises(ConfigError):
        SynthSpec.fromDict({"images": 5})


# ==================================================================================================
# Files
# ==================================================================================================


def test_netpbm_files(tmp_path, rng):
    image = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    labels = rng.integers(0, 5, (5, 7), dtype=np.uint8)
    writePpm(tmp_path / "image.ppm", image)
    writePgm(tmp_path / "labels.pgm", labels)
    assert np.array_equal(readPpm(tmp_path / "image.ppm"), image)
    assert np.array_equal(readPgm(tmp_path / "labels.pgm"), labels)
    assert (tmp_path / "image.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    loaded = loadImage(tmp_path / "image.ppm")
    assert loaded.shape == (3, 5, 7)
    assert loaded[0, 0, 0] == pytest.approx(image[0, 0, 0] / 255)


def test_netpbm_comments_are_skipped(tmp_path):
    (tmp_path / "labels.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert readPgm(tmp_path / "labels.pgm").tolist() == [[1, 2]]


@pytest.mark.parametrize(
    "data",
    [
        b"P6\n2 1\n255\n\x00\x00\x00\x00\x00\x00",
        b"P5\n2 1\n65535\n\x00\x00\x00\x00",
        b"P5\n2 1\n255\n\x00",
        b"P2\n2 1\n255\n0 0",
    ],
)
def test_malformed_netpbm(tmp_path, data):
    (tmp_path / "labels.pgm").write_bytes(data)
    with pytest.raises(FormatError):
        readPgm(tmp_path / "labels.pgm")


def test_netpbm_writers_check_their_input(tmp_path):
    with pytest.raises(FormatError):
        writePpm(tmp_path / "image.ppm", np.zeros((2, 2, 3), dtype=np.float32))
    with pytest.raises(FormatError):
        writePgm(tmp_path / "labels.pgm", np.zeros((2, 2, 3), dtype=np.uint8))


def test_dataset_rejects_out_of_range_labels(dataset):
    writePgm(dataset.labelPaths[0], np.full((64, 64), 9, dtype=np.uint8))
    with pytest.raises(FormatError):
        dataset[0]
    writePgm(dataset.labelPaths[0], np.full((64, 64), IGNORE_LABEL, dtype=np.uint8))
    assert np.all(dataset[0].labels == IGNORE_LABEL)


def test_dataset_needs_metadata(tmp_path):
    with pytest.raises(FormatError):
        SegmentationDataset(tmp_path)


def test_colorize():
    colors = colorize(np.array([[0, 1], [2, IGNORE_LABEL]], dtype=np.uint8))
    assert colors.shape == (2, 2, 3)
    assert tuple(colors[0, 1]) == DEFAULT_PALETTE[1]
    assert tuple(colors[1, 1]) == (0, 0, 0)
    with pytest.raises(FormatError):
        colorize(np.array([[7]], dtype=np.uint8))
