"""Synthetic segmentation datasets and the image, label and palette file formats they use.

A dataset directory holds ``images/NNNN.ppm`` (binary RGB), ``labels/NNNN.pgm`` (binary 8-bit class
ids, 255 = ignore) and ``meta.json``.
"""


from __future__ import annotations

from typing import Iterator, List, Optional, Sequence, Tuple, Union
from dataclasses import dataclass, field
from pathlib import Path
import json
import logging
import re

import numpy as np
from skimage import draw

from .exceptions import ConfigError, FormatError
from .utils import atomicOutput, dataclassFromDict, dataclassToDict, readFileBytes, sha256Hex


logger = logging.getLogger(__name__)


#: Label value of pixels that carry no class.
IGNORE_LABEL = 255

#: Class ids of the synthetic shapes.
BACKGROUND, DISK, RECTANGLE, TRIANGLE, RING = range(5)
CLASS_NAMES = ("background", "disk", "rectangle", "triangle", "ring")

#: RGB color of each class.
DEFAULT_PALETTE: Tuple[Tuple[int, int, int], ...] = (
    (40, 44, 52),
    (220, 60, 50),
    (60, 170, 80),
    (70, 110, 220),
    (235, 190, 40),
)

#: Shapes with a radius below this many pixels count as small instances.
SMALL_RADIUS = 6

IMAGES_DIR = "images"
LABELS_DIR = "labels"
META_FILE  = "meta.json"


@dataclass
class Sample:
    """One training example: a ``(3, H, W)`` float32 image in [0, 1] and ``(H, W)`` uint8 labels"""
    image:  np.ndarray
    labels: np.ndarray


@dataclass
class SynthSpec:
    """Parameters of a synthetic dataset. Field names are the keys of the ``synth`` section."""
    num_classes:    int   = 5
    image_size:     int   = 128
    count:          int   = 100
    min_shapes:     int   = 2
    max_shapes:     int   = 6
    max_radius:     int   = 28
    small_fraction: float = 0.3
    noise:          float = 0.04
    seed:           int   = 0

    @staticmethod
    def fromDict(data: dict) -> SynthSpec:
        spec = dataclassFromDict(SynthSpec, data, "synth")
        spec.validate()
        return spec

    def toDict(self) -> dict:
        return dataclassToDict(self)

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must lie in [2, {len(CLASS_NAMES)}], got {self.num_classes}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be at least 16, got {self.image_size}")
        if self.count < 1:
            raise ConfigError(f"count must be positive, got {self.count}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(f"Need 1 <= min_shapes <= max_shapes, got {self.min_shapes} and {self.max_shapes}")
        if not SMALL_RADIUS < self.max_radius < self.image_size // 2:
            raise ConfigError(f"max_radius must lie in ({SMALL_RADIUS}, {self.image_size // 2}), got {self.max_radius}")
        if not 0 <= self.small_fraction <= 1:
            raise ConfigError(f"small_fraction must lie in [0, 1], got {self.small_fraction}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")


# ==================================================================================================
# Generation
# ==================================================================================================


def _shapeMask(kind: int, center: Tuple[int, int], radius: int, size: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    cy, cx = center
    if kind == DISK:
        mask[draw.disk((cy, cx), radius, shape=mask.shape)] = True
    elif kind == RECTANGLE:
        halfH = radius
        halfW = int(rng.integers(max(2, radius // 2), radius + 1))
        rr, cc = draw.rectangle((cy - halfH, cx - halfW), (cy + halfH, cx + halfW), shape=mask.shape)
        mask[rr, cc] = True
    elif kind == TRIANGLE:
        angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
        mask[draw.polygon(cy + radius * np.sin(angles), cx + radius * np.cos(angles), shape=mask.shape)] = True
    elif kind == RING:
        mask[draw.disk((cy, cx), radius, shape=mask.shape)] = True
        mask[draw.disk((cy, cx), max(1, radius // 2), shape=mask.shape)] = False
    else:
        raise ValueError(f"Unknown shape class {kind}")
    return mask


def generateSample(spec: SynthSpec, index: int, palette: Sequence[Tuple[int, int, int]] = DEFAULT_PALETTE) -> Tuple[np.ndarray, np.ndarray]:
    """Draws image ``index`` of the dataset described by ``spec``.\n
    Returns the quantized ``(H, W, 3)`` uint8 image and the ``(H, W)`` uint8 label map. Every image
    uses its own ``numpy.random.default_rng([seed, index])`` stream (PCG64), so images can be
    generated in any order."""
    rng  = np.random.default_rng([spec.seed, index])
    size = spec.image_size

    ramp  = np.linspace(-0.06, 0.06, size)
    tilt  = rng.uniform(-1, 1, 2)
    shade = tilt[0] * ramp[:, None] + tilt[1] * ramp[None, :]
    image = np.asarray(palette[BACKGROUND], dtype=np.float64)[None, None, :] / 255 + shade[:, :, None]
    labels = np.zeros((size, size), dtype=np.uint8)

    for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
        kind = int(rng.integers(1, spec.num_classes))
        if rng.uniform() < spec.small_fraction:
            radius = int(rng.integers(4 if kind == RING else 3, SMALL_RADIUS))
        else:
            radius = int(rng.integers(SMALL_RADIUS, spec.max_radius + 1))
        center = (int(rng.integers(0, size)), int(rng.integers(0, size)))
        mask = _shapeMask(kind, center, radius, size, rng)
        color = np.asarray(palette[kind], dtype=np.float64) / 255 + rng.uniform(-0.08, 0.08, 3)
        image[mask] = color
        labels[mask] = kind

    image += rng.normal(0, spec.noise, image.shape)
    quantized = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    return quantized, labels


@dataclass
class DatasetMeta:
    num_classes:  int
    image_size:   int
    count:        int
    seed:         int
    mean_pixel:   List[float]
    palette:      List[List[int]]
    ignore_label: int = IGNORE_LABEL
    class_names:  List[str] = field(default_factory=list)


def generateSynthetic(spec: SynthSpec, outDir: Union[Path, str], count: Optional[int] = None) -> DatasetMeta:
    """Writes ``count`` (default ``spec.count``) synthetic images, their labels and ``meta.json``
    to ``outDir``"""
    spec.validate()
    count = spec.count if count is None else count
    if count < 1:
        raise ConfigError(f"count must be positive, got {count}")
    outDir = Path(outDir)
    (outDir / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    (outDir / LABELS_DIR).mkdir(parents=True, exist_ok=True)

    pixelSum = np.zeros(3, dtype=np.float64)
    for index in range(count):
        image, labels = generateSample(spec, index)
        writePpm(outDir / IMAGES_DIR / f"{index:04d}.ppm", image)
        writePgm(outDir / LABELS_DIR / f"{index:04d}.pgm", labels)
        pixelSum += image.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        if (index + 1) % 100 == 0:
            logger.info("Generated %i/%i images", index + 1, count)

    meta = DatasetMeta(
        num_classes  = spec.num_classes,
        image_size   = spec.image_size,
        count        = count,
        seed         = spec.seed,
        mean_pixel   = [float(v) for v in pixelSum / (count * spec.image_size ** 2 * 255)],
        palette      = [list(color) for color in DEFAULT_PALETTE[:spec.num_classes]],
        class_names  = list(CLASS_NAMES[:spec.num_classes]),
    )
    with atomicOutput(outDir / META_FILE) as tempPath:
        tempPath.write_text(json.dumps(dataclassToDict(meta), sort_keys=True, indent=2) + "\n")
    logger.info("Wrote %i synthetic images to %s", count, outDir)
    return meta


# ==================================================================================================
# Netpbm files
# ==================================================================================================


_NETPBM_HEADER = re.compile(rb"\A(P[56])(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def _decodeNetpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    match = _NETPBM_HEADER.match(data)
    if match is None:
        raise FormatError("Malformed netpbm header")
    if match.group(1) != magic:
        raise FormatError(f"Expected a {magic.decode()} file, got {match.group(1).decode()}")
    width, height, maxval = (int(match.group(i)) for i in (2, 3, 4))
    if maxval != 255:
        raise FormatError(f"Only 8-bit netpbm files are supported, got maxval {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"Invalid netpbm size {width}x{height}")
    payload = data[match.end():]
    expected = width * height * channels
    if len(payload) != expected:
        raise FormatError(f"Netpbm payload must be {expected} bytes, got {len(payload)}")
    array = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return array if channels == 3 else array[:, :, 0]


def _encodeNetpbm(array: np.ndarray, magic: bytes) -> bytes:
    height, width = array.shape[:2]
    return magic + f"\n{width} {height}\n255\n".encode() + np.ascontiguousarray(array, dtype=np.uint8).tobytes()


def _checkUint8(array: np.ndarray, shape: str) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError(f"Expected a uint8 {shape} array, got {array.dtype}")
    return array


def readPpm(filePath: Union[Path, str]) -> np.ndarray:
    """Reads a binary PPM (P6) file into an ``(H, W, 3)`` uint8 array"""
    return _decodeNetpbm(readFileBytes(filePath), b"P6", 3)


def writePpm(filePath: Union[Path, str], image: np.ndarray) -> None:
    image = _checkUint8(image, "(H, W, 3)")
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM images must have shape (H, W, 3), got {image.shape}")
    with atomicOutput(filePath) as tempPath:
        tempPath.write_bytes(_encodeNetpbm(image, b"P6"))


def readPgm(filePath: Union[Path, str]) -> np.ndarray:
    """Reads a binary PGM (P5) file into an ``(H, W)`` uint8 array"""
    return _decodeNetpbm(readFileBytes(filePath), b"P5", 1)


def writePgm(filePath: Union[Path, str], labels: np.ndarray) -> None:
    labels = _checkUint8(labels, "(H, W)")
    if labels.ndim != 2:
        raise FormatError(f"PGM images must have shape (H, W), got {labels.shape}")
    with atomicOutput(filePath) as tempPath:
        tempPath.write_bytes(_encodeNetpbm(labels, b"P5"))


def colorize(prediction: np.ndarray, palette: Sequence[Sequence[int]] = DEFAULT_PALETTE) -> np.ndarray:
    """Maps class ids to palette colors; the ignore label renders black"""
    prediction = np.asarray(prediction)
    lookup = np.zeros((256, 3), dtype=np.uint8)
    lookup[:len(palette)] = np.asarray(palette, dtype=np.uint8)
    invalid = (prediction >= len(palette)) & (prediction != IGNORE_LABEL) | (prediction < 0)
    if np.any(invalid):
        raise FormatError(f"Class ids {sorted(set(prediction[invalid].tolist()))} have no palette entry")
    return lookup[prediction.astype(np.int64)]


# ==================================================================================================
# Datasets
# ==================================================================================================


class SegmentationDataset:
    """A dataset directory written by :func:`generateSynthetic`.\n
    Samples are read on access; images are returned as float32 ``(3, H, W)`` arrays in [0, 1]."""

    def __init__(self, root: Union[Path, str]) -> None:
        self.root = Path(root)
        try:
            meta = json.loads((self.root / META_FILE).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"Could not read dataset metadata in {self.root}") from e
        self.meta = dataclassFromDict(DatasetMeta, meta, META_FILE)
        self.imagePaths = sorted((self.root / IMAGES_DIR).glob("*.ppm"))
        self.labelPaths = sorted((self.root / LABELS_DIR).glob("*.pgm"))
        if [p.stem for p in self.imagePaths] != [p.stem for p in self.labelPaths]:
            raise FormatError(f"Images and labels in {self.root} do not match")
        if not self.imagePaths:
            raise FormatError(f"No images in {self.root / IMAGES_DIR}")

    @property
    def numClasses(self) -> int:
        return self.meta.num_classes

    @property
    def meanPixel(self) -> np.ndarray:
        return np.asarray(self.meta.mean_pixel, dtype=np.float32)

    @property
    def palette(self) -> List[List[int]]:
        return self.meta.palette

    @property
    def ignoreLabel(self) -> int:
        return self.meta.ignore_label

    def __len__(self) -> int:
        return len(self.imagePaths)

    def __getitem__(self, index: int) -> Sample:
        image  = readPpm(self.imagePaths[index])
        labels = readPgm(self.labelPaths[index])
        if image.shape[:2] != labels.shape:
            raise FormatError(f"Image {self.imagePaths[index]} and its labels differ in size")
        invalid = (labels >= self.numClasses) & (labels != self.ignoreLabel)
        if np.any(invalid):
            raise FormatError(f"Labels {self.labelPaths[index]} contain out-of-range values")
        return Sample(image.transpose(2, 0, 1).astype(np.float32) / 255, labels)

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def checksum(self) -> str:
        """SHA-256 over every file of the dataset, in a fixed order"""
        paths = [self.root / META_FILE, *self.imagePaths, *self.labelPaths]
        return sha256Hex(b"".join(p.name.encode() + readFileBytes(p) for p in paths))


def loadImage(filePath: Union[Path, str]) -> np.ndarray:
    """Reads a PPM file as a float32 ``(3, H, W)`` image in [0, 1]"""
    return readPpm(filePath).transpose(2, 0, 1).astype(np.float32) / 255
