"""Training and evaluation of ladder models.

Provides the AMSGrad optimizer with a cosine learning-rate schedule, the composite loss over the
final and auxiliary heads with soft window targets, data augmentation, confusion-matrix mIoU,
exact recomputation of batchnorm statistics, multi-scale inference, the :class:`.Trainer` loop and
checkpoint bundles.
"""


from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
from dataclasses import dataclass, field
from concurrent import futures
from math import cos, pi
from pathlib import Path
import csv
import io
import json
import logging
import os
import shutil
import tempfile

import numpy as np
from more_itertools import chunked
from scipy.special import softmax

from . import kernels
from .autograd import CheckpointPolicy, Network, backward, runForward, traceForward
from .dataio import IGNORE_LABEL, SegmentationDataset
from .exceptions import ConfigError, FormatError, LdnError, MetricError, NonFiniteGradientError, ShapeError, StatisticsError
from .ldnt_tools import parseTensorFile, saveTensorFile
from .nets import ArchSpec, LadderModel, buildLadderModel
from .tensor import Tensor, TensorLike, asTensor
from .utils import atomicOutput, dataclassFromDict, dataclassToDict, readFileBytes, roundHalfUp, sha256Hex


logger = logging.getLogger(__name__)


#: Augmentation levels, from none to all.
AUGMENTATIONS = ("none", "flip", "flip/crop", "flip/crop/scale")

HISTORY_HEADER = ("epoch", "lr", "train_loss", "val_miou")

MANIFEST_FILE = "manifest.json"
MANIFEST_FORMAT = 1


@dataclass
class TrainConfig:
    """Training hyperparameters. Field names are the keys of the ``train`` section."""
    base_lr:               float       = 4e-4
    epochs:                int         = 30
    batch:                 int         = 8
    crop:                  int         = 448
    scale_range:           List[float] = field(default_factory=lambda: [0.5, 2.0])
    flip_prob:             float       = 0.5
    final_weight:          float       = 0.6
    aux_weight:            float       = 0.4
    pretrained_lr_divisor: float       = 4.0
    pretrained_backbone:   bool        = False
    seed:                  int         = 0
    beta1:                 float       = 0.9
    beta2:                 float       = 0.999
    eps:                   float       = 1e-8
    weight_decay:          float       = 0.0
    augmentation:          str         = "flip/crop/scale"
    aux_loss:              bool        = True
    checkpoint_policy:     str         = "none"
    recompute_bn:          bool        = True
    val_fraction:          float       = 0.1
    ignore_label:          int         = IGNORE_LABEL
    prefetch:              bool        = True
    eval_scales:           List[float] = field(default_factory=lambda: [1.0])
    eval_flips:            bool        = False

    @staticmethod
    def fromDict(data: dict) -> TrainConfig:
        config = dataclassFromDict(TrainConfig, data, "train")
        config.validate()
        return config

    def toDict(self) -> dict:
        return dataclassToDict(self)

    def validate(self) -> None:
        if abs(self.final_weight + self.aux_weight - 1) > 1e-9:
            raise ConfigError(f"final_weight and aux_weight must sum to 1, got {self.final_weight} + {self.aux_weight}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs < 1 or self.batch < 1 or self.crop < 1:
            raise ConfigError("epochs, batch and crop must be positive")
        if len(self.scale_range) != 2 or not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ConfigError(f"scale_range must be [low, high] with 0 < low <= high, got {self.scale_range}")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"Unknown augmentation {self.augmentation!r}; expected one of {', '.join(AUGMENTATIONS)}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.pretrained_lr_divisor <= 0 or self.weight_decay < 0:
            raise ConfigError("pretrained_lr_divisor must be positive and weight_decay non-negative")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("Need 0 <= beta1, beta2 < 1 and eps > 0")
        if not self.eval_scales or any(s <= 0 for s in self.eval_scales):
            raise ConfigError(f"eval_scales must list positive factors, got {self.eval_scales}")
        CheckpointPolicy.parse(self.checkpoint_policy)


# ==================================================================================================
# Optimization
# ==================================================================================================


@dataclass
class OptimState:
    """AMSGrad moments of every parameter, in double precision.\n
    ``maxV`` is the running elementwise maximum of ``v`` and never decreases."""
    m:     Dict[str, np.ndarray] = field(default_factory=dict)
    v:     Dict[str, np.ndarray] = field(default_factory=dict)
    maxV:  Dict[str, np.ndarray] = field(default_factory=dict)
    step:  int                   = 0
    beta1: float                 = 0.9
    beta2: float                 = 0.999
    eps:   float                 = 1e-8
    weightDecay:      float            = 0.0
    groupMultipliers: Dict[str, float] = field(default_factory=lambda: {"backbone": 1.0, "head": 1.0})

    @staticmethod
    def fromConfig(config: TrainConfig) -> OptimState:
        backbone = 1 / config.pretrained_lr_divisor if config.pretrained_backbone else 1.0
        return OptimState(
            beta1            = config.beta1,
            beta2            = config.beta2,
            eps              = config.eps,
            weightDecay      = config.weight_decay,
            groupMultipliers = {"backbone": backbone, "head": 1.0},
        )


def amsgradStep(network: Network, grads: Dict[str, TensorLike], state: OptimState, lr: float) -> None:
    """Applies one AMSGrad update with bias correction to every parameter that has a gradient.\n
    ``param -= lr/(1-beta1^t) * m / (sqrt(maxV)/sqrt(1-beta2^t) + eps)``, with the learning rate
    scaled by the parameter group's multiplier. If any gradient is not finite, nothing changes and
    a :class:`.NonFiniteGradientError` is raised."""
    arrays = {name: asTensor(g).data for name, g in grads.items()}
    for name, g in arrays.items():
        if name not in network.parameters:
            raise LdnError(f"Gradient for unknown parameter {name}")
        if not np.all(np.isfinite(g)):
            logger.warning("Rejected optimizer step %i: gradient of %s is not finite", state.step + 1, name)
            raise NonFiniteGradientError(f"Gradient of {name} contains NaN or infinity")

    state.step += 1
    correction1 = 1 - state.beta1 ** state.step
    correction2 = 1 - state.beta2 ** state.step
    for name, g in arrays.items():
        parameter = network.parameters[name]
        value = parameter.value
        g = g.astype(np.float64)
        if state.weightDecay:
            g = g + state.weightDecay * value
        if name not in state.m:
            state.m[name]    = np.zeros_like(g)
            state.v[name]    = np.zeros_like(g)
            state.maxV[name] = np.zeros_like(g)
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        maxV = state.maxV[name] = np.maximum(state.maxV[name], v)
        stepSize = lr * state.groupMultipliers.get(parameter.group, 1.0) / correction1
        update = stepSize * m / (np.sqrt(maxV) / np.sqrt(correction2) + state.eps)
        value -= update.astype(value.dtype)


def cosineLr(epoch: int, totalEpochs: int, base: float) -> float:
    """``base * (1 + cos(pi * epoch / totalEpochs)) / 2``"""
    if totalEpochs < 1 or not 0 <= epoch <= totalEpochs:
        raise ValueError(f"Epoch {epoch} lies outside [0, {totalEpochs}]")
    return base * 0.5 * (1 + cos(pi * epoch / totalEpochs))


# ==================================================================================================
# Losses
# ==================================================================================================


def _oneHot(labels: np.ndarray, numClasses: int, ignoreLabel: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"Label maps must have shape (N, H, W), got {labels.shape}")
    valid = labels != ignoreLabel
    if np.any(labels[valid] >= numClasses):
        raise ValueError(f"Labels must be below {numClasses} or equal to the ignore label {ignoreLabel}")
    return (labels[..., None] == np.arange(numClasses)) & valid[..., None]


def _normalize(counts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    totals = counts.sum(axis=-1)
    masked = totals == 0
    dist = counts / np.maximum(totals, 1)[..., None]
    return dist.transpose(0, 3, 1, 2).astype(np.float32), masked


def softTargets(labels: np.ndarray, window: int, numClasses: int, ignoreLabel: int = IGNORE_LABEL) -> Tuple[np.ndarray, np.ndarray]:
    """Class distributions of the ``window`` x ``window`` cells of ``labels`` (N, H, W).\n
    Returns the ``(N, C, H/window, W/window)`` distributions and a mask that is True where a cell
    holds only ignored pixels."""
    onehot = _oneHot(labels, numClasses, ignoreLabel)
    n, h, w, c = onehot.shape
    if h % window or w % window:
        raise ShapeError(f"Label size {h}x{w} is not divisible by the window {window}")
    counts = onehot.reshape(n, h // window, window, w // window, window, c).sum(axis=(2, 4), dtype=np.int64)
    return _normalize(counts)


def gridSoftTargets(labels: np.ndarray, rows: int, cols: int, numClasses: int, ignoreLabel: int = IGNORE_LABEL) -> Tuple[np.ndarray, np.ndarray]:
    """Like :func:`softTargets`, over the cells of a ``rows`` x ``cols`` pooling grid"""
    onehot = _oneHot(labels, numClasses, ignoreLabel).astype(np.int64)
    rowBounds = kernels.gridPartition(onehot.shape[1], rows)
    colBounds = kernels.gridPartition(onehot.shape[2], cols)
    counts = np.add.reduceat(np.add.reduceat(onehot, rowBounds[:-1], axis=1), colBounds[:-1], axis=2)
    return _normalize(counts)


@dataclass
class LossResult:
    """Composite loss and the gradients of ``total`` with respect to each output"""
    total:   float
    final:   float
    auxMean: Optional[float]
    grads:   Dict[str, Tensor]


def _scaled(grad: Tensor, weight: float) -> Tensor:
    return Tensor(grad.data * grad.dtype.type(weight))


def compositeLoss(
    outputs:     Dict[str, Tensor],
    labels:      np.ndarray,
    model:       LadderModel,
    finalWeight: float = 0.6,
    auxWeight:   float = 0.4,
    ignoreLabel: int   = IGNORE_LABEL,
) -> LossResult:
    """``finalWeight * CE(logits) + auxWeight * mean(CE(head))`` over the auxiliary heads present in
    ``outputs``, each against the soft targets of its own cells. Without auxiliary outputs the loss
    is the cross entropy of the logits alone."""
    numClasses = model.spec.num_classes
    targets, mask = softTargets(labels, model.spec.output_stride, numClasses, ignoreLabel)
    final = kernels.softmaxCrossEntropy(outputs["logits"], targets, mask)

    auxNames = [name for name in model.heads if name in outputs]
    if not auxNames:
        return LossResult(final.loss, final.loss, None, {"logits": final.grad})

    grads = {"logits": _scaled(final.grad, finalWeight)}
    auxLosses = []
    for name in auxNames:
        head, logits = model.heads[name], outputs[name]
        if head.kind == "window":
            targets, mask = softTargets(labels, head.stride, numClasses, ignoreLabel)
        else:
            targets, mask = gridSoftTargets(labels, *logits.shape[2:], numClasses, ignoreLabel)
        result = kernels.softmaxCrossEntropy(logits, targets, mask)
        auxLosses.append(result.loss)
        grads[name] = _scaled(result.grad, auxWeight / len(auxNames))
    auxMean = float(np.mean(auxLosses))
    return LossResult(finalWeight * final.loss + auxWeight * auxMean, final.loss, auxMean, grads)


# ==================================================================================================
# Augmentation
# ==================================================================================================


def _nearestIndices(inExtent: int, outExtent: int) -> np.ndarray:
    source = np.floor((np.arange(outExtent) + 0.5) * inExtent / outExtent).astype(np.int64)
    return np.minimum(source, inExtent - 1)


def resizeImage(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a ``(C, H, W)`` image with half-pixel centers"""
    if image.shape[1:] == (height, width):
        return image
    rows = kernels.interpolationMatrix(image.shape[1], height, image.dtype)
    cols = kernels.interpolationMatrix(image.shape[2], width, image.dtype)
    return np.matmul(np.matmul(rows, image), cols.T)


def resizeLabels(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of a ``(H, W)`` label map with half-pixel centers"""
    if labels.shape == (height, width):
        return labels
    return labels[np.ix_(_nearestIndices(labels.shape[0], height), _nearestIndices(labels.shape[1], width))]


def augment(
    image:     np.ndarray,
    labels:    np.ndarray,
    config:    TrainConfig,
    rng:       np.random.Generator,
    meanPixel: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip, rescaling and crop of a ``(3, H, W)`` image and its labels, as
    enabled by ``config.augmentation``.\n
    Crops reaching outside the rescaled image are filled with ``meanPixel`` and the ignore label."""
    level = config.augmentation
    if level == "none":
        return image, labels
    if rng.uniform() < config.flip_prob:
        image, labels = image[:, :, ::-1], labels[:, ::-1]
    if "scale" in level:
        scale = rng.uniform(*config.scale_range)
        height = max(1, roundHalfUp(image.shape[1] * scale))
        width  = max(1, roundHalfUp(image.shape[2] * scale))
        image, labels = resizeImage(image, height, width), resizeLabels(labels, height, width)
    if "crop" in level:
        size = config.crop
        fill = np.zeros(3, dtype=image.dtype) if meanPixel is None else np.asarray(meanPixel, dtype=image.dtype)
        height, width = max(size, image.shape[1]), max(size, image.shape[2])
        paddedImage  = np.broadcast_to(fill[:, None, None], (image.shape[0], height, width)).copy()
        paddedLabels = np.full((height, width), config.ignore_label, dtype=labels.dtype)
        paddedImage[:, :image.shape[1], :image.shape[2]] = image
        paddedLabels[:labels.shape[0], :labels.shape[1]] = labels
        top  = int(rng.integers(0, height - size + 1))
        left = int(rng.integers(0, width - size + 1))
        image  = paddedImage[:, top:top + size, left:left + size]
        labels = paddedLabels[top:top + size, left:left + size]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


# ==================================================================================================
# Metrics
# ==================================================================================================


class ConfusionMatrix:
    """Pixel counts of (true class, predicted class) pairs. Ignored pixels are never counted."""

    def __init__(self, numClasses: int, ignoreLabel: int = IGNORE_LABEL) -> None:
        self.numClasses  = numClasses
        self.ignoreLabel = ignoreLabel
        self.matrix = np.zeros((numClasses, numClasses), dtype=np.int64)

    def update(self, predictions: np.ndarray, labels: np.ndarray) -> None:
        predictions, labels = np.asarray(predictions, dtype=np.int64), np.asarray(labels, dtype=np.int64)
        if predictions.shape != labels.shape:
            raise ShapeError(f"Prediction shape {predictions.shape} does not match label shape {labels.shape}")
        valid = labels != self.ignoreLabel
        if np.any(labels[valid] >= self.numClasses) or np.any(predictions[valid] >= self.numClasses):
            raise ValueError(f"Class ids must be below {self.numClasses}")
        index = self.numClasses * labels[valid] + predictions[valid]
        self.matrix += np.bincount(index, minlength=self.numClasses ** 2).reshape(self.numClasses, self.numClasses)

    def miou(self) -> Tuple[float, np.ndarray]:
        return miou(self.matrix)


def miou(confusion: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean IoU over the classes present in the prediction or the ground truth.\n
    Returns the mean and the per-class IoU, which is NaN for absent classes."""
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.sum() == 0:
        raise MetricError("The confusion matrix is empty")
    truePositives = np.diag(confusion)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - truePositives
    present = union > 0
    perClass = np.full(confusion.shape[0], np.nan)
    perClass[present] = truePositives[present] / union[present]
    return float(perClass[present].mean()), perClass


# ==================================================================================================
# Batchnorm statistics and inference
# ==================================================================================================


def recomputeBnStats(network: Network, images: Iterable[TensorLike]) -> Network:
    """Replaces every running mean and variance with exact averages over ``images``.\n
    Runs all outputs once per batch in accumulate mode, so every batchnorm node sees the
    activations it sees during training."""
    previous = network.mode
    for buffers in network.buffers.values():
        buffers.resetAccumulator()
    outputs = list(dict.fromkeys([*network.trainingOutputs, network.inferenceOutput]))
    batches = 0
    network.mode = "accumulate"
    try:
        for batch in images:
            runForward(network, batch, outputs)
            batches += 1
    finally:
        network.mode = previous
    if batches == 0:
        raise StatisticsError("Cannot recompute batchnorm statistics over an empty dataset")
    for buffers in network.buffers.values():
        if buffers.count:
            buffers.finalize(network.dtype)
    logger.info("Recomputed batchnorm statistics over %i batch(es)", batches)
    return network


def _padTo(image: np.ndarray, divisor: int, fill: np.ndarray) -> np.ndarray:
    n, c, h, w = image.shape
    height, width = -(-h // divisor) * divisor, -(-w // divisor) * divisor
    if (height, width) == (h, w):
        return image
    padded = np.broadcast_to(fill[None, :, None, None], (n, c, height, width)).copy()
    padded[:, :, :h, :w] = image
    return padded


def multiScaleInfer(
    model:     LadderModel,
    images:    np.ndarray,
    scales:    Sequence[float]      = (0.5, 0.75, 1.0, 1.5, 2.0),
    flips:     bool                 = True,
    meanPixel: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Class probabilities of ``(N, 3, H, W)`` images, averaged over rescaled and mirrored copies.\n
    Each copy is padded with ``meanPixel`` to a multiple of the model's downsampling factor; the
    padding is cropped off the prediction, which is then resized back to ``H`` x ``W``."""
    network = model.network
    images = np.asarray(images, dtype=network.dtype)
    n, c, h, w = images.shape
    fill = np.zeros(c, dtype=network.dtype) if meanPixel is None else np.asarray(meanPixel, dtype=network.dtype)
    total = np.zeros((n, model.spec.num_classes, h, w), dtype=np.float64)
    copies = 0
    for scale in scales:
        height, width = max(1, roundHalfUp(h * scale)), max(1, roundHalfUp(w * scale))
        scaled = np.stack([resizeImage(image, height, width) for image in images])
        for flip in (False, True) if flips else (False,):
            batch = scaled[:, :, :, ::-1] if flip else scaled
            logits = runForward(network, _padTo(np.ascontiguousarray(batch), model.divisor, fill))[network.inferenceOutput].data
            probs = softmax(logits[:, :, :height, :width].astype(np.float64), axis=1)
            if flip:
                probs = probs[:, :, :, ::-1]
            total += np.stack([resizeImage(p, h, w) for p in probs])
            copies += 1
    return total / copies


# ==================================================================================================
# Checkpoint bundles
# ==================================================================================================


def saveCheckpoint(model: LadderModel, directory: Union[Path, str]) -> Path:
    """Writes the spec, all parameters and batchnorm statistics of ``model`` to ``directory``.\n
    Each tensor is an LDNT file; ``manifest.json`` lists them with their SHA-256 digests, next to the
    architecture and the training mean pixel. The bundle is assembled next to ``directory`` and
    moved into place when complete."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        network = model.network
        entries: Dict[str, Dict[str, str]] = {}

        def store(key: str, fileName: str, array: np.ndarray) -> None:
            saveTensorFile(staging / fileName, Tensor(array))
            entries[key] = {"file": fileName, "sha256": sha256Hex(readFileBytes(staging / fileName))}

        for i, (name, parameter) in enumerate(network.parameters.items()):
            store(f"param:{name}", f"param_{i:04d}.ldnt", parameter.tensor().data)
        for i, (name, buffers) in enumerate(network.buffers.items()):
            if buffers.initialized:
                store(f"running_mean:{name}", f"bn_{i:04d}_mean.ldnt", buffers.runningMean)
                store(f"running_var:{name}", f"bn_{i:04d}_var.ldnt", buffers.runningVar)
        manifest = {"format": MANIFEST_FORMAT, "arch": model.spec.toDict(), "tensors": entries}
        if model.meanPixel is not None:
            manifest["mean_pixel"] = [float(v) for v in model.meanPixel]
        (staging / MANIFEST_FILE).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(staging, directory)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    logger.info("Saved checkpoint with %i tensors to %s", len(entries), directory)
    return directory


def loadCheckpoint(directory: Union[Path, str]) -> LadderModel:
    """Rebuilds the model stored by :func:`saveCheckpoint`, verifying every digest"""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_FILE).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"Could not read checkpoint manifest in {directory}") from e
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"Unsupported checkpoint format {manifest.get('format')!r}")
    model = buildLadderModel(ArchSpec.fromDict(manifest["arch"]))
    network = model.network

    def load(key: str, shape: Tuple[int, ...]) -> Optional[np.ndarray]:
        entry = manifest["tensors"].get(key)
        if entry is None:
            return None
        path = directory / entry["file"]
        if sha256Hex(readFileBytes(path)) != entry["sha256"]:
            raise FormatError(f"Checksum mismatch for {path}")
        tensor = parseTensorFile(path)
        if tensor.shape != tuple(shape) or tensor.dtype != network.dtype:
            raise FormatError(f"Tensor {key} has shape {tensor.shape} and dtype {tensor.dtype}, expected {shape}")
        return tensor.numpy()

    for name, parameter in network.parameters.items():
        value = load(f"param:{name}", parameter.shape)
        if value is None:
            raise FormatError(f"Checkpoint lacks parameter {name}")
        parameter.value = value
    for name, buffers in network.buffers.items():
        buffers.runningMean = load(f"running_mean:{name}", (buffers.channels,))
        buffers.runningVar  = load(f"running_var:{name}", (buffers.channels,))
    if "mean_pixel" in manifest:
        meanPixel = np.asarray(manifest["mean_pixel"], dtype=np.float32)
        if meanPixel.shape != (network.inputChannels,):
            raise FormatError(f"Checkpoint mean pixel has shape {meanPixel.shape}, expected ({network.inputChannels},)")
        model.meanPixel = meanPixel
    return model


# ==================================================================================================
# Training loop
# ==================================================================================================


@dataclass
class EpochRecord:
    epoch:     int
    lr:        float
    trainLoss: float
    valMiou:   Optional[float]

    def csvRow(self) -> List[str]:
        miouText = "" if self.valMiou is None else f"{self.valMiou:.6f}"
        return [str(self.epoch), f"{self.lr:.8g}", f"{self.trainLoss:.6f}", miouText]


class Trainer:
    """Trains a :class:`.LadderModel` on a :class:`.SegmentationDataset`.\n
    The dataset is split once into training and validation samples. Every sample is augmented
    with ``numpy.random.default_rng([seed, epoch, index])``, so the next batch can be prepared on a
    worker thread without changing any result."""

    def __init__(self, model: LadderModel, config: TrainConfig, dataset: SegmentationDataset) -> None:
        config.validate()
        if dataset.numClasses != model.spec.num_classes:
            raise ConfigError(f"The dataset has {dataset.numClasses} classes, the model {model.spec.num_classes}")
        self.model   = model
        self.config  = config
        self.dataset = dataset
        self.policy  = CheckpointPolicy.parse(config.checkpoint_policy)
        self.policy.validateFor(model.network)
        model.meanPixel = dataset.meanPixel
        self.state   = OptimState.fromConfig(config)
        self.history: List[EpochRecord] = []

        order = np.random.default_rng(config.seed).permutation(len(dataset))
        valCount = int(len(dataset) * config.val_fraction)
        self.valIndices   = sorted(order[:valCount].tolist())
        self.trainIndices = sorted(order[valCount:].tolist())
        if not self.trainIndices:
            raise ConfigError("No training samples are left after the validation split")

    @property
    def network(self) -> Network:
        return self.model.network

    @property
    def trainingOutputs(self) -> List[str]:
        return list(self.network.trainingOutputs) if self.config.aux_loss else ["logits"]

    def makeBatch(self, epoch: int, indices: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        images, labels = [], []
        for index in indices:
            sample = self.dataset[index]
            rng = np.random.default_rng([self.config.seed, epoch, index])
            image, label = augment(sample.image, sample.labels, self.config, rng, self.dataset.meanPixel)
            images.append(image)
            labels.append(label)
        return np.stack(images).astype(self.network.dtype), np.stack(labels)

    def trainStep(self, images: np.ndarray, labels: np.ndarray, lr: float) -> LossResult:
        """Forward, loss, backward and one optimizer update on a batch"""
        self.network.mode = "train"
        outputs, trace = traceForward(self.network, images, self.policy, self.trainingOutputs)
        loss = compositeLoss(outputs, labels, self.model, self.config.final_weight, self.config.aux_weight, self.config.ignore_label)
        grads = backward(trace, loss.grads)
        amsgradStep(self.network, grads, self.state, lr)
        return loss

    def trainEpoch(self, epoch: int) -> EpochRecord:
        lr = cosineLr(epoch, self.config.epochs, self.config.base_lr)
        order = np.random.default_rng([self.config.seed, epoch]).permutation(self.trainIndices).tolist()
        batches = list(chunked(order, self.config.batch))
        losses = []
        with futures.ThreadPoolExecutor(max_workers=1) as executor:
            pending = executor.submit(self.makeBatch, epoch, batches[0]) if self.config.prefetch else None
            for i, indices in enumerate(batches):
                if pending is not None:
                    images, labels = pending.result()
                    pending = executor.submit(self.makeBatch, epoch, batches[i + 1]) if i + 1 < len(batches) else None
                else:
                    images, labels = self.makeBatch(epoch, indices)
                losses.append(self.trainStep(images, labels, lr).total)
        record = EpochRecord(epoch, lr, float(np.mean(losses)), None)
        logger.info("Epoch %i: lr %.3g, loss %.4f", epoch, lr, record.trainLoss)
        return record

    def evaluate(self, indices: Optional[Sequence[int]] = None, scales: Optional[Sequence[float]] = None, flips: Optional[bool] = None) -> Tuple[float, np.ndarray]:
        """mIoU and per-class IoU over ``indices`` (default: the validation split)"""
        indices = self.valIndices if indices is None else indices
        return evaluateModel(
            self.model, self.dataset, indices,
            self.config.eval_scales if scales is None else scales,
            self.config.eval_flips if flips is None else flips,
        )

    def recomputeBatchNorm(self) -> None:
        batches = (
            np.stack([self.dataset[i].image for i in chunk]).astype(self.network.dtype)
            for chunk in chunked(self.trainIndices, self.config.batch)
        )
        recomputeBnStats(self.network, batches)

    def fit(self, outDir: Optional[Union[Path, str]] = None) -> List[EpochRecord]:
        """Trains for ``config.epochs`` epochs, then optionally recomputes the batchnorm statistics.\n
        With ``outDir``, writes ``history.csv`` after every epoch and the final checkpoint bundle to
        ``outDir/checkpoint``. If training fails, the outputs this call created are removed, including
        ``outDir`` itself when it did not exist before, and the error is re-raised."""
        if outDir is None:
            return self._fit(None)
        outDir = Path(outDir)
        created = [path for path in (outDir / "history.csv", outDir / "checkpoint") if not path.exists()]
        if not outDir.exists():
            created.append(outDir)
        try:
            return self._fit(outDir)
        except BaseException:
            logger.warning("Training failed; removing partial outputs in %s", outDir)
            for path in created:
                if path.is_dir():
                    shutil.rmtree(path, ignore_errors=True)
                else:
                    path.unlink(missing_ok=True)
            raise

    def _fit(self, outDir: Optional[Path]) -> List[EpochRecord]:
        for epoch in range(self.config.epochs):
            record = self.trainEpoch(epoch)
            if self.valIndices:
                record.valMiou = self.evaluate()[0]
                logger.info("Epoch %i: validation mIoU %.4f", epoch, record.valMiou)
            self.history.append(record)
            if outDir is not None:
                writeHistory(self.history, outDir / "history.csv")
        if self.config.recompute_bn:
            self.recomputeBatchNorm()
            if self.valIndices:
                logger.info("Validation mIoU after recomputing batchnorm statistics: %.4f", self.evaluate()[0])
        if outDir is not None:
            saveCheckpoint(self.model, outDir / "checkpoint")
        return self.history


def evaluateModel(
    model:   LadderModel,
    dataset: SegmentationDataset,
    indices: Optional[Sequence[int]] = None,
    scales:  Sequence[float]         = (1.0,),
    flips:   bool                    = False,
) -> Tuple[float, np.ndarray]:
    """mIoU of ``model`` in eval mode over the samples at ``indices`` (default: all).\n
    Inputs are padded with the model's training mean pixel, or the dataset's if it has none."""
    network = model.network
    previous, network.mode = network.mode, "eval"
    confusion = ConfusionMatrix(model.spec.num_classes, dataset.ignoreLabel)
    meanPixel = dataset.meanPixel if model.meanPixel is None else model.meanPixel
    try:
        for index in range(len(dataset)) if indices is None else indices:
            sample = dataset[index]
            probs = multiScaleInfer(model, sample.image[None], scales, flips, meanPixel)
            confusion.update(probs[0].argmax(axis=0), sample.labels)
    finally:
        network.mode = previous
    return confusion.miou()


def writeHistory(history: Sequence[EpochRecord], filePath: Union[Path, str]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    writer.writerows(record.csvRow() for record in history)
    with atomicOutput(filePath) as tempPath:
        tempPath.write_text(buffer.getvalue())
