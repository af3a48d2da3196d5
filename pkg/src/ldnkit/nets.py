"""Ladder-style DenseNet and ResNet segmentation models, recorded as :class:`.Network` graphs.

A model is described by an :class:`.ArchSpec` and built with :func:`buildLadderModel`: a
downsampling backbone (stem, four blocks with transitions, optional extra pooling inside dense
blocks), a spatial pyramid pooling context module, and a chain of lightweight transition-up blocks
that blend the upsampled features with backbone skips until the requested output stride.
"""


from __future__ import annotations

from typing import Dict, List, Optional, Tuple, Union
from dataclasses import dataclass, field
from math import floor, log2, sqrt
import logging

import numpy as np
from more_itertools import pairwise

from .autograd import GraphBuilder, Network
from .exceptions import ConfigError
from .tensor import DEFAULT_DTYPE
from .utils import dataclassFromDict, dataclassToDict, isPowerOfTwo


logger = logging.getLogger(__name__)


#: Channels of an input image.
IMAGE_CHANNELS = 3

#: Stride of the stem output.
STEM_STRIDE = 4


@dataclass(frozen=True)
class Backbone:
    """Fixed topology of a named backbone.\n
    ``kind`` is ``"dense"``, ``"bottleneck"`` or ``"basic"``. Dense backbones have a growth rate;
    residual backbones have per-block output widths."""
    kind:       str
    units:      Tuple[int, ...]
    growthRate: Optional[int]             = None
    stemWidth:  int                       = 64
    widths:     Optional[Tuple[int, ...]] = None

    @property
    def isDense(self) -> bool:
        return self.kind == "dense"


BACKBONES: Dict[str, Backbone] = {
    "dn121": Backbone("dense", (6, 12, 24, 16), growthRate=32),
    "dn169": Backbone("dense", (6, 12, 32, 32), growthRate=32),
    "dn161": Backbone("dense", (6, 12, 36, 24), growthRate=48, stemWidth=96),
    "rn50":  Backbone("bottleneck", (3, 4, 6, 3), widths=(256, 512, 1024, 2048)),
    "rn18":  Backbone("basic", (2, 2, 2, 2), widths=(64, 128, 256, 512)),
    "toy":   Backbone("dense", ()),
}


@dataclass
class ArchSpec:
    """Declarative description of a segmentation model.\n
    Field names are the keys of the ``arch`` section of a configuration document. Optional fields
    left at ``None`` take the backbone's defaults."""
    backbone:          str                              = "dn121"
    units:             Optional[List[int]]              = None
    growth_rate:       Optional[int]                    = None
    stem_width:        Optional[int]                    = None
    downsample_factor: int                              = 32
    output_stride:     int                              = 4
    split_block:       Optional[Union[int, List[int]]]  = None
    split_unit_index:  Optional[Union[int, List[int]]]  = None
    dilations:         Optional[List[int]]              = None
    upsample_width:    int                              = 128
    use_spp:           bool                             = True
    spp_grids:         List[int]                        = field(default_factory=lambda: [1, 2, 4, 8])
    dws_upsampling:    bool                             = False
    num_classes:       int                              = 19
    compression:       float                            = 0.5

    @staticmethod
    def fromDict(data: dict) -> ArchSpec:
        spec = dataclassFromDict(ArchSpec, data, "arch")
        spec.validate()
        return spec

    def toDict(self) -> dict:
        return dataclassToDict(self)

    # ----------------------------------------------------------------------------------------------
    # Resolved properties

    @property
    def topology(self) -> Backbone:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"Unknown backbone {self.backbone!r}; expected one of {', '.join(BACKBONES)}")
        return BACKBONES[self.backbone]

    @property
    def isDense(self) -> bool:
        return self.topology.isDense

    @property
    def blockUnits(self) -> Tuple[int, ...]:
        return tuple(self.units) if self.units is not None else self.topology.units

    @property
    def growthRate(self) -> int:
        return self.growth_rate if self.growth_rate is not None else (self.topology.growthRate or 0)

    @property
    def stemWidth(self) -> int:
        return self.stem_width if self.stem_width is not None else self.topology.stemWidth

    @property
    def blockDilations(self) -> Tuple[int, ...]:
        return tuple(self.dilations) if self.dilations is not None else (1, 1, 1, 1)

    @property
    def keptPools(self) -> Tuple[bool, ...]:
        """Whether the transition in front of blocks 2, 3 and 4 halves the resolution.\n
        A block whose dilation exceeds that of the previous block keeps the previous resolution."""
        return tuple(current <= previous for previous, current in pairwise(self.blockDilations))

    @property
    def splitCount(self) -> int:
        """Extra pooling layers inside dense blocks needed to reach the downsampling factor"""
        base = STEM_STRIDE * 2 ** sum(self.keptPools)
        ratio = self.downsample_factor / base
        if ratio < 1 or not ratio.is_integer() or not isPowerOfTwo(int(ratio)):
            raise ConfigError(
                f"Downsampling factor {self.downsample_factor} cannot be reached from stride {base} "
                f"by splitting dense blocks"
            )
        return int(log2(ratio))

    @property
    def splits(self) -> Dict[int, int]:
        """Split dense blocks (1-based) mapped to the number of units before their extra pooling.\n
        Defaults: the middle of block 3, then the middle of block 4."""
        count = self.splitCount
        if count == 0:
            if self.split_block is not None:
                raise ConfigError(f"Downsampling factor {self.downsample_factor} leaves no room for a block split")
            return {}
        blocks = _asList(self.split_block) if self.split_block is not None else [3, 4][:count]
        if len(blocks) != count:
            raise ConfigError(
                f"Downsampling factor {self.downsample_factor} needs {count} block split(s), "
                f"split_block names {len(blocks)}"
            )
        if len(set(blocks)) != len(blocks) or any(not 1 <= b <= 4 for b in blocks):
            raise ConfigError(f"split_block must name distinct blocks in [1, 4], got {blocks}")
        units = self.blockUnits
        if self.split_unit_index is not None:
            indices = _asList(self.split_unit_index)
            if len(indices) != len(blocks):
                raise ConfigError("split_unit_index needs one entry per split block")
        else:
            indices = [units[b - 1] // 2 for b in blocks]
        for block, index in zip(blocks, indices):
            if not 1 <= index <= units[block - 1] - 1:
                raise ConfigError(
                    f"Split index {index} of block {block} must lie in [1, {units[block - 1] - 1}]"
                )
        return dict(zip(blocks, indices))

    @property
    def transitionUpCount(self) -> int:
        return int(log2(self.downsample_factor // self.output_stride))

    def validate(self) -> None:
        """Raises a :class:`.ConfigError` if the spec is inconsistent"""
        topology = self.topology
        if self.backbone == "toy" and (self.units is None or self.growth_rate is None):
            raise ConfigError("The toy backbone needs units and growth_rate")
        if not topology.isDense and (self.units is not None or self.growth_rate is not None):
            raise ConfigError(f"Backbone {self.backbone} has a fixed topology; units and growth_rate do not apply")
        units = self.blockUnits
        if len(units) != 4 or any(n < 1 for n in units):
            raise ConfigError(f"units must list four positive unit counts, got {list(units)}")
        if topology.isDense and self.growthRate < 1:
            raise ConfigError(f"growth_rate must be positive, got {self.growthRate}")
        if self.stemWidth < 1:
            raise ConfigError(f"stem_width must be positive, got {self.stemWidth}")
        dilations = self.blockDilations
        if len(dilations) != 4 or any(d < 1 for d in dilations):
            raise ConfigError(f"dilations must list four positive factors, got {list(dilations)}")
        if not isPowerOfTwo(self.downsample_factor) or self.downsample_factor < STEM_STRIDE:
            raise ConfigError(f"downsample_factor must be a power of two of at least {STEM_STRIDE}, got {self.downsample_factor}")
        if not isPowerOfTwo(self.output_stride) or not 2 <= self.output_stride <= self.downsample_factor:
            raise ConfigError(
                f"output_stride must be a power of two in [2, {self.downsample_factor}], got {self.output_stride}"
            )
        if self.splits and not topology.isDense:
            raise ConfigError(f"Residual backbone {self.backbone} cannot be split; use downsample_factor {STEM_STRIDE * 2 ** sum(self.keptPools)}")
        if self.upsample_width < 1:
            raise ConfigError(f"upsample_width must be positive, got {self.upsample_width}")
        if not self.spp_grids or any(rows < 1 for rows in self.spp_grids):
            raise ConfigError(f"spp_grids must list positive row counts, got {self.spp_grids}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if not 0 < self.compression <= 1:
            raise ConfigError(f"compression must lie in (0, 1], got {self.compression}")


def _asList(value: Union[int, List[int]]) -> List[int]:
    return [value] if isinstance(value, int) else list(value)


# ==================================================================================================
# Building blocks
# ==================================================================================================


def buildStem(g: GraphBuilder, x: int, width: int, poolInScope: bool = True) -> Tuple[int, int]:
    """7x7 convolution with stride 2, batchnorm, ReLU and 3x3 max pooling with stride 2.\n
    Returns the stride-4 output and the stride-2 activation before pooling. With
    ``poolInScope=False`` the pooling is left out of the ``stem`` checkpoint scope, so that the
    stride-2 activation stays cached and can feed a skip connection."""
    with g.stage("stem"):
        with g.scope("stem", "stem"):
            y = g.conv(x, width, 7, stride=2, padding=3, name="stem.conv")
            y = g.batchNorm(y, "stem.bn")
            activated = g.relu(y, "stem.relu")
            if poolInScope:
                return g.pool(activated, "max", 3, 2, 1, "stem.pool"), activated
        return g.pool(activated, "max", 3, 2, 1, "stem.pool"), activated


def buildDenseUnit(g: GraphBuilder, features: List[int], growthRate: int, name: str, dilation: int = 1) -> int:
    """BN-ReLU-conv1x1 to ``4k`` maps over the concatenated ``features``, then BN-ReLU-conv3x3 to
    ``k`` maps"""
    with g.scope("unit", name):
        with g.scope("cat_proj", name):
            y = g.concat(features, f"{name}.cat")
            y = g.bnReluConv(y, 4 * growthRate, 1, f"{name}.proj")
        with g.scope("conv3x3", name):
            return g.bnReluConv(y, growthRate, 3, f"{name}.conv3x3", dilation=dilation)


def buildDenseBlock(
    g:          GraphBuilder,
    x:          int,
    units:      int,
    growthRate: int,
    name:       str,
    splitAt:    Optional[int] = None,
    dilation:   int           = 1,
) -> List[int]:
    """Records a dense block and returns the output of each fragment.\n
    Unit ``i`` reads the concatenation of the block input and all earlier unit outputs. With
    ``splitAt``, the first ``splitAt`` units form one fragment; the second fragment starts with a
    2x2 average pooling (stride 2) of everything the first fragment produced. Each fragment output is
    the concatenation of its input and its unit outputs."""
    if units < 1:
        raise ConfigError(f"A dense block needs at least one unit, got {units}")
    if splitAt is not None and not 1 <= splitAt <= units - 1:
        raise ConfigError(f"Split index {splitAt} of {name} must lie in [1, {units - 1}]")
    if splitAt is None:
        fragments = [(name, range(1, units + 1))]
    else:
        fragments = [(f"{name}a", range(1, splitAt + 1)), (f"{name}b", range(splitAt + 1, units + 1))]

    outputs: List[int] = []
    features = [x]
    for fragment, unitRange in fragments:
        with g.scope("block", fragment):
            if outputs:
                features = [g.pool(outputs[-1], "avg", 2, 2, 0, f"{fragment}.pool")]
            for i in unitRange:
                features.append(buildDenseUnit(g, features, growthRate, f"{name}.u{i}", dilation))
            outputs.append(g.concat(features, f"{fragment}.out"))
    return outputs


def buildTransitionDown(g: GraphBuilder, x: int, outChannels: int, name: str, pool: bool = True) -> int:
    """BN-ReLU-conv1x1 compression followed by 2x2 average pooling with stride 2"""
    with g.scope("td", name):
        y = g.bnReluConv(x, outChannels, 1, name)
        if pool:
            y = g.pool(y, "avg", 2, 2, 0, f"{name}.pool")
        return y


def buildResidualUnit(
    g:           GraphBuilder,
    x:           int,
    outChannels: int,
    kind:        str,
    name:        str,
    stride:      int  = 1,
    dilation:    int  = 1,
    project:     bool = False,
) -> int:
    """Pre-activation residual unit: bottleneck (1x1, 3x3, 1x1 at a quarter of the width) or basic
    (two 3x3)"""
    with g.scope("unit", name):
        y = g.batchNorm(x, f"{name}.bn")
        activated = g.relu(y, f"{name}.relu")
        if kind == "bottleneck":
            width = outChannels // 4
            y = g.conv(activated, width, 1, name=f"{name}.reduce")
            with g.scope("conv3x3", name):
                y = g.bnReluConv(y, width, 3, f"{name}.conv3x3", stride=stride, dilation=dilation)
            y = g.bnReluConv(y, outChannels, 1, f"{name}.expand")
        else:
            with g.scope("conv3x3", f"{name}.a"):
                y = g.conv(activated, outChannels, 3, stride=stride, dilation=dilation, name=f"{name}.conv3x3a")
            with g.scope("conv3x3", f"{name}.b"):
                y = g.bnReluConv(y, outChannels, 3, f"{name}.conv3x3b", dilation=dilation)
        shortcut = g.conv(activated, outChannels, 1, stride=stride, name=f"{name}.shortcut") if project else x
        return g.add(y, shortcut, f"{name}.add")


def buildResidualBlock(
    g:           GraphBuilder,
    x:           int,
    units:       int,
    outChannels: int,
    kind:        str,
    name:        str,
    stride:      int = 1,
    dilation:    int = 1,
) -> int:
    with g.scope("block", name):
        for i in range(1, units + 1):
            first = i == 1
            project = first and (kind == "bottleneck" or stride != 1 or g.channels(x) != outChannels)
            x = buildResidualUnit(g, x, outChannels, kind, f"{name}.u{i}", stride if first else 1, dilation, project)
        return x


def _head(g: GraphBuilder, x: int, numClasses: int, name: str) -> int:
    return g.bnReluConv(x, numClasses, 1, name, group="head")


@dataclass(frozen=True)
class HeadInfo:
    """Where an auxiliary head predicts: a pixel ``stride`` for window heads, or ``rows`` for heads
    on a pooling grid"""
    kind:   str
    stride: int           = 0
    rows:   Optional[int] = None


def buildSpp(
    g:          GraphBuilder,
    x:          int,
    grids:      List[int],
    numClasses: int,
    heads:      Dict[str, HeadInfo],
) -> int:
    """Spatial pyramid pooling: project the ``D`` input maps to ``D/2``, average them over grids
    of increasing row counts, project each pooled tensor to ``D/8``, upsample it back, concatenate
    everything and blend to ``D/4`` maps. An auxiliary head follows each ``D/8`` projection."""
    channels = g.channels(x)
    if channels % 8:
        raise ConfigError(f"Pyramid pooling needs a multiple of 8 input channels, got {channels}")
    with g.stage("spp"):
        projected = g.bnReluConv(x, channels // 2, 1, "spp.proj", group="head")
        branches = [projected]
        for rows in grids:
            pooled = g.gridPool(projected, rows, f"spp.grid{rows}")
            pooled = g.bnReluConv(pooled, channels // 8, 1, f"spp.grid{rows}.proj", group="head")
            with g.stage("aux"):
                name = f"aux.spp{rows}"
                g.output(name, _head(g, pooled, numClasses, name))
                heads[name] = HeadInfo("grid", rows=rows)
            branches.append(g.resize(pooled, like=projected, name=f"spp.grid{rows}.up"))
        blended = g.concat(branches, "spp.cat")
        return g.bnReluConv(blended, channels // 4, 1, "spp.blend", group="head")


def buildContext(g: GraphBuilder, x: int) -> int:
    """Replacement of :func:`buildSpp` without pooling: one BN-ReLU-conv3x3 from ``D`` to ``D/4``"""
    channels = g.channels(x)
    if channels % 4:
        raise ConfigError(f"The context convolution needs a multiple of 4 input channels, got {channels}")
    with g.stage("spp"):
        return g.bnReluConv(x, channels // 4, 3, "context", group="head")


def buildTransitionUp(g: GraphBuilder, low: int, skip: int, width: int, name: str, dws: bool = False) -> int:
    """Upsamples ``low`` 2x to the skip resolution, adds the skip projected to the same channel
    count, reduces to ``width`` maps if needed and finishes with one 3x3 convolution"""
    channels = g.channels(low)
    with g.stage("upsampling"), g.scope("tu", name):
        y = g.resize(low, like=skip, expectScale=2, name=f"{name}.up")
        projected = g.bnReluConv(skip, channels, 1, f"{name}.skip", group="head")
        y = g.add(y, projected, f"{name}.add")
        if channels != width:
            y = g.bnReluConv(y, width, 1, f"{name}.reduce", group="head")
        if dws:
            y = g.bnReluConv(y, width, 3, f"{name}.dw", groups=width, group="head")
            return g.conv(y, width, 1, name=f"{name}.pw", group="head")
        return g.bnReluConv(y, width, 3, f"{name}.blend", group="head")


# ==================================================================================================
# Models
# ==================================================================================================


@dataclass
class LadderModel:
    """A built model: its graph, the spec it came from and its auxiliary heads.\n
    ``levels`` maps each stride to the deepest backbone feature at that stride. ``meanPixel`` is
    the per-channel mean of the training images, used to pad inputs; it is set by the trainer and
    stored in checkpoints."""
    spec:      ArchSpec
    network:   Network
    heads:     Dict[str, HeadInfo]
    levels:    Dict[int, int]
    meanPixel: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def divisor(self) -> int:
        return self.network.inputDivisor


def buildLadderModel(spec: ArchSpec, dtype=DEFAULT_DTYPE) -> LadderModel:
    """Records the full model described by ``spec``.\n
    Outputs: ``logits`` at the output stride, ``final`` (logits upsampled to the input
    resolution), and one ``aux.*`` head per transition-up output and per pyramid pooling branch."""
    spec.validate()
    topology = spec.topology
    units, dilations, kept, splits = spec.blockUnits, spec.blockDilations, spec.keptPools, spec.splits
    d, u = spec.downsample_factor, spec.output_stride

    g = GraphBuilder(dtype)
    image = g.input(IMAGE_CHANNELS)
    x, prePool = buildStem(g, image, spec.stemWidth, poolInScope=u > 2)
    levels = {2: prePool, STEM_STRIDE: x}
    stride = STEM_STRIDE

    for b in range(1, 5):
        name, dilation = f"db{b}", dilations[b - 1]
        with g.stage(f"block{b}"):
            if topology.isDense:
                fragments = buildDenseBlock(g, x, units[b - 1], spec.growthRate, name, splits.get(b), dilation)
                for i, fragment in enumerate(fragments):
                    if i > 0:
                        stride *= 2
                    levels[stride] = fragment
                x = fragments[-1]
                if b < 4:
                    compressed = floor(g.channels(x) * spec.compression)
                    x = buildTransitionDown(g, x, compressed, f"td{b}", pool=kept[b - 1])
                    stride *= 2 if kept[b - 1] else 1
            else:
                downsample = b > 1 and kept[b - 2]
                stride *= 2 if downsample else 1
                x = buildResidualBlock(
                    g, x, units[b - 1], topology.widths[b - 1], topology.kind, name,
                    stride=2 if downsample else 1, dilation=dilation,
                )
                levels[stride] = x
    if stride != d:
        raise ConfigError(f"Backbone ends at stride {stride}, expected {d}")

    heads: Dict[str, HeadInfo] = {}
    x = buildSpp(g, x, spec.spp_grids, spec.num_classes, heads) if spec.use_spp else buildContext(g, x)

    while stride > u:
        stride //= 2
        tu = f"tu{stride}"
        x = buildTransitionUp(g, x, levels[stride], spec.upsample_width, tu, spec.dws_upsampling)
        with g.stage("aux"):
            name = f"aux.{tu}"
            g.output(name, _head(g, x, spec.num_classes, name))
            heads[name] = HeadInfo("window", stride=stride)

    with g.stage("classifier"):
        logits = _head(g, x, spec.num_classes, "classifier")
        final = g.resize(logits, scale=u, name="final")
    g.output("logits", logits)
    g.output("final", final)

    network = g.build()
    network.trainingOutputs = ["logits", *heads]
    network.inferenceOutput = "final"
    network.inputDivisor    = d
    logger.debug(
        "Built %s: %i nodes, %i parameters, %i auxiliary heads",
        spec.backbone, len(network.nodes), network.parameterCount(), len(heads),
    )
    return LadderModel(spec, network, heads, levels)


@dataclass
class DenseBlockModel:
    """A network holding a single dense block, reading ``inChannels`` maps and producing ``out``"""
    network:    Network
    inChannels: int
    units:      int
    growthRate: int
    dilation:   int           = 1
    splitAt:    Optional[int] = None
    name:       str           = "db"

    @property
    def outChannels(self) -> int:
        return self.inChannels + self.units * self.growthRate


def buildDenseBlockModel(
    inChannels: int,
    units:      int,
    growthRate: int,
    splitAt:    Optional[int] = None,
    dilation:   int           = 1,
    dtype                     = DEFAULT_DTYPE,
) -> DenseBlockModel:
    g = GraphBuilder(dtype)
    x = g.input(inChannels)
    with g.stage("block1"):
        outputs = buildDenseBlock(g, x, units, growthRate, "db", splitAt, dilation)
    g.output("out", outputs[-1])
    return DenseBlockModel(g.build(), inChannels, units, growthRate, dilation, splitAt)


def emulateDenseBlockAsResidual(block: DenseBlockModel) -> Network:
    """Realizes a dense block as a residual block with the same output.\n
    The residual block carries all ``F_in + n*k`` output maps from the start: its input is the block
    input padded with zero maps. Unit ``i`` reuses the weights of dense unit ``i``, zero-padded so
    that it reads only the first ``F_in + (i-1)*k`` maps and writes only maps
    ``[F_in + (i-1)*k, F_in + i*k)``; every other residual contribution is zero. Batchnorm weights and
    running statistics of the unused maps are set to the identity."""
    if block.splitAt is not None:
        raise ConfigError("A dense block with internal pooling has no residual emulation")
    dense = block.network
    if not dense.initialized:
        raise ConfigError("The dense block must be initialized before it can be emulated")
    fIn, k, total = block.inChannels, block.growthRate, block.outChannels

    g = GraphBuilder(dense.dtype)
    x = g.input(fIn)
    h = g.padChannels(x, total, "pad")
    for i in range(1, block.units + 1):
        name = f"res.u{i}"
        with g.stage("block1"), g.scope("unit", name):
            y = g.bnReluConv(h, 4 * k, 1, f"{name}.proj")
            with g.scope("conv3x3", name):
                y = g.bnReluConv(y, total, 3, f"{name}.conv3x3", dilation=block.dilation)
            h = g.add(h, y, f"{name}.add")
    g.output("out", h)
    residual = g.build()
    initParameters(residual, 0)

    for i in range(1, block.units + 1):
        dn, rn = f"{block.name}.u{i}", f"res.u{i}"
        cin = fIn + (i - 1) * k
        _copyBatchNorm(dense, f"{dn}.proj.bn", residual, f"{rn}.proj.bn", slice(0, cin))
        _copyBatchNorm(dense, f"{dn}.conv3x3.bn", residual, f"{rn}.conv3x3.bn", slice(0, 4 * k))

        proj = residual.parameters[f"{rn}.proj.conv.weight"].value
        proj[...] = 0
        proj[:, :cin] = dense.parameters[f"{dn}.proj.conv.weight"].value

        conv = residual.parameters[f"{rn}.conv3x3.conv.weight"].value
        conv[...] = 0
        conv[cin:cin + k] = dense.parameters[f"{dn}.conv3x3.conv.weight"].value
    return residual


def _copyBatchNorm(source: Network, sourceName: str, target: Network, targetName: str, channels: slice) -> None:
    for suffix in ("weight", "bias"):
        target.parameters[f"{targetName}.{suffix}"].value[channels] = source.parameters[f"{sourceName}.{suffix}"].value
    sourceBuffers, targetBuffers = source.buffers[sourceName], target.buffers[targetName]
    if sourceBuffers.initialized:
        targetBuffers.runningMean[channels] = sourceBuffers.runningMean
        targetBuffers.runningVar[channels]  = sourceBuffers.runningVar


def initParameters(network: Network, seed: int) -> Network:
    """He-normal convolution weights (standard deviation ``sqrt(2/fan_in)``), unit batchnorm scales,
    zero shifts and running statistics of mean 0 and variance 1.\n
    Draws from ``numpy.random.default_rng(seed)`` in parameter registration order, so the result is
    fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    for parameter in network.parameters.values():
        if parameter.kind == "conv":
            std = sqrt(2.0 / parameter.fanIn)
            parameter.value = (rng.standard_normal(parameter.shape) * std).astype(network.dtype)
        elif parameter.kind == "bn_weight":
            parameter.value = np.ones(parameter.shape, dtype=network.dtype)
        else:
            parameter.value = np.zeros(parameter.shape, dtype=network.dtype)
    for buffers in network.buffers.values():
        buffers.reset(network.dtype)
    return network
