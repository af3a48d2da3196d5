"""Static cost model of a model spec: convolution weights, multiply-adds and activation caches.

Everything here is computed by shape inference over the same graph the executor runs. No kernel is
executed and no weight is allocated.

Conventions:

- Parameters are convolution weights only. A transition is counted with the block in front of it;
  the last block has none. Projection shortcuts are counted.
- Multiply-adds are those of convolutions only; batchnorm, activations, pooling and resizing are
  free.
- Auxiliary heads only exist during training and are excluded from the totals.
"""


from typing import Dict, List, Optional, Sequence, Union
from dataclasses import dataclass, field
import logging

import numpy as np
from numpy.typing import DTypeLike

from .autograd import CheckpointPolicy, Network, inferShapes, planExecution
from .exceptions import ShapeError
from .nets import ArchSpec, LadderModel, buildLadderModel
from .tensor import DEFAULT_DTYPE


logger = logging.getLogger(__name__)


#: Report rows, in order.
STAGES = ("stem", "block1", "block2", "block3", "block4", "spp", "upsampling", "classifier", "aux")

#: Rows excluded from totals.
TRAINING_ONLY_STAGES = ("aux",)

CSV_HEADER = ("block", "params_M", "macs_G", "cache_per_pixel")

CONVENTIONS = (
    "params: convolution weights only; transitions counted with the preceding block",
    "macs: convolution multiply-adds only; aux rows excluded from totals",
)


# ==================================================================================================
# Per-pixel caches
# ==================================================================================================


def _requirePositive(**values: int) -> None:
    for name, value in values.items():
        if value < 1:
            raise ValueError(f"{name} must be positive, got {value}")


def cacheResnet(n: int, fOut: int) -> int:
    """Per-pixel activations a residual block of ``n`` units with ``fOut`` maps keeps for backprop"""
    _requirePositive(n=n, fOut=fOut)
    return (n + 1) * fOut


def cacheDensenet(fIn: int, n: int, k: int) -> int:
    """Per-pixel activations a dense block keeps for backprop when the concatenations are not
    duplicated: the block input plus all unit outputs but the last"""
    _requirePositive(fIn=fIn, n=n, k=k)
    return fIn + (n - 1) * k


def naiveConcatCache(fIn: int, n: int, k: int) -> int:
    """Per-pixel activations of a dense block that stores every unit's concatenated input and its
    normalized copy separately"""
    _requirePositive(fIn=fIn, n=n, k=k)
    return sum(2 * (fIn + (i - 1) * k) for i in range(1, n + 1))


# ==================================================================================================
# Cost report
# ==================================================================================================


@dataclass
class StageCost:
    stage:         str
    params:        int           = 0
    macs:          int           = 0
    cachePerPixel: Optional[int] = None

    @property
    def paramsM(self) -> float:
        return self.params / 1e6

    @property
    def macsG(self) -> float:
        return self.macs / 1e9

    def csvRow(self) -> List[str]:
        cache = "" if self.cachePerPixel is None else str(self.cachePerPixel)
        return [self.stage, f"{self.paramsM:.1f}", f"{self.macsG:.3f}", cache]


@dataclass
class CostReport:
    """Per-stage convolution weights and multiply-adds of one spec at one input resolution"""
    spec:   ArchSpec
    height: int
    width:  int
    stages: Dict[str, StageCost] = field(default_factory=dict)
    #: Analytic training cache per checkpoint policy, see :func:`simulatePolicyCache`.
    policyCacheBytes: Dict[str, int] = field(default_factory=dict)

    @property
    def perBlockParams(self) -> List[int]:
        return [self.stages[f"block{b}"].params for b in range(1, 5)]

    @property
    def totalParams(self) -> int:
        return sum(s.params for s in self.stages.values() if s.stage not in TRAINING_ONLY_STAGES)

    @property
    def totalMacs(self) -> int:
        return sum(s.macs for s in self.stages.values() if s.stage not in TRAINING_ONLY_STAGES)

    def macsAt(self, height: int, width: int) -> int:
        """Inference multiply-adds at another input resolution"""
        macs = countMacs(self.spec, height, width)
        return sum(value for stage, value in macs.items() if stage not in TRAINING_ONLY_STAGES)

    @property
    def backboneMacs(self) -> int:
        """Multiply-adds of the stem and the four blocks"""
        return sum(self.stages[name].macs for name in ("stem", "block1", "block2", "block3", "block4"))

    def rows(self) -> List[StageCost]:
        return [self.stages[name] for name in STAGES if name in self.stages]

    def csvRows(self) -> List[List[str]]:
        rows = [list(CSV_HEADER)] + [s.csvRow() for s in self.rows()]
        rows.append(["total", f"{self.totalParams / 1e6:.1f}", f"{self.totalMacs / 1e9:.3f}", ""])
        return rows

    def toTable(self) -> str:
        """Human-readable report"""
        lines = [f"# {self.spec.backbone} d={self.spec.downsample_factor} u={self.spec.output_stride} at {self.height}x{self.width}"]
        lines += [f"# {convention}" for convention in CONVENTIONS]
        lines.append(f"{'block':<12}{'params (M)':>12}{'MACs (G)':>12}{'cache/px':>10}")
        for s in self.rows():
            cache = "-" if s.cachePerPixel is None else str(s.cachePerPixel)
            lines.append(f"{s.stage:<12}{s.paramsM:>12.1f}{s.macsG:>12.3f}{cache:>10}")
        lines.append(f"{'total':<12}{self.totalParams / 1e6:>12.1f}{self.totalMacs / 1e9:>12.3f}{'-':>10}")
        return "\n".join(lines)


def _model(spec: Union[ArchSpec, LadderModel]) -> LadderModel:
    return spec if isinstance(spec, LadderModel) else buildLadderModel(spec)


def _checkResolution(network: Network, height: int, width: int) -> None:
    divisor = network.inputDivisor
    if height % divisor or width % divisor:
        raise ShapeError(f"Resolution {height}x{width} is not a multiple of the downsampling factor d={divisor}")


def countParams(spec: Union[ArchSpec, LadderModel]) -> Dict[str, int]:
    """Convolution weights per stage. Independent of the input resolution."""
    network = _model(spec).network
    counts = {stage: 0 for stage in STAGES}
    for node in network.nodes:
        if node.op == "conv2d":
            counts[node.stage] += network.parameters[node.params[0]].numel
    return counts


def networkMacs(network: Network, height: int, width: int, batch: int = 1, outputs: Optional[Sequence[str]] = None) -> Dict[str, int]:
    """Convolution multiply-adds of any network per stage label, over the nodes needed for
    ``outputs`` (default: the training outputs and the inference output)"""
    if outputs is None:
        outputs = list(dict.fromkeys([*network.trainingOutputs, network.inferenceOutput]))
    _checkResolution(network, height, width)
    shapes = inferShapes(network, (batch, network.inputChannels, height, width), outputs)
    macs: Dict[str, int] = {}
    for index, shape in shapes.items():
        node = network.nodes[index]
        if node.op == "conv2d":
            macs[node.stage] = macs.get(node.stage, 0) + node.attrs["conv"].macs(shape[2], shape[3], batch)
    return macs


def countMacs(spec: Union[ArchSpec, LadderModel], height: int, width: int, batch: int = 1) -> Dict[str, int]:
    """Convolution multiply-adds per stage for a ``height`` x ``width`` input"""
    macs = networkMacs(_model(spec).network, height, width, batch)
    return {stage: macs.get(stage, 0) for stage in STAGES}


def blockCaches(spec: ArchSpec) -> Dict[str, int]:
    """Per-pixel backprop cache of every backbone block"""
    units = spec.blockUnits
    model = buildLadderModel(spec)
    caches = {}
    for b in range(1, 5):
        block = f"block{b}"
        if spec.isDense:
            first = next(n for n in model.network.nodes if n.stage == block and n.op == "concat")
            fIn = model.network.nodes[first.inputs[0]].channels
            caches[block] = cacheDensenet(fIn, units[b - 1], spec.growthRate)
        else:
            caches[block] = cacheResnet(units[b - 1], spec.topology.widths[b - 1])
    return caches


def analyze(spec: ArchSpec, height: int, width: int, batch: int = 1, withPolicies: bool = False) -> CostReport:
    """Weights, multiply-adds and per-pixel caches of every stage.\n
    With ``withPolicies``, also estimates the training cache of every checkpoint policy for a
    batch of ``batch`` images."""
    model = buildLadderModel(spec)
    params = countParams(model)
    macs   = countMacs(model, height, width)
    caches = blockCaches(spec)
    report = CostReport(spec, height, width)
    for stage in STAGES:
        report.stages[stage] = StageCost(stage, params[stage], macs[stage], caches.get(stage))
    if withPolicies:
        report.policyCacheBytes = policyTable(model, height, width, batch)
    logger.info(
        "%s: %.1f M weights, %.2f G MACs at %ix%i",
        spec.backbone, report.totalParams / 1e6, report.totalMacs / 1e9, height, width,
    )
    return report


# ==================================================================================================
# Checkpointing and unit spans
# ==================================================================================================


def simulatePolicyCache(
    spec:   Union[ArchSpec, LadderModel],
    policy: Union[CheckpointPolicy, str],
    height: int,
    width:  int,
    batch:  int       = 1,
    dtype:  DTypeLike = DEFAULT_DTYPE,
) -> int:
    """Analytic bytes a training step keeps under ``policy``: every value the policy caches plus
    the interior of the largest recomputation segment.\n
    Gradient buffers are not modelled, so this is meant to be compared with measured peaks only up
    to a small factor."""
    network = _model(spec).network
    _checkResolution(network, height, width)
    plan = planExecution(network, policy, network.trainingOutputs)
    shapes = inferShapes(network, (batch, network.inputChannels, height, width), network.trainingOutputs)
    itemSize = np.dtype(dtype).itemsize
    nbytes = {i: int(np.prod(shape)) * itemSize for i, shape in shapes.items()}
    cached = sum(nbytes[i] for i in plan.cached)
    largestInterior = max((sum(nbytes[i] for i in plan.interior(s)) for s in range(len(plan.segments))), default=0)
    return cached + largestInterior


def unitSpan(spec: ArchSpec) -> Dict[str, int]:
    """Input-pixel span of a single 3x3 unit convolution in each block, ``2 * dilation * stride + 1``
    with the stride at the end of the block.\n
    This is the footprint of one unit on the input grid, not the cumulative receptive field of the
    network up to that block."""
    strides = _blockStrides(spec)
    return {
        f"block{b}": 2 * dilation * strides[b - 1] + 1
        for b, dilation in enumerate(spec.blockDilations, start=1)
    }


def _blockStrides(spec: ArchSpec) -> List[int]:
    strides, stride = [], 4
    splits = spec.splits
    for b, kept in enumerate((False, *spec.keptPools), start=1):
        stride *= 2 if kept else 1
        strides.append(stride * (2 if b in splits else 1))
        if b in splits:
            stride *= 2
    return strides


def policyTable(
    spec:     Union[ArchSpec, LadderModel],
    height:   int,
    width:    int,
    batch:    int = 1,
    policies: Optional[Sequence[CheckpointPolicy]] = None,
) -> Dict[str, int]:
    """:func:`simulatePolicyCache` for each policy that fits the model"""
    model = _model(spec)
    table = {}
    for policy in policies or CheckpointPolicy.tableOrder():
        kinds = policy.segmentKinds
        if kinds and not kinds & model.network.scopeKinds():
            continue
        table[policy.name] = simulatePolicyCache(model, policy, height, width, batch)
    return table
