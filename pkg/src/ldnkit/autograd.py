"""Static computation graphs, reverse-mode differentiation and segment-based gradient checkpointing.

A network is recorded once, symbolically, by a :class:`.GraphBuilder`: every node names its kernel,
its input nodes and parameters, and the checkpoint scopes it was recorded in (``stem``, ``block``,
``unit``, ``cat_proj``, ``conv3x3``, ``td``, ``tu``). Because the graph is known before anything
runs, the executor knows every consumer of every value and can release activations at the earliest
possible moment.

A :class:`.CheckpointPolicy` selects scope kinds. Each selected scope becomes a recomputation
segment: only its last value (and everything outside segments) is kept after the forward pass, and
the backward pass re-executes the segment interior right before differentiating through it.
A :class:`.MemoryTracker` counts every live activation, recomputation and gradient buffer.
"""


from __future__ import annotations

from typing import Any, Callable, Dict, FrozenSet, Hashable, Iterator, List, Mapping, Optional, Sequence, Set, Tuple, Union
from dataclasses import dataclass, field
from contextlib import contextmanager
from math import prod
import copy
import logging
import time

import numpy as np
from numpy.typing import DTypeLike

from . import kernels
from .exceptions import CheckpointError, LdnError, PolicyError, ShapeError, StatisticsError, TraceConsumedError, DTypeError
from .kernels import ConvParams
from .tensor import DEFAULT_DTYPE, Tensor, TensorLike, asTensor
from .utils import MEBIBYTE, sha256Hex


logger = logging.getLogger(__name__)


#: Scope kinds a model builder can open, and that checkpoint policies can select.
SCOPE_KINDS = ("stem", "block", "unit", "cat_proj", "conv3x3", "td", "tu")

#: Network modes, matching the batchnorm modes.
NETWORK_MODES = kernels.BATCH_NORM_MODES


# ==================================================================================================
# Graph
# ==================================================================================================


@dataclass
class Parameter:
    """A trainable weight tensor of a :class:`.Network`.\n
    ``group`` is ``"backbone"`` or ``"head"``; optimizers may use it to scale learning rates.
    ``value`` is ``None`` until the network is initialized."""
    name:  str
    shape: Tuple[int, ...]
    kind:  str
    group: str                  = "backbone"
    fanIn: int                  = 0
    value: Optional[np.ndarray] = None

    @property
    def numel(self) -> int:
        return prod(self.shape)

    def tensor(self) -> Tensor:
        """Read-only view of the current value"""
        if self.value is None:
            raise LdnError(f"Parameter {self.name} is not initialized")
        return Tensor(self.value)


@dataclass
class BatchNormBuffers:
    """Running statistics of one batchnorm node, plus the sums of an ongoing recomputation"""
    channels:    int
    runningMean: Optional[np.ndarray] = None
    runningVar:  Optional[np.ndarray] = None
    count:       int                  = 0
    total:       Optional[np.ndarray] = None
    totalSq:     Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.runningMean is not None and self.runningVar is not None

    def reset(self, dtype: DTypeLike = DEFAULT_DTYPE) -> None:
        """Sets the running statistics to mean 0 and variance 1"""
        self.runningMean = np.zeros(self.channels, dtype=dtype)
        self.runningVar  = np.ones(self.channels, dtype=dtype)

    def resetAccumulator(self) -> None:
        self.count   = 0
        self.total   = np.zeros(self.channels, dtype=np.float64)
        self.totalSq = np.zeros(self.channels, dtype=np.float64)

    def accumulate(self, count: int, total: np.ndarray, totalSq: np.ndarray) -> None:
        if self.total is None or self.totalSq is None:
            self.resetAccumulator()
        self.count   += count
        self.total   += total
        self.totalSq += totalSq

    def finalize(self, dtype: DTypeLike = DEFAULT_DTYPE) -> None:
        """Replaces the running statistics by the exact mean and (biased) variance of everything
        accumulated since :meth:`resetAccumulator`"""
        if self.count == 0 or self.total is None or self.totalSq is None:
            raise StatisticsError("No activations were accumulated for this batchnorm node")
        mean = self.total / self.count
        var  = np.maximum(self.totalSq / self.count - mean * mean, 0.0)
        self.runningMean = mean.astype(dtype)
        self.runningVar  = var.astype(dtype)


@dataclass(frozen=True)
class Node:
    """One recorded kernel application.\n
    ``scopes`` lists the ``(kind, name)`` checkpoint scopes enclosing the node, outermost first.
    ``stage`` names the part of the network the node is accounted to in cost reports."""
    index:    int
    op:       str
    inputs:   Tuple[int, ...]
    channels: int
    params:   Tuple[str, ...]                = ()
    attrs:    Mapping[str, Any]              = field(default_factory=dict)
    scopes:   Tuple[Tuple[str, str], ...]    = ()
    stage:    str                            = ""
    name:     str                            = ""

    @property
    def tags(self) -> FrozenSet[str]:
        """Kinds of the scopes enclosing this node"""
        return frozenset(kind for kind, _ in self.scopes)

    def scopeName(self, kind: str) -> Optional[str]:
        """Name of the innermost enclosing scope of ``kind``, if any"""
        for scopeKind, name in reversed(self.scopes):
            if scopeKind == kind:
                return name
        return None


class Network:
    """A static computation graph together with its parameters and batchnorm buffers.\n
    Node 0 is the input image. ``outputs`` maps output names to node indices."""

    def __init__(
        self,
        nodes:      List[Node],
        parameters: Dict[str, Parameter],
        buffers:    Dict[str, BatchNormBuffers],
        outputs:    Dict[str, int],
        dtype:      DTypeLike = DEFAULT_DTYPE,
    ) -> None:
        """Constructs a network from recorded nodes. Use a :class:`.GraphBuilder` to make one."""
        if not nodes or nodes[0].op != "input":
            raise LdnError("The first node of a network must be its input")
        self.nodes      = nodes
        self.parameters = parameters
        self.buffers    = buffers
        self.outputs    = outputs
        self.dtype      = np.dtype(dtype)
        self.momentum   = kernels.BN_MOMENTUM
        self.epsilon    = kernels.BN_EPSILON
        #: Outputs differentiated during training.
        self.trainingOutputs: List[str] = list(outputs)
        #: Output used for predictions.
        self.inferenceOutput: str = list(outputs)[-1]
        #: Input heights and widths must be multiples of this.
        self.inputDivisor: int = 1
        self._mode = "train"
        self._consumers: List[List[int]] = [[] for _ in nodes]
        for node in nodes:
            for j in dict.fromkeys(node.inputs):
                self._consumers[j].append(node.index)

    @property
    def mode(self) -> str:
        """Batchnorm mode: ``"train"``, ``"eval"`` or ``"accumulate"``"""
        return self._mode

    @mode.setter
    def mode(self, value: str) -> None:
        if value not in NETWORK_MODES:
            raise ValueError(f"Unknown network mode {value!r}; expected one of {NETWORK_MODES}")
        self._mode = value

    @property
    def inputChannels(self) -> int:
        return self.nodes[0].channels

    def consumers(self, index: int) -> List[int]:
        """Indices of the nodes reading the output of node ``index``"""
        return self._consumers[index]

    def scopeKinds(self) -> Set[str]:
        """Every checkpoint scope kind used by some node"""
        return {kind for node in self.nodes for kind, _ in node.scopes}

    def parameterList(self) -> List[Parameter]:
        return list(self.parameters.values())

    def parameterCount(self) -> int:
        return sum(p.numel for p in self.parameters.values())

    def parameterBytes(self) -> int:
        return self.parameterCount() * self.dtype.itemsize

    @property
    def initialized(self) -> bool:
        return all(p.value is not None for p in self.parameters.values())

    def checksum(self) -> str:
        """SHA-256 over all parameter values in registration order"""
        digest = b"".join(
            name.encode() + (p.tensor().checksum().encode() if p.value is not None else b"-")
            for name, p in self.parameters.items()
        )
        return sha256Hex(digest)

    def snapshotBuffers(self) -> Dict[str, BatchNormBuffers]:
        """Deep copy of all batchnorm buffers"""
        return copy.deepcopy(self.buffers)

    def restoreBuffers(self, snapshot: Mapping[str, BatchNormBuffers]) -> None:
        self.buffers = copy.deepcopy(dict(snapshot))

    def forward(self, image: TensorLike, outputs: Optional[Sequence[str]] = None) -> Dict[str, Tensor]:
        """Untraced forward pass, see :func:`runForward`"""
        return runForward(self, image, outputs)


class GraphBuilder:
    """Records the nodes of a :class:`.Network`.\n
    Every recording method returns the index of the new node. Nodes recorded inside
    ``with builder.scope(kind, name):`` belong to that checkpoint scope; nodes recorded inside
    ``with builder.stage(name):`` are accounted to that stage in cost reports."""

    def __init__(self, dtype: DTypeLike = DEFAULT_DTYPE) -> None:
        self._dtype      = np.dtype(dtype)
        self._nodes:      List[Node]                  = []
        self._parameters: Dict[str, Parameter]        = {}
        self._buffers:    Dict[str, BatchNormBuffers] = {}
        self._outputs:    Dict[str, int]              = {}
        self._scopes:     List[Tuple[str, str]]       = []
        self._stage = ""
        self._nameCounts: Dict[str, int] = {}

    @contextmanager
    def scope(self, kind: str, name: str) -> Iterator[None]:
        """Records the enclosed nodes as part of checkpoint scope ``(kind, name)``"""
        if kind not in SCOPE_KINDS:
            raise ValueError(f"Unknown scope kind {kind!r}; expected one of {SCOPE_KINDS}")
        self._scopes.append((kind, name))
        try:
            yield
        finally:
            self._scopes.pop()

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Accounts the enclosed nodes to stage ``name``"""
        previous, self._stage = self._stage, name
        try:
            yield
        finally:
            self._stage = previous

    def channels(self, index: int) -> int:
        """Static channel count of the output of node ``index``"""
        return self._nodes[index].channels

    def _uniqueName(self, name: str) -> str:
        count = self._nameCounts.get(name, 0)
        self._nameCounts[name] = count + 1
        return name if count == 0 else f"{name}#{count}"

    def _add(
        self,
        op:       str,
        inputs:   Sequence[int],
        channels: int,
        name:     str,
        params:   Sequence[str]            = (),
        attrs:    Optional[Dict[str, Any]] = None,
    ) -> int:
        for j in inputs:
            if not 0 <= j < len(self._nodes):
                raise LdnError(f"Node {name} reads unknown node {j}")
        node = Node(
            index    = len(self._nodes),
            op       = op,
            inputs   = tuple(inputs),
            channels = channels,
            params   = tuple(params),
            attrs    = attrs or {},
            scopes   = tuple(self._scopes),
            stage    = self._stage,
            name     = name,
        )
        self._nodes.append(node)
        return node.index

    def input(self, channels: int, name: str = "input") -> int:
        if self._nodes:
            raise LdnError("The input must be the first recorded node")
        return self._add("input", (), channels, name)

    def conv(
        self,
        x:           int,
        outChannels: int,
        kernel:      int,
        stride:      int           = 1,
        padding:     Optional[int] = None,
        dilation:    int           = 1,
        groups:      int           = 1,
        name:        str           = "conv",
        group:       str           = "backbone",
    ) -> int:
        name = self._uniqueName(name)
        p = ConvParams.square(self.channels(x), outChannels, kernel, stride, padding, dilation, groups)
        weight = f"{name}.weight"
        self._parameters[weight] = Parameter(weight, p.weightShape, "conv", group, p.fanIn)
        return self._add("conv2d", (x,), outChannels, name, (weight,), {"conv": p})

    def batchNorm(self, x: int, name: str = "bn", group: str = "backbone") -> int:
        name = self._uniqueName(name)
        channels = self.channels(x)
        gamma, beta = f"{name}.weight", f"{name}.bias"
        self._parameters[gamma] = Parameter(gamma, (channels,), "bn_weight", group)
        self._parameters[beta]  = Parameter(beta, (channels,), "bn_bias", group)
        self._buffers[name] = BatchNormBuffers(channels)
        return self._add("batch_norm", (x,), channels, name, (gamma, beta))

    def relu(self, x: int, name: str = "relu") -> int:
        return self._add("relu", (x,), self.channels(x), self._uniqueName(name))

    def bnReluConv(
        self,
        x:           int,
        outChannels: int,
        kernel:      int,
        name:        str,
        stride:      int = 1,
        dilation:    int = 1,
        groups:      int = 1,
        group:       str = "backbone",
    ) -> int:
        """Pre-activation convolution: BN, ReLU, then convolution"""
        normalized = self.batchNorm(x, f"{name}.bn", group)
        activated  = self.relu(normalized, f"{name}.relu")
        return self.conv(activated, outChannels, kernel, stride, dilation=dilation, groups=groups, name=f"{name}.conv", group=group)

    def add(self, a: int, b: int, name: str = "add") -> int:
        if self.channels(a) != self.channels(b):
            raise ShapeError(f"Cannot add {self.channels(a)} channels to {self.channels(b)} channels")
        return self._add("add", (a, b), self.channels(a), self._uniqueName(name))

    def concat(self, xs: Sequence[int], name: str = "cat") -> int:
        return self._add("concat", tuple(xs), sum(self.channels(x) for x in xs), self._uniqueName(name))

    def pool(self, x: int, kind: str, window: int, stride: int, padding: int = 0, name: str = "pool") -> int:
        attrs = {"kind": kind, "window": window, "stride": stride, "padding": padding}
        return self._add("pool", (x,), self.channels(x), self._uniqueName(name), attrs=attrs)

    def gridPool(self, x: int, rows: int, name: str = "grid") -> int:
        return self._add("grid_pool", (x,), self.channels(x), self._uniqueName(name), attrs={"rows": rows})

    def resize(
        self,
        x:           int,
        like:        Optional[int] = None,
        scale:       Optional[int] = None,
        expectScale: Optional[int] = None,
        name:        str           = "resize",
    ) -> int:
        """Bilinear resize of ``x``, either to the spatial size of node ``like`` or by ``scale``.\n
        With ``expectScale``, the target must be exactly that multiple of the input size."""
        if (like is None) == (scale is None):
            raise ValueError("Exactly one of like and scale must be given")
        inputs = (x,) if like is None else (x, like)
        attrs = {"scale": scale, "expectScale": expectScale}
        return self._add("resize", inputs, self.channels(x), self._uniqueName(name), attrs=attrs)

    def padChannels(self, x: int, channels: int, name: str = "pad") -> int:
        return self._add("pad_channels", (x,), channels, self._uniqueName(name), attrs={"channels": channels})

    def output(self, name: str, index: int) -> None:
        if name in self._outputs:
            raise LdnError(f"Duplicate output name {name!r}")
        self._outputs[name] = index

    def build(self) -> Network:
        if not self._outputs:
            raise LdnError("A network needs at least one output")
        return Network(self._nodes, self._parameters, self._buffers, dict(self._outputs), self._dtype)


# ==================================================================================================
# Operations
# ==================================================================================================


Shape = Tuple[int, ...]
Grads = Tuple[List[Optional[Tensor]], List[Tensor]]


@dataclass(frozen=True)
class _OpDef:
    forward:  Callable[[Network, Node, List[Tensor], List[Tensor], Optional[dict]], Tuple[Tensor, Optional[dict]]]
    backward: Callable[[Network, Node, List[Tensor], Tensor, List[Tensor], Optional[dict], Tensor, List[bool]], Grads]
    shape:    Callable[[Node, List[Shape]], Shape]
    #: Inputs that receive gradients. ``None`` means all of them.
    gradInputs: Optional[Tuple[int, ...]] = None


def _convForward(network, node, inputs, params, replay):
    return kernels.conv2d(inputs[0], params[0], node.attrs["conv"]), None

def _convBackward(network, node, inputs, output, params, ctx, gy, needs):
    gx, gw = kernels.conv2dBackward(inputs[0], params[0], node.attrs["conv"], gy, needInputGrad=needs[0])
    return [gx], [gw]

def _convShape(node, shapes):
    n, _, h, w = shapes[0]
    p: ConvParams = node.attrs["conv"]
    return (n, p.outChannels, *p.outSpatial(h, w))


def _batchNormForward(network, node, inputs, params, replay):
    buffers = network.buffers[node.name]
    if replay is not None:
        result = kernels.batchNorm(
            inputs[0], params[0], params[1], None, None, replay["mode"],
            epsilon=network.epsilon, stats=(replay["mean"], replay["var"]),
        )
        return result.output, replay
    mode = network.mode
    result = kernels.batchNorm(
        inputs[0], params[0], params[1], buffers.runningMean, buffers.runningVar, mode,
        momentum=network.momentum, epsilon=network.epsilon,
    )
    if mode == "train" and result.runningMean is not None:
        buffers.runningMean = result.runningMean
        buffers.runningVar  = result.runningVar
    elif mode == "accumulate":
        buffers.accumulate(result.count, result.total, result.totalSq)
    return result.output, {"mode": mode, "mean": result.mean, "var": result.var}

def _batchNormBackward(network, node, inputs, output, params, ctx, gy, needs):
    gx, gGamma, gBeta = kernels.batchNormBackward(inputs[0], params[0], ctx["mean"], ctx["var"], gy, ctx["mode"], network.epsilon)
    return [gx], [gGamma, gBeta]


def _reluForward(network, node, inputs, params, replay):
    return kernels.relu(inputs[0]), None

def _reluBackward(network, node, inputs, output, params, ctx, gy, needs):
    return [kernels.reluBackward(output, gy)], []


def _addForward(network, node, inputs, params, replay):
    return kernels.add(inputs[0], inputs[1]), None

def _addBackward(network, node, inputs, output, params, ctx, gy, needs):
    return [gy, gy], []

def _addShape(node, shapes):
    if shapes[0] != shapes[1]:
        raise ShapeError(f"Node {node.name} adds shapes {shapes[0]} and {shapes[1]}")
    return shapes[0]


def _concatForward(network, node, inputs, params, replay):
    return kernels.concatChannels(inputs), None

def _concatBackward(network, node, inputs, output, params, ctx, gy, needs):
    return list(kernels.splitChannels(gy, [t.shape[1] for t in inputs])), []

def _concatShape(node, shapes):
    n, _, h, w = shapes[0]
    for shape in shapes[1:]:
        if (shape[0], *shape[2:]) != (n, h, w):
            raise ShapeError(f"Node {node.name} concatenates shapes {shapes[0]} and {shape}")
    return (n, sum(s[1] for s in shapes), h, w)


def _poolForward(network, node, inputs, params, replay):
    a = node.attrs
    return kernels.pool(inputs[0], a["kind"], a["window"], a["stride"], a["padding"]), None

def _poolBackward(network, node, inputs, output, params, ctx, gy, needs):
    a = node.attrs
    return [kernels.poolBackward(inputs[0], a["kind"], a["window"], a["stride"], a["padding"], gy)], []

def _poolShape(node, shapes):
    n, c, h, w = shapes[0]
    a = node.attrs
    outH = kernels.outExtent(h, a["window"], a["stride"], a["padding"])
    outW = kernels.outExtent(w, a["window"], a["stride"], a["padding"])
    if outH < 1 or outW < 1:
        raise ShapeError(f"Node {node.name} pools a {h}x{w} input to {outH}x{outW}")
    return (n, c, outH, outW)


def _gridRows(node: Node, height: int) -> int:
    rows = node.attrs["rows"]
    if rows > height:
        logger.debug("Clamping %i grid rows of %s to the feature height %i", rows, node.name, height)
    return min(rows, height)

def _gridForward(network, node, inputs, params, replay):
    return kernels.gridAvgPool(inputs[0], _gridRows(node, inputs[0].shape[2])), None

def _gridBackward(network, node, inputs, output, params, ctx, gy, needs):
    return [kernels.gridAvgPoolBackward(inputs[0], _gridRows(node, inputs[0].shape[2]), gy)], []

def _gridShape(node, shapes):
    n, c, h, w = shapes[0]
    return (n, c, *kernels.gridShape(h, w, _gridRows(node, h)))


def _resizeTarget(node: Node, shapes: List[Shape]) -> Tuple[int, int]:
    h, w = shapes[0][2:]
    if node.attrs["scale"] is not None:
        target = (h * node.attrs["scale"], w * node.attrs["scale"])
    else:
        target = tuple(shapes[1][2:])
    expect = node.attrs["expectScale"]
    if expect is not None and target != (h * expect, w * expect):
        raise ShapeError(
            f"Node {node.name} expects a target exactly {expect}x its {h}x{w} input, "
            f"got {target[0]}x{target[1]}"
        )
    return target

def _resizeForward(network, node, inputs, params, replay):
    outH, outW = _resizeTarget(node, [t.shape for t in inputs])
    return kernels.bilinearResize(inputs[0], outH, outW), None

def _resizeBackward(network, node, inputs, output, params, ctx, gy, needs):
    outH, outW = output.shape[2:]
    return [kernels.bilinearResizeBackward(inputs[0], outH, outW, gy)] + [None] * (len(inputs) - 1), []

def _resizeShape(node, shapes):
    return (*shapes[0][:2], *_resizeTarget(node, shapes))


def _padForward(network, node, inputs, params, replay):
    return kernels.padChannels(inputs[0], node.attrs["channels"]), None

def _padBackward(network, node, inputs, output, params, ctx, gy, needs):
    return [kernels.padChannelsBackward(gy, inputs[0].shape[1])], []

def _padShape(node, shapes):
    n, _, h, w = shapes[0]
    return (n, node.attrs["channels"], h, w)


def _sameShape(node, shapes):
    return shapes[0]


def _noForward(network, node, inputs, params, replay):
    raise LdnError("Input nodes are not executed")

def _noBackward(network, node, inputs, output, params, ctx, gy, needs):
    return [], []


OPS: Dict[str, _OpDef] = {
    "input":        _OpDef(_noForward,        _noBackward,        _sameShape),
    "conv2d":       _OpDef(_convForward,      _convBackward,      _convShape),
    "batch_norm":   _OpDef(_batchNormForward, _batchNormBackward, _sameShape),
    "relu":         _OpDef(_reluForward,      _reluBackward,      _sameShape),
    "add":          _OpDef(_addForward,       _addBackward,       _addShape),
    "concat":       _OpDef(_concatForward,    _concatBackward,    _concatShape),
    "pool":         _OpDef(_poolForward,      _poolBackward,      _poolShape),
    "grid_pool":    _OpDef(_gridForward,      _gridBackward,      _gridShape),
    "resize":       _OpDef(_resizeForward,    _resizeBackward,    _resizeShape, gradInputs=(0,)),
    "pad_channels": _OpDef(_padForward,       _padBackward,       _padShape),
}


def _runNode(network: Network, node: Node, values: Mapping[int, Tensor], replay: Optional[dict]) -> Tuple[Tensor, Optional[dict]]:
    inputs = [values[j] for j in node.inputs]
    params = [network.parameters[name].tensor() for name in node.params]
    return OPS[node.op].forward(network, node, inputs, params, replay)


def inferShapes(network: Network, inputShape: Sequence[int], outputs: Optional[Sequence[str]] = None) -> Dict[int, Shape]:
    """Output shape of every node needed for ``outputs``, for an input of ``inputShape``.\n
    Nothing is executed and no parameter needs to be initialized."""
    order = _ancestors(network, _outputIndices(network, outputs))
    shapes: Dict[int, Shape] = {}
    for i in order:
        node = network.nodes[i]
        if node.op == "input":
            shapes[i] = tuple(inputShape)
        else:
            shapes[i] = OPS[node.op].shape(node, [shapes[j] for j in node.inputs])
    return shapes


# ==================================================================================================
# Checkpoint policies
# ==================================================================================================


#: Scope kinds forming recomputation segments, per named policy variant, in table order.
POLICY_VARIANTS: Dict[str, Tuple[str, ...]] = {
    "none":                       (),
    "conv3x3_only":               ("conv3x3",),
    "cat_proj":                   ("cat_proj",),
    "cat_proj_and_3x3":           ("cat_proj", "conv3x3"),
    "block_stem_td_up":           ("block", "stem", "td", "tu"),
    "unit_whole":                 ("unit",),
    "unit_whole_plus_stem_td_up": ("unit", "stem", "td", "tu"),
}

#: Human-readable row labels of the named variants.
POLICY_LABELS: Dict[str, str] = {
    "none":                       "baseline - no ckpt",
    "conv3x3_only":               "(3x3)",
    "cat_proj":                   "(cat 1x1)",
    "cat_proj_and_3x3":           "(cat 1x1) (3x3)",
    "block_stem_td_up":           "(block) (stem) (TD) (UP)",
    "unit_whole":                 "(cat 1x1 3x3)",
    "unit_whole_plus_stem_td_up": "(cat 1x1 3x3) (stem) (TD) (UP)",
}

CUSTOM_PREFIX = "custom:"


@dataclass(frozen=True)
class CheckpointPolicy:
    """Which checkpoint scopes become recomputation segments.\n
    Named variants select fixed scope kinds (see :data:`POLICY_VARIANTS`); the ``custom`` variant
    selects ``customTags``. When selected scopes nest, the outermost one forms the segment."""
    variant:    str             = "none"
    customTags: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.variant == "custom":
            if not self.customTags:
                raise PolicyError("A custom checkpoint policy needs at least one tag")
            unknown = [tag for tag in self.customTags if tag not in SCOPE_KINDS]
            if unknown:
                raise PolicyError(f"Unknown checkpoint tags {unknown}; known tags: {', '.join(SCOPE_KINDS)}")
        elif self.variant not in POLICY_VARIANTS:
            raise PolicyError(f"Unknown checkpoint policy {self.variant!r}; known policies: {', '.join(POLICY_VARIANTS)}")
        elif self.customTags:
            raise PolicyError(f"Policy {self.variant!r} does not take custom tags")

    @staticmethod
    def parse(value: Union[str, CheckpointPolicy, None]) -> CheckpointPolicy:
        """Parses a policy name such as ``"unit_whole"`` or ``"custom:unit,td"``"""
        if isinstance(value, CheckpointPolicy):
            return value
        if value is None:
            return CheckpointPolicy()
        if value.startswith(CUSTOM_PREFIX):
            tags = tuple(tag.strip() for tag in value[len(CUSTOM_PREFIX):].split(",") if tag.strip())
            return CheckpointPolicy("custom", tags)
        return CheckpointPolicy(value)

    @staticmethod
    def tableOrder() -> List[CheckpointPolicy]:
        """All named variants, from the cheapest to recompute to the most memory-saving"""
        return [CheckpointPolicy(variant) for variant in POLICY_VARIANTS]

    @property
    def segmentKinds(self) -> FrozenSet[str]:
        return frozenset(self.customTags if self.variant == "custom" else POLICY_VARIANTS[self.variant])

    @property
    def name(self) -> str:
        return CUSTOM_PREFIX + ",".join(self.customTags) if self.variant == "custom" else self.variant

    @property
    def label(self) -> str:
        return POLICY_LABELS.get(self.variant, f"custom ({', '.join(self.customTags)})")

    def validateFor(self, network: Network) -> None:
        """Raises a :class:`.PolicyError` if the policy selects scopes the network does not have.\n
        Custom policies need every tag to be present; named variants need at least one."""
        kinds = self.segmentKinds
        if not kinds:
            return
        present = network.scopeKinds()
        missing = sorted(kinds - present)
        if self.variant == "custom" and missing:
            raise PolicyError(f"Checkpoint tags {missing} do not occur in the model")
        if not kinds & present:
            raise PolicyError(f"Policy {self.name} selects {sorted(kinds)}, none of which occur in the model")


# ==================================================================================================
# Planning
# ==================================================================================================


@dataclass
class ExecutionPlan:
    """What to execute for a set of outputs, and what to keep under a policy.\n
    ``segments`` hold node indices in recording order; the last node of every segment is cached."""
    order:        List[int]
    outputs:      Dict[str, int]
    segmentOf:    Dict[int, int]
    segments:     List[List[int]]
    cached:       FrozenSet[int]
    forwardUses:  Dict[int, int]
    requiresGrad: Dict[int, bool]

    def interior(self, segment: int) -> List[int]:
        return self.segments[segment][:-1]


def _outputIndices(network: Network, outputs: Optional[Sequence[str]]) -> Dict[str, int]:
    names = list(outputs) if outputs is not None else list(network.outputs)
    unknown = [name for name in names if name not in network.outputs]
    if unknown:
        raise LdnError(f"Unknown outputs {unknown}; the network has {sorted(network.outputs)}")
    return {name: network.outputs[name] for name in names}


def _ancestors(network: Network, wanted: Mapping[str, int]) -> List[int]:
    needed = {0}
    stack = list(wanted.values())
    while stack:
        i = stack.pop()
        if i in needed:
            continue
        needed.add(i)
        stack.extend(network.nodes[i].inputs)
    return sorted(needed)


def planExecution(
    network: Network,
    policy:  Union[CheckpointPolicy, str, None] = None,
    outputs: Optional[Sequence[str]]           = None,
) -> ExecutionPlan:
    """Decides which nodes run, which segments they form and which outputs stay cached"""
    policy = CheckpointPolicy.parse(policy)
    policy.validateFor(network)
    wanted = _outputIndices(network, outputs)
    order  = _ancestors(network, wanted)
    kinds  = policy.segmentKinds

    segmentOf: Dict[int, int] = {}
    segments:  List[List[int]] = []
    keys:      Dict[Tuple[str, str], int] = {}
    for i in order:
        selected = next((scope for scope in network.nodes[i].scopes if scope[0] in kinds), None)
        if selected is None:
            continue
        if selected not in keys:
            keys[selected] = len(segments)
            segments.append([])
        segmentOf[i] = keys[selected]
        segments[keys[selected]].append(i)

    inOrder = set(order)
    for i in order:
        for j in network.nodes[i].inputs:
            segment = segmentOf.get(j)
            if segment is not None and segmentOf.get(i) != segment and j != segments[segment][-1]:
                raise CheckpointError(
                    f"Node {network.nodes[i].name} reads {network.nodes[j].name}, an interior value of "
                    f"segment {network.nodes[segments[segment][0]].scopes}"
                )
    for name, i in wanted.items():
        segment = segmentOf.get(i)
        if segment is not None and i != segments[segment][-1]:
            raise CheckpointError(f"Output {name} is an interior value of a recomputation segment")

    cached = frozenset(i for i in order if i not in segmentOf or i == segments[segmentOf[i]][-1])

    forwardUses = {i: sum(1 for c in network.consumers(i) if c in inOrder) for i in order}

    requiresGrad: Dict[int, bool] = {}
    for i in order:
        node = network.nodes[i]
        gradInputs = OPS[node.op].gradInputs
        inputs = node.inputs if gradInputs is None else [node.inputs[k] for k in gradInputs]
        requiresGrad[i] = bool(node.params) or any(requiresGrad[j] for j in inputs)

    return ExecutionPlan(order, wanted, segmentOf, segments, cached, forwardUses, requiresGrad)


# ==================================================================================================
# Memory tracking
# ==================================================================================================


class MemoryTracker:
    """Counts live bytes of activation, recomputation and gradient buffers.\n
    Peaks are recorded per phase at every allocation. Parameters are not tracked."""

    def __init__(self) -> None:
        self.phase = "forward"
        self._live: Dict[Hashable, int] = {}
        self._liveBytes = 0
        self._peaks = {"forward": 0, "backward": 0}
        self._recomputeLive: Dict[int, int] = {}
        self._maxConcurrentSegments = 0

    @property
    def liveBytes(self) -> int:
        return self._liveBytes

    @property
    def peakForwardBytes(self) -> int:
        return self._peaks["forward"]

    @property
    def peakBackwardBytes(self) -> int:
        return self._peaks["backward"]

    @property
    def peakTotalBytes(self) -> int:
        return max(self._peaks.values())

    @property
    def maxConcurrentSegments(self) -> int:
        """Largest number of segments whose recomputed values were live at the same time"""
        return self._maxConcurrentSegments

    def _bump(self) -> None:
        if self._liveBytes > self._peaks[self.phase]:
            self._peaks[self.phase] = self._liveBytes

    def allocate(self, key: Hashable, nbytes: int) -> None:
        if key in self._live:
            raise LdnError(f"Buffer {key} is already live")
        self._live[key] = nbytes
        self._liveBytes += nbytes
        self._bump()
        if isinstance(key, tuple) and key[0] == "recompute":
            segment = key[1]
            self._recomputeLive[segment] = self._recomputeLive.get(segment, 0) + 1
            self._maxConcurrentSegments = max(self._maxConcurrentSegments, len(self._recomputeLive))

    def release(self, key: Hashable) -> None:
        self._liveBytes -= self._live.pop(key)
        if isinstance(key, tuple) and key[0] == "recompute":
            segment = key[1]
            self._recomputeLive[segment] -= 1
            if self._recomputeLive[segment] == 0:
                del self._recomputeLive[segment]

    def replace(self, key: Hashable, nbytes: int) -> None:
        """Allocates a new buffer for ``key`` while the old one is still live, then frees the old one"""
        old = self._live[key]
        self._liveBytes += nbytes
        self._bump()
        self._live[key] = nbytes
        self._liveBytes -= old


@dataclass
class MemoryReport:
    """Measured memory and time of one traced training step"""
    policy:                     str
    label:                      str
    batch:                      int
    peakForwardBytes:           int
    peakBackwardBytes:          int
    peakTotalBytes:             int
    recomputeKernelInvocations: int
    wallTimeForward:            float
    wallTimeTotal:              float
    parameterBytes:             int

    CSV_HEADER = (
        "policy", "label", "batch", "peak_forward_bytes", "peak_backward_bytes", "peak_total_bytes",
        "peak_total_mb", "recompute_kernel_invocations", "wall_time_forward", "wall_time_total", "fps",
        "parameter_bytes",
    )

    def __post_init__(self) -> None:
        if self.peakTotalBytes < max(self.peakForwardBytes, self.peakBackwardBytes):
            raise LdnError("Total peak must be at least the peak of each phase")

    @property
    def peakTotalMB(self) -> float:
        return self.peakTotalBytes / MEBIBYTE

    @property
    def fps(self) -> float:
        """Training images per second"""
        return self.batch / self.wallTimeTotal if self.wallTimeTotal > 0 else float("inf")

    def maxBatch(self, budgetBytes: int) -> int:
        """Largest batch whose activations fit in ``budgetBytes`` next to the parameters.\n
        Activation memory is extrapolated linearly from the measured batch."""
        perImage = self.peakTotalBytes / self.batch
        available = budgetBytes - self.parameterBytes
        return max(0, int(available // perImage)) if perImage > 0 else 0

    def toKeyValue(self) -> str:
        """Plain-text report, one ``key=value`` per line, in a fixed order"""
        return "\n".join(f"{key}={value}" for key, value in zip(self.CSV_HEADER, self.csvRow()))

    def csvRow(self) -> List[str]:
        return [
            self.policy, self.label, str(self.batch), str(self.peakForwardBytes), str(self.peakBackwardBytes),
            str(self.peakTotalBytes), f"{self.peakTotalMB:.3f}", str(self.recomputeKernelInvocations),
            f"{self.wallTimeForward:.6f}", f"{self.wallTimeTotal:.6f}", f"{self.fps:.4f}", str(self.parameterBytes),
        ]


# ==================================================================================================
# Execution
# ==================================================================================================


def _checkImage(network: Network, image: Tensor) -> None:
    image.requireRank(4)
    if image.shape[1] != network.inputChannels:
        raise ShapeError(f"Input shape {image.shape} does not have the {network.inputChannels} channels the network expects")
    if image.dtype != network.dtype:
        raise DTypeError(f"Input dtype {image.dtype} does not match the network dtype {network.dtype}")
    h, w = image.shape[2:]
    if h % network.inputDivisor or w % network.inputDivisor:
        raise ShapeError(f"Input size {h}x{w} is not divisible by {network.inputDivisor}")


class Trace:
    """Values kept by a traced forward pass, consumed by exactly one :func:`backward`.\n
    A trace is owned by a single training step and must not be shared."""

    def __init__(self, network: Network, plan: ExecutionPlan, policy: CheckpointPolicy, tracker: MemoryTracker) -> None:
        self.network  = network
        self.plan     = plan
        self.policy   = policy
        self.tracker  = tracker
        self.consumed = False
        self.recomputeKernelInvocations = 0
        self.wallTimeForward  = 0.0
        self.wallTimeBackward = 0.0
        self.batch = 0
        self._values:    Dict[int, Tensor]   = {}
        self._valueKeys: Dict[int, Hashable] = {}
        self._contexts:  Dict[int, Optional[dict]] = {}

    @property
    def cachedIndices(self) -> List[int]:
        """Nodes whose values are currently held by the trace"""
        return sorted(self._values)

    def value(self, index: int) -> Tensor:
        return self._values[index]

    def _store(self, index: int, value: Tensor, key: Hashable) -> None:
        self._values[index] = value
        self._valueKeys[index] = key
        self.tracker.allocate(key, value.byteSize)

    def _release(self, index: int) -> None:
        if index in self._values:
            del self._values[index]
            self.tracker.release(self._valueKeys.pop(index))

    def _runForward(self, image: Tensor) -> None:
        start = time.perf_counter()
        network, plan = self.network, self.plan
        remaining = dict(plan.forwardUses)
        self.tracker.phase = "forward"
        self._store(0, image, ("value", 0))
        for i in plan.order:
            node = network.nodes[i]
            if node.op == "input":
                continue
            out, ctx = _runNode(network, node, self._values, None)
            self._store(i, out, ("value", i))
            self._contexts[i] = ctx
            for j in dict.fromkeys(node.inputs):
                remaining[j] -= 1
                if remaining[j] == 0 and j not in plan.cached:
                    self._release(j)
        self.wallTimeForward = time.perf_counter() - start

    def _recompute(self, segment: int) -> None:
        interior = self.plan.interior(segment)
        if interior:
            logger.debug("Recomputing segment %i (%i nodes)", segment, len(interior))
        for j in interior:
            node = self.network.nodes[j]
            out, _ = _runNode(self.network, node, self._values, self._contexts[j])
            self._store(j, out, ("recompute", segment, j))
            self.recomputeKernelInvocations += 1

    def report(self, batch: Optional[int] = None) -> MemoryReport:
        """Memory and time figures of this trace"""
        return MemoryReport(
            policy                     = self.policy.name,
            label                      = self.policy.label,
            batch                      = batch if batch is not None else self.batch,
            peakForwardBytes           = self.tracker.peakForwardBytes,
            peakBackwardBytes          = self.tracker.peakBackwardBytes,
            peakTotalBytes             = self.tracker.peakTotalBytes,
            recomputeKernelInvocations = self.recomputeKernelInvocations,
            wallTimeForward            = self.wallTimeForward,
            wallTimeTotal              = self.wallTimeForward + self.wallTimeBackward,
            parameterBytes             = self.network.parameterBytes(),
        )


def traceForward(
    network: Network,
    image:   TensorLike,
    policy:  Union[CheckpointPolicy, str, None] = None,
    outputs: Optional[Sequence[str]]           = None,
    tracker: Optional[MemoryTracker]           = None,
) -> Tuple[Dict[str, Tensor], Trace]:
    """Runs the forward pass, keeping the values ``policy`` marks as cached.\n
    ``outputs`` defaults to the network's training outputs. Returns the output tensors by name and
    the trace to pass to :func:`backward`."""
    policy = CheckpointPolicy.parse(policy)
    image  = asTensor(image)
    _checkImage(network, image)
    plan  = planExecution(network, policy, outputs if outputs is not None else network.trainingOutputs)
    trace = Trace(network, plan, policy, tracker or MemoryTracker())
    trace.batch = image.shape[0]
    trace._runForward(image)
    return {name: trace.value(i) for name, i in plan.outputs.items()}, trace


def _accumulate(grads: Dict[int, Tensor], tracker: MemoryTracker, index: int, grad: Tensor) -> None:
    existing = grads.get(index)
    if existing is None:
        grads[index] = grad
        tracker.allocate(("grad", index), grad.byteSize)
    else:
        grads[index] = kernels.add(existing, grad)
        tracker.replace(("grad", index), grads[index].byteSize)


def backward(trace: Trace, lossGrads: Mapping[str, TensorLike]) -> Dict[str, Tensor]:
    """Reverse-mode pass through ``trace``, seeded with the loss gradient of each named output.\n
    Each recomputation segment is re-executed exactly once, in reverse segment order, right before
    its nodes are differentiated; every value and gradient is released right after the backward of
    the node that produced it. Returns the gradient of every parameter of the executed nodes."""
    if trace.consumed:
        raise TraceConsumedError("This trace was already consumed by a backward pass")
    trace.consumed = True
    start = time.perf_counter()
    network, plan, tracker = trace.network, trace.plan, trace.tracker
    tracker.phase = "backward"

    grads: Dict[int, Tensor] = {}
    for name, grad in lossGrads.items():
        if name not in plan.outputs:
            raise LdnError(f"No traced output named {name!r}")
        index = plan.outputs[name]
        grad = asTensor(grad)
        if grad.shape != trace.value(index).shape or grad.dtype != trace.value(index).dtype:
            raise ShapeError(f"Loss gradient for {name} has shape {grad.shape}, expected {trace.value(index).shape}")
        _accumulate(grads, tracker, index, grad)

    paramGrads: Dict[str, Tensor] = {}
    for i in reversed(plan.order):
        segment = plan.segmentOf.get(i)
        if segment is not None and i == plan.segments[segment][-1]:
            trace._recompute(segment)
        node = network.nodes[i]
        gy = grads.get(i)
        if gy is not None and node.op != "input":
            op = OPS[node.op]
            needs = [plan.requiresGrad[j] for j in node.inputs]
            inputs = [trace.value(j) for j in node.inputs]
            params = [network.parameters[name].tensor() for name in node.params]
            inputGrads, nodeParamGrads = op.backward(network, node, inputs, trace.value(i), params, trace._contexts.get(i), gy, needs)
            for j, grad, need in zip(node.inputs, inputGrads, needs):
                if grad is not None and need:
                    _accumulate(grads, tracker, j, grad)
            for name, grad in zip(node.params, nodeParamGrads):
                paramGrads[name] = grad
        if gy is not None:
            del grads[i]
            tracker.release(("grad", i))
        trace._release(i)

    for i in plan.order:
        for name in network.nodes[i].params:
            if name not in paramGrads:
                p = network.parameters[name]
                paramGrads[name] = Tensor.zeros(p.shape, network.dtype)
    trace.wallTimeBackward = time.perf_counter() - start
    return paramGrads


def runForward(network: Network, image: TensorLike, outputs: Optional[Sequence[str]] = None) -> Dict[str, Tensor]:
    """Untraced forward pass: every value is dropped as soon as its last consumer ran.\n
    ``outputs`` defaults to the network's inference output."""
    image = asTensor(image)
    _checkImage(network, image)
    plan = planExecution(network, None, outputs if outputs is not None else [network.inferenceOutput])
    keep = set(plan.outputs.values())
    remaining = dict(plan.forwardUses)
    values: Dict[int, Tensor] = {0: image}
    for i in plan.order:
        node = network.nodes[i]
        if node.op == "input":
            continue
        values[i], _ = _runNode(network, node, values, None)
        for j in dict.fromkeys(node.inputs):
            remaining[j] -= 1
            if remaining[j] == 0 and j not in keep:
                del values[j]
    return {name: values[i] for name, i in plan.outputs.items()}


def uniformLossGrads(outputs: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    """Gradient of the mean of every output, a cheap stand-in loss for memory measurements"""
    return {name: Tensor.full(t.shape, 1.0 / t.numel, t.dtype) for name, t in outputs.items()}


def measurePeak(
    network:  Network,
    image:    TensorLike,
    policy:   Union[CheckpointPolicy, str, None] = None,
    lossGrad: Optional[Callable[[Dict[str, Tensor]], Mapping[str, TensorLike]]] = None,
) -> MemoryReport:
    """Runs one traced forward and backward pass and reports peak live bytes and wall time.\n
    ``lossGrad`` maps the outputs to their loss gradients; by default every training output gets
    the gradient of its mean. Batchnorm buffers are restored afterwards."""
    policy = CheckpointPolicy.parse(policy)
    snapshot = network.snapshotBuffers()
    try:
        outputs, trace = traceForward(network, image, policy)
        backward(trace, (lossGrad or uniformLossGrads)(outputs))
    finally:
        network.restoreBuffers(snapshot)
    report = trace.report(asTensor(image).shape[0])
    logger.info(
        "%s: peak %.1f MB (forward %.1f MB), %i recomputed kernels, %.3f s",
        policy.label, report.peakTotalMB, report.peakForwardBytes / MEBIBYTE,
        report.recomputeKernelInvocations, report.wallTimeTotal,
    )
    return report
