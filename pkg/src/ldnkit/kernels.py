"""Forward numeric kernels and their analytic gradients.

Every kernel is a pure function of its :class:`.Tensor` arguments and returns fresh tensors.
Convolutions and pooling gather their receptive fields with an im2col layout and reduce with
:func:`numpy.matmul`; the reduction order of each output element only depends on the shapes involved,
so repeated calls on equal inputs give bitwise equal results.

None of the convolutions has a bias term: every convolution in the networks is followed by
batchnorm or feeds a sum, and parameter counts only include convolution weights.
"""


from __future__ import annotations

from typing import List, Optional, Sequence, Tuple
from dataclasses import dataclass
import logging

import numpy as np
from scipy.special import log_softmax, softmax
from typing_extensions import Literal

from .exceptions import ShapeError, StatisticsError
from .tensor import Tensor, TensorLike, asTensor
from .utils import roundHalfUp


logger = logging.getLogger(__name__)


#: Batchnorm epsilon.
BN_EPSILON  = 1e-5
#: Weight of the new batch in the exponential moving average of batchnorm statistics.
BN_MOMENTUM = 0.1
#: Largest deviation from 1 allowed in the sum of an unmasked target distribution.
TARGET_SUM_TOLERANCE = 1e-6

PoolKind      = Literal["max", "avg"]
BatchNormMode = Literal["train", "eval", "accumulate"]

BATCH_NORM_MODES = ("train", "eval", "accumulate")


# ==================================================================================================
# Convolution
# ==================================================================================================


def outExtent(inExtent: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    """Returns ``floor((in + 2*padding - dilation*(kernel-1) - 1) / stride) + 1``"""
    return (inExtent + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


@dataclass(frozen=True)
class ConvParams:
    """Geometry of a 2D convolution.\n
    Weights have shape ``(outChannels, inChannels // groups, kernelH, kernelW)``."""
    inChannels:  int
    outChannels: int
    kernelH:     int
    kernelW:     int
    stride:      int = 1
    padding:     int = 0
    dilation:    int = 1
    groups:      int = 1

    def __post_init__(self) -> None:
        for name in ("inChannels", "outChannels", "kernelH", "kernelW", "stride", "dilation", "groups"):
            if getattr(self, name) < 1:
                raise ShapeError(f"Convolution {name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ShapeError(f"Convolution padding must be non-negative, got {self.padding}")
        if self.inChannels % self.groups or self.outChannels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide both in_channels={self.inChannels} and "
                f"out_channels={self.outChannels}"
            )

    @staticmethod
    def square(
        inChannels:  int,
        outChannels: int,
        kernel:      int,
        stride:      int           = 1,
        padding:     Optional[int] = None,
        dilation:    int           = 1,
        groups:      int           = 1,
    ) -> ConvParams:
        """Convolution with a ``kernel``x``kernel`` window.\n
        By default, the padding keeps the spatial size at stride 1."""
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        return ConvParams(inChannels, outChannels, kernel, kernel, stride, padding, dilation, groups)

    @property
    def weightShape(self) -> Tuple[int, int, int, int]:
        """Shape of the weight tensor"""
        return (self.outChannels, self.inChannels // self.groups, self.kernelH, self.kernelW)

    @property
    def fanIn(self) -> int:
        """Inputs contributing to one output element"""
        return self.inChannels // self.groups * self.kernelH * self.kernelW

    @property
    def isPointwise(self) -> bool:
        """Whether this is a 1x1 stride-1 convolution without padding"""
        return self.kernelH == 1 and self.kernelW == 1 and self.stride == 1 and self.padding == 0

    def outSpatial(self, height: int, width: int) -> Tuple[int, int]:
        """Output spatial extents for an input of ``height``x``width``"""
        outH = outExtent(height, self.kernelH, self.stride, self.padding, self.dilation)
        outW = outExtent(width,  self.kernelW, self.stride, self.padding, self.dilation)
        if outH < 1 or outW < 1:
            raise ShapeError(
                f"Convolution {self} produces a non-positive output extent ({outH}x{outW}) "
                f"for a {height}x{width} input"
            )
        return outH, outW

    def macs(self, outH: int, outW: int, batch: int = 1) -> int:
        """Fused multiply-adds of one application producing ``outH``x``outW`` outputs"""
        return batch * outH * outW * self.fanIn * self.outChannels


def _gatherWindows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, outH: int, outW: int) -> np.ndarray:
    """Returns the ``(N, C, kh, kw, outH, outW)`` receptive-field tensor of the padded input ``xp``"""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, outH, outW), dtype=xp.dtype)
    for i in range(kh):
        top = i * dilation
        for j in range(kw):
            left = j * dilation
            cols[:, :, i, j] = xp[:, :, top:top + stride*(outH - 1) + 1:stride, left:left + stride*(outW - 1) + 1:stride]
    return cols


def _scatterWindows(cols: np.ndarray, paddedShape: Tuple[int, ...], stride: int, dilation: int) -> np.ndarray:
    """Adjoint of :func:`_gatherWindows`: sums every window element back onto its input position"""
    _, _, kh, kw, outH, outW = cols.shape
    out = np.zeros(paddedShape, dtype=cols.dtype)
    for i in range(kh):
        top = i * dilation
        for j in range(kw):
            left = j * dilation
            out[:, :, top:top + stride*(outH - 1) + 1:stride, left:left + stride*(outW - 1) + 1:stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _convColumns(x: np.ndarray, p: ConvParams, outH: int, outW: int) -> np.ndarray:
    """Returns the ``(N, groups, fanIn, outH*outW)`` column matrix of ``x``"""
    n, c, h, w = x.shape
    if p.isPointwise:
        return x.reshape(n, p.groups, c // p.groups, h * w)
    cols = _gatherWindows(_pad(x, p.padding), p.kernelH, p.kernelW, p.stride, p.dilation, outH, outW)
    return cols.reshape(n, p.groups, p.fanIn, outH * outW)


def _checkConv(x: Tensor, w: Tensor, p: ConvParams) -> None:
    x.requireRank(4)
    if x.shape[1] != p.inChannels:
        raise ShapeError(f"Input shape {x.shape} does not have the {p.inChannels} channels expected by {p}")
    if w.shape != p.weightShape:
        raise ShapeError(f"Weight shape {w.shape} does not match input shape {x.shape}; expected {p.weightShape}")
    if w.dtype != x.dtype:
        raise ShapeError(f"Weight dtype {w.dtype} does not match input dtype {x.dtype}")


def conv2d(x: TensorLike, w: TensorLike, p: ConvParams) -> Tensor:
    """Cross-correlation of ``x`` with ``w`` (no kernel flip), with zero padding"""
    x, w = asTensor(x), asTensor(w)
    _checkConv(x, w, p)
    n, _, h, wd = x.shape
    outH, outW = p.outSpatial(h, wd)
    cols    = _convColumns(x.data, p, outH, outW)
    weights = w.data.reshape(p.groups, p.outChannels // p.groups, p.fanIn)
    out     = np.matmul(weights, cols)
    return Tensor(out.reshape(n, p.outChannels, outH, outW))


def conv2dBackward(
    x: TensorLike, w: TensorLike, p: ConvParams, gy: TensorLike, needInputGrad: bool = True
) -> Tuple[Optional[Tensor], Tensor]:
    """Returns the gradients of a :func:`conv2d` with respect to ``x`` and ``w``.\n
    The input gradient is skipped (``None``) when ``needInputGrad`` is False."""
    x, w, gy = asTensor(x), asTensor(w), asTensor(gy)
    _checkConv(x, w, p)
    n, c, h, wd = x.shape
    outH, outW = p.outSpatial(h, wd)
    if gy.shape != (n, p.outChannels, outH, outW):
        raise ShapeError(f"Output gradient shape {gy.shape} does not match output shape {(n, p.outChannels, outH, outW)}")

    og      = p.outChannels // p.groups
    cols    = _convColumns(x.data, p, outH, outW)
    g       = gy.data.reshape(n, p.groups, og, outH * outW)
    gw      = np.matmul(g, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    gwTensor = Tensor(gw.reshape(p.weightShape))
    if not needInputGrad:
        return None, gwTensor

    weights = w.data.reshape(p.groups, og, p.fanIn)
    gcols   = np.matmul(weights.transpose(0, 2, 1), g)
    if p.isPointwise:
        return Tensor(gcols.reshape(n, c, h, wd)), gwTensor
    gcols = gcols.reshape(n, c, p.kernelH, p.kernelW, outH, outW)
    paddedShape = (n, c, h + 2*p.padding, wd + 2*p.padding)
    gxp = _scatterWindows(gcols, paddedShape, p.stride, p.dilation)
    gx  = gxp[:, :, p.padding:p.padding + h, p.padding:p.padding + wd]
    return Tensor(gx), gwTensor


def depthwiseSeparableParams(channels: int, outChannels: int, dilation: int = 1) -> Tuple[ConvParams, ConvParams]:
    """Returns the depthwise 3x3 and pointwise 1x1 geometry of a separable convolution"""
    depthwise = ConvParams.square(channels, channels, 3, dilation=dilation, groups=channels)
    pointwise = ConvParams.square(channels, outChannels, 1)
    return depthwise, pointwise


def _checkSeparable(x: Tensor, wDw: Tensor, wPw: Tensor) -> None:
    x.requireRank(4)
    channels = x.shape[1]
    if wDw.shape != (channels, 1, 3, 3):
        raise ShapeError(f"Depthwise weights {wDw.shape} do not fit input {x.shape}; expected {(channels, 1, 3, 3)}")
    if wPw.ndim != 4 or wPw.shape[1:] != (channels, 1, 1):
        raise ShapeError(f"Pointwise weights {wPw.shape} do not fit the {channels} depthwise output channels")


def depthwiseSeparableConv3x3(x: TensorLike, wDw: TensorLike, wPw: TensorLike, dilation: int = 1) -> Tensor:
    """Per-channel 3x3 convolution followed by a 1x1 channel-mixing convolution"""
    x, wDw, wPw = asTensor(x), asTensor(wDw), asTensor(wPw)
    _checkSeparable(x, wDw, wPw)
    depthwise, pointwise = depthwiseSeparableParams(x.shape[1], wPw.shape[0], dilation)
    return conv2d(conv2d(x, wDw, depthwise), wPw, pointwise)


def depthwiseSeparableConv3x3Backward(
    x: TensorLike, wDw: TensorLike, wPw: TensorLike, gy: TensorLike, dilation: int = 1
) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns the gradients of :func:`depthwiseSeparableConv3x3` for ``x``, ``wDw`` and ``wPw``"""
    x, wDw, wPw = asTensor(x), asTensor(wDw), asTensor(wPw)
    _checkSeparable(x, wDw, wPw)
    depthwise, pointwise = depthwiseSeparableParams(x.shape[1], wPw.shape[0], dilation)
    mid = conv2d(x, wDw, depthwise)
    gmid, gwPw = conv2dBackward(mid, wPw, pointwise, gy)
    gx, gwDw   = conv2dBackward(x, wDw, depthwise, gmid)
    return gx, gwDw, gwPw


# ==================================================================================================
# Batchnorm
# ==================================================================================================


@dataclass
class BatchNormResult:
    """Output of :func:`batchNorm`.\n
    ``mean`` and ``var`` are the per-channel statistics the output was normalized with.
    In train mode, ``runningMean`` and ``runningVar`` hold the updated moving averages; in
    accumulate mode, ``count``, ``total`` and ``totalSq`` hold exact float64 sums over
    (batch, height, width)."""
    output:      Tensor
    mean:        np.ndarray
    var:         np.ndarray
    runningMean: Optional[np.ndarray] = None
    runningVar:  Optional[np.ndarray] = None
    count:       int                  = 0
    total:       Optional[np.ndarray] = None
    totalSq:     Optional[np.ndarray] = None


def _channelVector(value: TensorLike, channels: int, what: str) -> np.ndarray:
    array = asTensor(value).data
    if array.shape != (channels,):
        raise ShapeError(f"Batchnorm {what} has shape {array.shape}, expected ({channels},)")
    return array


def batchNorm(
    x:           TensorLike,
    gamma:       TensorLike,
    beta:        TensorLike,
    runningMean: Optional[TensorLike],
    runningVar:  Optional[TensorLike],
    mode:        BatchNormMode = "train",
    momentum:    float         = BN_MOMENTUM,
    epsilon:     float         = BN_EPSILON,
    stats:       Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> BatchNormResult:
    """Per-channel batch normalization followed by the affine ``gamma``/``beta`` transform.\n
    - ``train`` normalizes with the (biased) batch statistics over (batch, height, width) and
      returns moving averages updated with weight ``momentum`` on the new batch.
    - ``eval`` normalizes with the running statistics.
    - ``accumulate`` normalizes like ``train`` but leaves the moving averages alone and returns exact
      sums instead, for recomputing the statistics over a whole dataset.\n
    Passing ``stats`` replays a previous normalization with exactly those statistics and computes
    nothing else; recomputation relies on this."""
    x = asTensor(x)
    x.requireRank(4)
    if mode not in BATCH_NORM_MODES:
        raise ValueError(f"Unknown batchnorm mode {mode!r}")
    channels = x.shape[1]
    gammaArray = _channelVector(gamma, channels, "gamma")
    betaArray  = _channelVector(beta, channels, "beta")

    result = BatchNormResult(output=x, mean=np.empty(0), var=np.empty(0))
    if stats is not None:
        mean, var = stats
    elif mode == "eval":
        if runningMean is None or runningVar is None:
            raise StatisticsError("Batchnorm in eval mode requires initialized running statistics")
        mean = _channelVector(runningMean, channels, "running mean").astype(np.float64)
        var  = _channelVector(runningVar, channels, "running variance").astype(np.float64)
    else:
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var  = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        if mode == "train" and runningMean is not None and runningVar is not None:
            oldMean = _channelVector(runningMean, channels, "running mean").astype(np.float64)
            oldVar  = _channelVector(runningVar, channels, "running variance").astype(np.float64)
            result.runningMean = ((1 - momentum) * oldMean + momentum * mean).astype(x.dtype)
            result.runningVar  = ((1 - momentum) * oldVar  + momentum * var).astype(x.dtype)
        elif mode == "accumulate":
            result.count   = x.shape[0] * x.shape[2] * x.shape[3]
            result.total   = x.data.sum(axis=(0, 2, 3), dtype=np.float64)
            result.totalSq = np.square(x.data, dtype=np.float64).sum(axis=(0, 2, 3))

    invStd = 1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + epsilon)
    scale  = (gammaArray.astype(np.float64) * invStd).astype(x.dtype)
    center = np.asarray(mean).astype(x.dtype)
    out    = (x.data - center[None, :, None, None]) * scale[None, :, None, None] + betaArray.astype(x.dtype)[None, :, None, None]

    result.output = Tensor(out)
    result.mean   = np.asarray(mean)
    result.var    = np.asarray(var)
    return result


def batchNormBackward(
    x:       TensorLike,
    gamma:   TensorLike,
    mean:    np.ndarray,
    var:     np.ndarray,
    gy:      TensorLike,
    mode:    BatchNormMode = "train",
    epsilon: float         = BN_EPSILON,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns the gradients of :func:`batchNorm` for ``x``, ``gamma`` and ``beta``.\n
    In ``train`` and ``accumulate`` mode the statistics depend on ``x``; in ``eval`` mode they are
    constants."""
    x, gy = asTensor(x), asTensor(gy)
    if gy.shape != x.shape:
        raise ShapeError(f"Output gradient shape {gy.shape} does not match input shape {x.shape}")
    channels   = x.shape[1]
    gammaArray = _channelVector(gamma, channels, "gamma")
    dtype      = x.dtype

    invStd = (1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + epsilon)).astype(dtype)
    center = np.asarray(mean).astype(dtype)
    xhat   = (x.data - center[None, :, None, None]) * invStd[None, :, None, None]
    g      = gy.data
    gbeta  = g.sum(axis=(0, 2, 3))
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    scale  = gammaArray.astype(dtype) * invStd

    if mode == "eval":
        gx = g * scale[None, :, None, None]
    else:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        gx = (scale / count)[None, :, None, None] * (
            count * g - gbeta[None, :, None, None] - xhat * ggamma[None, :, None, None]
        )
    return Tensor(gx.astype(dtype, copy=False)), Tensor(ggamma), Tensor(gbeta)


# ==================================================================================================
# Elementwise and structural
# ==================================================================================================


def relu(x: TensorLike) -> Tensor:
    """Elementwise ``max(0, x)``"""
    x = asTensor(x)
    return Tensor(np.maximum(x.data, x.dtype.type(0)))


def reluBackward(y: TensorLike, gy: TensorLike) -> Tensor:
    """Gradient of :func:`relu`, computed from its output ``y``"""
    y, gy = asTensor(y), asTensor(gy)
    if y.shape != gy.shape:
        raise ShapeError(f"Output gradient shape {gy.shape} does not match output shape {y.shape}")
    return Tensor(np.where(y.data > 0, gy.data, gy.dtype.type(0)))


def add(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise sum"""
    a, b = asTensor(a), asTensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"Cannot add tensors of shapes {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"Cannot add tensors of dtypes {a.dtype} and {b.dtype}")
    return Tensor(a.data + b.data)


def concatChannels(tensors: Sequence[TensorLike]) -> Tensor:
    """Concatenates activation tensors along the channel axis, preserving their order"""
    tensors = [asTensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("Cannot concatenate an empty list of tensors")
    first = tensors[0]
    first.requireRank(4)
    for t in tensors[1:]:
        t.requireRank(4)
        if (t.shape[0], *t.shape[2:]) != (first.shape[0], *first.shape[2:]) or t.dtype != first.dtype:
            raise ShapeError(f"Cannot concatenate shapes {first.shape} and {t.shape} along channels")
    return Tensor(np.concatenate([t.data for t in tensors], axis=1))


def splitChannels(gy: TensorLike, channels: Sequence[int]) -> List[Tensor]:
    """Splits a tensor along the channel axis into pieces of ``channels`` channels.\n
    This is the gradient of :func:`concatChannels`."""
    gy = asTensor(gy)
    if sum(channels) != gy.shape[1]:
        raise ShapeError(f"Cannot split {gy.shape} into channel groups {list(channels)}")
    bounds = np.cumsum([0, *channels])
    return [Tensor(gy.data[:, start:stop]) for start, stop in zip(bounds[:-1], bounds[1:])]


def padChannels(x: TensorLike, channels: int) -> Tensor:
    """Appends zero channels to ``x`` up to ``channels`` channels in total"""
    x = asTensor(x)
    x.requireRank(4)
    if channels < x.shape[1]:
        raise ShapeError(f"Cannot pad {x.shape} down to {channels} channels")
    extra = np.zeros((x.shape[0], channels - x.shape[1], *x.shape[2:]), dtype=x.dtype)
    return Tensor(np.concatenate([x.data, extra], axis=1))


def padChannelsBackward(gy: TensorLike, channels: int) -> Tensor:
    """Gradient of :func:`padChannels` for an input with ``channels`` channels"""
    return Tensor(asTensor(gy).data[:, :channels])


# ==================================================================================================
# Pooling
# ==================================================================================================


def _poolGeometry(x: Tensor, window: int, stride: int, padding: int) -> Tuple[int, int]:
    x.requireRank(4)
    if window < 1 or stride < 1:
        raise ShapeError(f"Pooling window and stride must be positive, got window={window}, stride={stride}")
    if padding < 0 or 2 * padding > window:
        raise ShapeError(f"Pooling padding {padding} must lie in [0, window/2] for window {window}")
    outH = outExtent(x.shape[2], window, stride, padding)
    outW = outExtent(x.shape[3], window, stride, padding)
    if outH < 1 or outW < 1:
        raise ShapeError(f"Pooling window {window} stride {stride} padding {padding} does not fit input {x.shape}")
    return outH, outW


def _validCounts(h: int, w: int, window: int, stride: int, padding: int, outH: int, outW: int) -> np.ndarray:
    ones = _pad(np.ones((1, 1, h, w)), padding)
    return _gatherWindows(ones, window, window, stride, 1, outH, outW).sum(axis=(2, 3))[0, 0]


def pool(x: TensorLike, kind: PoolKind, window: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed maximum or mean.\n
    Average pooling divides by the number of valid (non-padding) cells of each window."""
    x = asTensor(x)
    outH, outW = _poolGeometry(x, window, stride, padding)
    n, c, h, w = x.shape
    if kind == "max":
        cols = _gatherWindows(_pad(x.data, padding, -np.inf), window, window, stride, 1, outH, outW)
        return Tensor(cols.reshape(n, c, window * window, outH, outW).max(axis=2))
    if kind == "avg":
        cols   = _gatherWindows(_pad(x.data, padding), window, window, stride, 1, outH, outW)
        counts = _validCounts(h, w, window, stride, padding, outH, outW).astype(x.dtype)
        return Tensor(cols.sum(axis=(2, 3)) / counts)
    raise ValueError(f"Unknown pooling kind {kind!r}")


def poolBackward(x: TensorLike, kind: PoolKind, window: int, stride: int, padding: int, gy: TensorLike) -> Tensor:
    """Gradient of :func:`pool` with respect to ``x``.\n
    Max pooling routes each window's gradient to its first maximal element in row-major order."""
    x, gy = asTensor(x), asTensor(gy)
    outH, outW = _poolGeometry(x, window, stride, padding)
    n, c, h, w = x.shape
    if gy.shape != (n, c, outH, outW):
        raise ShapeError(f"Output gradient shape {gy.shape} does not match output shape {(n, c, outH, outW)}")
    paddedShape = (n, c, h + 2*padding, w + 2*padding)

    if kind == "max":
        cols    = _gatherWindows(_pad(x.data, padding, -np.inf), window, window, stride, 1, outH, outW)
        flat    = cols.reshape(n, c, window * window, outH, outW)
        argmax  = flat.argmax(axis=2)[:, :, None]
        gflat   = np.zeros_like(flat)
        np.put_along_axis(gflat, argmax, gy.data[:, :, None], axis=2)
        gcols   = gflat.reshape(cols.shape)
    elif kind == "avg":
        counts  = _validCounts(h, w, window, stride, padding, outH, outW).astype(x.dtype)
        share   = gy.data / counts
        gcols   = np.broadcast_to(share[:, :, None, None], (n, c, window, window, outH, outW))
    else:
        raise ValueError(f"Unknown pooling kind {kind!r}")

    gxp = _scatterWindows(gcols, paddedShape, stride, 1)
    return Tensor(gxp[:, :, padding:padding + h, padding:padding + w])


def gridPartition(extent: int, parts: int) -> np.ndarray:
    """Boundaries of ``parts`` balanced cells covering ``range(extent)``.\n
    Cell ``i`` spans ``[round(i*extent/parts), round((i+1)*extent/parts))`` with ties rounded up."""
    return np.array([roundHalfUp(i * extent / parts) for i in range(parts + 1)], dtype=np.int64)


def gridShape(height: int, width: int, rows: int) -> Tuple[int, int]:
    """Grid extents of :func:`gridAvgPool`: ``rows`` by ``max(1, round(rows*W/H))`` cells"""
    if rows < 1 or rows > height:
        raise ShapeError(f"Grid rows must lie in [1, {height}] for input height {height}, got {rows}")
    cols = max(1, roundHalfUp(rows * width / height))
    return rows, min(cols, width)


def gridAvgPool(x: TensorLike, rows: int) -> Tensor:
    """Averages ``x`` over a grid of ``rows`` rows of roughly square cells.\n
    The cells partition the input exactly; cells differ in size by at most one pixel per axis."""
    x = asTensor(x)
    x.requireRank(4)
    gridRows, gridCols = gridShape(x.shape[2], x.shape[3], rows)
    rowBounds = gridPartition(x.shape[2], gridRows)
    colBounds = gridPartition(x.shape[3], gridCols)
    sums  = np.add.reduceat(np.add.reduceat(x.data, rowBounds[:-1], axis=2), colBounds[:-1], axis=3)
    areas = np.outer(np.diff(rowBounds), np.diff(colBounds)).astype(x.dtype)
    return Tensor(sums / areas)


def gridAvgPoolBackward(x: TensorLike, rows: int, gy: TensorLike) -> Tensor:
    """Gradient of :func:`gridAvgPool` with respect to ``x``"""
    x, gy = asTensor(x), asTensor(gy)
    gridRows, gridCols = gridShape(x.shape[2], x.shape[3], rows)
    rowBounds = gridPartition(x.shape[2], gridRows)
    colBounds = gridPartition(x.shape[3], gridCols)
    if gy.shape != (*x.shape[:2], gridRows, gridCols):
        raise ShapeError(f"Output gradient shape {gy.shape} does not match grid {gridRows}x{gridCols}")
    heights, widths = np.diff(rowBounds), np.diff(colBounds)
    share = gy.data / np.outer(heights, widths).astype(x.dtype)
    return Tensor(np.repeat(np.repeat(share, heights, axis=2), widths, axis=3))


# ==================================================================================================
# Resizing
# ==================================================================================================


def interpolationMatrix(inExtent: int, outExtent: int, dtype=np.float64) -> np.ndarray:
    """Returns the ``(outExtent, inExtent)`` linear interpolation matrix with half-pixel centers.\n
    Output ``d`` samples the input at ``(d + 0.5) * in/out - 0.5``, clamped to ``[0, in-1]``."""
    if inExtent < 1 or outExtent < 1:
        raise ShapeError(f"Cannot resize extent {inExtent} to {outExtent}")
    source = (np.arange(outExtent, dtype=np.float64) + 0.5) * (inExtent / outExtent) - 0.5
    source = np.clip(source, 0, inExtent - 1)
    lower  = np.floor(source).astype(np.int64)
    upper  = np.minimum(lower + 1, inExtent - 1)
    frac   = source - lower
    matrix = np.zeros((outExtent, inExtent), dtype=np.float64)
    rows   = np.arange(outExtent)
    np.add.at(matrix, (rows, lower), 1 - frac)
    np.add.at(matrix, (rows, upper), frac)
    return matrix.astype(dtype)


def bilinearResize(x: TensorLike, outH: int, outW: int) -> Tensor:
    """Bilinear resize with half-pixel centers (align-corners off).\n
    Resizing to the input's own size returns the input unchanged."""
    x = asTensor(x)
    x.requireRank(4)
    if outH < 1 or outW < 1:
        raise ShapeError(f"Resize target {outH}x{outW} must be positive")
    h, w = x.shape[2:]
    if (outH, outW) == (h, w):
        return x
    rowMatrix = interpolationMatrix(h, outH, x.dtype)
    colMatrix = interpolationMatrix(w, outW, x.dtype)
    return Tensor(np.matmul(np.matmul(rowMatrix, x.data), colMatrix.T))


def bilinearResizeBackward(x: TensorLike, outH: int, outW: int, gy: TensorLike) -> Tensor:
    """Gradient of :func:`bilinearResize` with respect to ``x``"""
    x, gy = asTensor(x), asTensor(gy)
    h, w = x.shape[2:]
    if gy.shape != (*x.shape[:2], outH, outW):
        raise ShapeError(f"Output gradient shape {gy.shape} does not match resize target {outH}x{outW}")
    if (outH, outW) == (h, w):
        return gy
    rowMatrix = interpolationMatrix(h, outH, x.dtype)
    colMatrix = interpolationMatrix(w, outW, x.dtype)
    return Tensor(np.matmul(np.matmul(rowMatrix.T, gy.data), colMatrix))


# ==================================================================================================
# Loss
# ==================================================================================================


@dataclass
class CrossEntropyResult:
    """Output of :func:`softmaxCrossEntropy`"""
    loss:       float
    grad:       Tensor
    validCount: int

    @property
    def allMasked(self) -> bool:
        """Whether every pixel was ignored, in which case the loss is defined as 0"""
        return self.validCount == 0


def softmaxCrossEntropy(
    logits:     TensorLike,
    targetDist: TensorLike,
    ignoreMask: Optional[np.ndarray] = None,
) -> CrossEntropyResult:
    """Mean over unmasked pixels of ``-sum_c t_c * log(softmax(logits)_c)``.\n
    ``logits`` and ``targetDist`` have shape (N, C, H, W); ``ignoreMask`` is a boolean (N, H, W)
    array that is True for pixels to skip. The gradient with respect to ``logits`` is returned
    along with the loss."""
    logits, targetDist = asTensor(logits), asTensor(targetDist)
    logits.requireRank(4)
    if targetDist.shape != logits.shape:
        raise ShapeError(f"Target shape {targetDist.shape} does not match logits shape {logits.shape}")
    n, _, h, w = logits.shape
    valid = np.ones((n, h, w), dtype=bool) if ignoreMask is None else ~np.asarray(ignoreMask, dtype=bool)
    if valid.shape != (n, h, w):
        raise ShapeError(f"Ignore mask shape {valid.shape} does not match logits shape {logits.shape}")

    count = int(valid.sum())
    if count == 0:
        logger.warning("Cross entropy over a fully masked batch; the loss is defined as 0")
        return CrossEntropyResult(0.0, Tensor.zeros(logits.shape, logits.dtype), 0)

    target = np.where(valid[:, None], targetDist.data, targetDist.dtype.type(0))
    sums = target.sum(axis=1, dtype=np.float64)[valid]
    if np.any(np.abs(sums - 1) > TARGET_SUM_TOLERANCE):
        raise ValueError(f"Every unmasked target distribution must sum to 1 within {TARGET_SUM_TOLERANCE}")

    logProbs = log_softmax(logits.data, axis=1)
    perPixel = -(target * logProbs).sum(axis=1)
    loss     = float(perPixel[valid].sum(dtype=np.float64) / count)
    grad     = (softmax(logits.data, axis=1) - target) * valid[:, None] / logits.dtype.type(count)
    return CrossEntropyResult(loss, Tensor(grad.astype(logits.dtype, copy=False)), count)
