"""Central finite-difference checks of the analytic kernel gradients.

Each check draws small random double-precision tensors, projects the kernel output onto a random
direction ``r`` so that ``L = sum(y * r)`` is a scalar, and compares the analytic gradient of ``L``
(the kernel's backward with ``gy = r``) with central differences of ``L``.
"""


from typing import Callable, Dict, List, Optional, Sequence, Tuple
from dataclasses import dataclass
import logging

import numpy as np

from . import kernels
from .kernels import ConvParams


logger = logging.getLogger(__name__)


#: Finite-difference step.
STEP = 1e-6
#: Largest accepted relative error between analytic and numerical gradients.
TOLERANCE = 1e-6
#: Random trials per kernel.
TRIALS = 25


Arrays = Dict[str, np.ndarray]


@dataclass
class GradCheckResult:
    """Outcome of checking one kernel"""
    kernel:           str
    trials:           int
    maxRelativeError: float
    tolerance:        float

    @property
    def passed(self) -> bool:
        return self.maxRelativeError <= self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        return f"{self.kernel}: max_rel_error={self.maxRelativeError:.3e} trials={self.trials} {status}"


@dataclass
class _Case:
    """One random instance: inputs, the scalar objective and its analytic gradient"""
    inputs:   Arrays
    objective: Callable[[Arrays], float]
    gradient:  Callable[[Arrays], Arrays]
    checked:   Sequence[str]


def relativeError(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative difference of two gradients"""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numericGradient(objective: Callable[[Arrays], float], inputs: Arrays, name: str, step: float = STEP) -> np.ndarray:
    """Central differences of ``objective`` with respect to ``inputs[name]``"""
    grad    = np.zeros_like(inputs[name])
    shifted = {key: value.copy() for key, value in inputs.items()}
    target  = shifted[name]
    for index in np.ndindex(target.shape):
        original = target[index]
        target[index] = original + step
        plus = objective(shifted)
        target[index] = original - step
        minus = objective(shifted)
        target[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


def _projected(forward: Callable[[Arrays], np.ndarray], direction: np.ndarray) -> Callable[[Arrays], float]:
    return lambda arrays: float(np.sum(forward(arrays) * direction))


def _awayFromZero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Random values with magnitude at least 0.1, so kinks stay far from the sample points"""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _distinct(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Random values pairwise at least 0.1 apart, so window maxima are unique"""
    return rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 + rng.uniform(-0.01, 0.01, size=shape)


# --------------------------------------------------------------------------------------------------


def _convCase(rng: np.random.Generator) -> _Case:
    while True:
        kernel   = int(rng.integers(1, 4))
        stride   = int(rng.integers(1, 3))
        padding  = int(rng.integers(0, 2))
        dilation = int(rng.integers(1, 3))
        h, w     = (int(v) for v in rng.integers(2, 5, size=2))
        if kernels.outExtent(h, kernel, stride, padding, dilation) >= 1 and kernels.outExtent(w, kernel, stride, padding, dilation) >= 1:
            break
    groups = int(rng.choice([1, 2]))
    inC    = groups * int(rng.integers(1, 3))
    outC   = groups * int(rng.integers(1, 3))
    p      = ConvParams.square(inC, outC, kernel, stride, padding, dilation, groups)
    x      = rng.standard_normal((int(rng.integers(1, 3)), inC, h, w))
    weight = rng.standard_normal(p.weightShape)
    outH, outW = p.outSpatial(h, w)
    direction = rng.standard_normal((x.shape[0], outC, outH, outW))

    def forward(a: Arrays) -> np.ndarray:
        return kernels.conv2d(a["x"], a["w"], p).data

    def gradient(a: Arrays) -> Arrays:
        gx, gw = kernels.conv2dBackward(a["x"], a["w"], p, direction)
        return {"x": gx.data, "w": gw.data}

    return _Case({"x": x, "w": weight}, _projected(forward, direction), gradient, ("x", "w"))


def _separableCase(rng: np.random.Generator) -> _Case:
    channels = int(rng.integers(1, 5))
    outC     = int(rng.integers(1, 5))
    h, w     = (int(v) for v in rng.integers(2, 5, size=2))
    x        = rng.standard_normal((2, channels, h, w))
    wDw      = rng.standard_normal((channels, 1, 3, 3))
    wPw      = rng.standard_normal((outC, channels, 1, 1))
    direction = rng.standard_normal((2, outC, h, w))

    def forward(a: Arrays) -> np.ndarray:
        return kernels.depthwiseSeparableConv3x3(a["x"], a["wDw"], a["wPw"]).data

    def gradient(a: Arrays) -> Arrays:
        gx, gDw, gPw = kernels.depthwiseSeparableConv3x3Backward(a["x"], a["wDw"], a["wPw"], direction)
        return {"x": gx.data, "wDw": gDw.data, "wPw": gPw.data}

    return _Case({"x": x, "wDw": wDw, "wPw": wPw}, _projected(forward, direction), gradient, ("x", "wDw", "wPw"))


def _batchNormCase(mode: str) -> Callable[[np.random.Generator], _Case]:
    def build(rng: np.random.Generator) -> _Case:
        channels = int(rng.integers(1, 5))
        shape    = (2, channels, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        x        = rng.standard_normal(shape)
        gamma    = rng.uniform(0.5, 1.5, size=channels)
        beta     = rng.standard_normal(channels)
        runMean  = rng.standard_normal(channels)
        runVar   = rng.uniform(0.5, 2.0, size=channels)
        direction = rng.standard_normal(shape)

        def forward(a: Arrays) -> np.ndarray:
            return kernels.batchNorm(a["x"], a["gamma"], a["beta"], runMean, runVar, mode).output.data

        def gradient(a: Arrays) -> Arrays:
            result = kernels.batchNorm(a["x"], a["gamma"], a["beta"], runMean, runVar, mode)
            gx, gGamma, gBeta = kernels.batchNormBackward(a["x"], a["gamma"], result.mean, result.var, direction, mode)
            return {"x": gx.data, "gamma": gGamma.data, "beta": gBeta.data}

        inputs = {"x": x, "gamma": gamma, "beta": beta}
        return _Case(inputs, _projected(forward, direction), gradient, ("x", "gamma", "beta"))
    return build


def _reluCase(rng: np.random.Generator) -> _Case:
    x = _awayFromZero(rng, (2, int(rng.integers(1, 5)), 3, 3))
    direction = rng.standard_normal(x.shape)
    forward = lambda a: kernels.relu(a["x"]).data
    gradient = lambda a: {"x": kernels.reluBackward(kernels.relu(a["x"]), direction).data}
    return _Case({"x": x}, _projected(forward, direction), gradient, ("x",))


def _addCase(rng: np.random.Generator) -> _Case:
    shape = (2, int(rng.integers(1, 5)), 3, 4)
    a0, b0 = rng.standard_normal(shape), rng.standard_normal(shape)
    direction = rng.standard_normal(shape)
    forward = lambda a: kernels.add(a["a"], a["b"]).data
    gradient = lambda a: {"a": direction, "b": direction}
    return _Case({"a": a0, "b": b0}, _projected(forward, direction), gradient, ("a", "b"))


def _concatCase(rng: np.random.Generator) -> _Case:
    channels = [int(c) for c in rng.integers(1, 4, size=3)]
    inputs = {f"x{i}": rng.standard_normal((2, c, 3, 3)) for i, c in enumerate(channels)}
    direction = rng.standard_normal((2, sum(channels), 3, 3))
    names = list(inputs)
    forward = lambda a: kernels.concatChannels([a[name] for name in names]).data

    def gradient(a: Arrays) -> Arrays:
        pieces = kernels.splitChannels(direction, channels)
        return {name: piece.data for name, piece in zip(names, pieces)}

    return _Case(inputs, _projected(forward, direction), gradient, names)


def _padChannelsCase(rng: np.random.Generator) -> _Case:
    channels = int(rng.integers(1, 4))
    total = channels + int(rng.integers(0, 3))
    x = rng.standard_normal((2, channels, 3, 3))
    direction = rng.standard_normal((2, total, 3, 3))
    forward = lambda a: kernels.padChannels(a["x"], total).data
    gradient = lambda a: {"x": kernels.padChannelsBackward(direction, channels).data}
    return _Case({"x": x}, _projected(forward, direction), gradient, ("x",))


def _poolCase(kind: str) -> Callable[[np.random.Generator], _Case]:
    def build(rng: np.random.Generator) -> _Case:
        window  = int(rng.integers(1, 4))
        stride  = int(rng.integers(1, 3))
        padding = int(rng.integers(0, window // 2 + 1))
        h, w    = (int(v) for v in rng.integers(max(window, 2), 5, size=2))
        shape   = (2, int(rng.integers(1, 4)), h, w)
        x       = _distinct(rng, shape) if kind == "max" else rng.standard_normal(shape)
        outH, outW = kernels.outExtent(h, window, stride, padding), kernels.outExtent(w, window, stride, padding)
        direction = rng.standard_normal((shape[0], shape[1], outH, outW))
        forward = lambda a: kernels.pool(a["x"], kind, window, stride, padding).data
        gradient = lambda a: {"x": kernels.poolBackward(a["x"], kind, window, stride, padding, direction).data}
        return _Case({"x": x}, _projected(forward, direction), gradient, ("x",))
    return build


def _gridPoolCase(rng: np.random.Generator) -> _Case:
    h, w = (int(v) for v in rng.integers(1, 5, size=2))
    rows = int(rng.integers(1, h + 1))
    x = rng.standard_normal((2, int(rng.integers(1, 4)), h, w))
    gridRows, gridCols = kernels.gridShape(h, w, rows)
    direction = rng.standard_normal((*x.shape[:2], gridRows, gridCols))
    forward = lambda a: kernels.gridAvgPool(a["x"], rows).data
    gradient = lambda a: {"x": kernels.gridAvgPoolBackward(a["x"], rows, direction).data}
    return _Case({"x": x}, _projected(forward, direction), gradient, ("x",))


def _resizeCase(rng: np.random.Generator) -> _Case:
    h, w = (int(v) for v in rng.integers(1, 5, size=2))
    outH, outW = (int(v) for v in rng.integers(1, 9, size=2))
    x = rng.standard_normal((2, int(rng.integers(1, 4)), h, w))
    direction = rng.standard_normal((*x.shape[:2], outH, outW))
    forward = lambda a: kernels.bilinearResize(a["x"], outH, outW).data
    gradient = lambda a: {"x": kernels.bilinearResizeBackward(a["x"], outH, outW, direction).data}
    return _Case({"x": x}, _projected(forward, direction), gradient, ("x",))


def _crossEntropyCase(rng: np.random.Generator) -> _Case:
    classes = int(rng.integers(2, 5))
    shape   = (2, classes, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    logits  = rng.standard_normal(shape) * 2
    target  = rng.dirichlet(np.ones(classes), size=(shape[0], shape[2], shape[3])).transpose(0, 3, 1, 2)
    mask    = rng.random((shape[0], shape[2], shape[3])) < 0.25
    mask.flat[0] = False

    def objective(a: Arrays) -> float:
        return kernels.softmaxCrossEntropy(a["logits"], target, mask).loss

    def gradient(a: Arrays) -> Arrays:
        return {"logits": kernels.softmaxCrossEntropy(a["logits"], target, mask).grad.data}

    return _Case({"logits": logits}, objective, gradient, ("logits",))


#: Gradient checks by kernel name.
KERNEL_CASES: Dict[str, Callable[[np.random.Generator], _Case]] = {
    "conv2d":                       _convCase,
    "depthwise_separable_conv3x3":  _separableCase,
    "batch_norm_train":             _batchNormCase("train"),
    "batch_norm_eval":              _batchNormCase("eval"),
    "relu":                         _reluCase,
    "add":                          _addCase,
    "concat_channels":              _concatCase,
    "pad_channels":                 _padChannelsCase,
    "max_pool":                     _poolCase("max"),
    "avg_pool":                     _poolCase("avg"),
    "grid_avg_pool":                _gridPoolCase,
    "bilinear_resize":              _resizeCase,
    "softmax_cross_entropy":        _crossEntropyCase,
}


def checkKernel(name: str, trials: int = TRIALS, seed: int = 0, tolerance: float = TOLERANCE) -> GradCheckResult:
    """Compares analytic and numerical gradients of kernel ``name`` on ``trials`` random instances"""
    if name not in KERNEL_CASES:
        raise KeyError(f"Unknown kernel {name!r}; known kernels: {', '.join(KERNEL_CASES)}")
    rng = np.random.default_rng([seed, list(KERNEL_CASES).index(name)])
    worst = 0.0
    for _ in range(trials):
        case = KERNEL_CASES[name](rng)
        analytic = case.gradient(case.inputs)
        for inputName in case.checked:
            numeric = numericGradient(case.objective, case.inputs, inputName)
            worst = max(worst, relativeError(analytic[inputName], numeric))
    result = GradCheckResult(name, trials, worst, tolerance)
    logger.info("%s", result)
    return result


def checkKernels(names: Optional[Sequence[str]] = None, trials: int = TRIALS, seed: int = 0) -> List[GradCheckResult]:
    """Runs :func:`checkKernel` for every kernel in ``names`` (all kernels by default)"""
    return [checkKernel(name, trials, seed) for name in (names or list(KERNEL_CASES))]
