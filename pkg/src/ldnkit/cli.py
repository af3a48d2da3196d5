"""The ``ldnkit`` command-line interface.

Exit codes: 0 on success, 1 on invalid arguments, invalid configuration or a failed check, and 2
on any other error.
"""


from typing import Callable, Dict, List, Optional, Sequence, Tuple
from pathlib import Path
import argparse
import csv
import io
import logging
import sys
import time

import numpy as np
from termcolor import colored

from . import __version__
from .analyzer import analyze, unitSpan
from .autograd import CheckpointPolicy, backward, measurePeak, traceForward, uniformLossGrads
from .config import loadDocument
from .dataio import SegmentationDataset, SynthSpec, colorize, generateSynthetic, loadImage, writePpm
from .exceptions import ConfigError, FormatError, PolicyError, ShapeError
from .gradcheck import KERNEL_CASES, checkKernels
from .nets import buildLadderModel, initParameters
from .trainer import Trainer, evaluateModel, loadCheckpoint, multiScaleInfer
from .utils import MEBIBYTE, atomicOutput, limitThreads


logger = logging.getLogger(__name__)


#: Scales of ``eval --ms`` and ``infer --ms`` unless ``--scales`` is given.
MULTI_SCALES = (0.5, 0.75, 1.0, 1.5, 2.0)


class CheckFailed(Exception):
    """A check command found a mismatch"""


class ArgumentParser(argparse.ArgumentParser):
    """Exits with code 1 on invalid arguments"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parseResolution(value: str) -> Tuple[int, int]:
    try:
        height, width = (int(part) for part in value.lower().split("x"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected HxW, got {value!r}") from e
    if height < 1 or width < 1:
        raise argparse.ArgumentTypeError(f"Resolution must be positive, got {value!r}")
    return height, width


def positiveInt(value: str) -> int:
    try:
        number = int(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected an integer, got {value!r}") from e
    if number < 1:
        raise argparse.ArgumentTypeError(f"Expected a positive integer, got {value!r}")
    return number


def _writeCsv(rows: Sequence[Sequence[str]], filePath: Path) -> None:
    buffer = io.StringIO()
    csv.writer(buffer, lineterminator="\n").writerows(rows)
    with atomicOutput(filePath) as tempPath:
        tempPath.write_text(buffer.getvalue())
    logger.info("Wrote %s", filePath)


def _randomImage(batch: int, height: int, width: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((batch, 3, height, width)).astype(np.float32)


# ==================================================================================================
# Commands
# ==================================================================================================


def cmdAnalyze(args: argparse.Namespace) -> int:
    spec = loadDocument(args.spec).require("arch")
    height, width = args.res
    report = analyze(spec, height, width, args.batch, withPolicies=args.policies)
    print(report.toTable())
    print()
    for block, span in unitSpan(spec).items():
        print(f"unit_span {block}={span}")
    if args.policies:
        print()
        for policy, nbytes in report.policyCacheBytes.items():
            print(f"policy_cache {policy}={nbytes / MEBIBYTE:.1f} MB")
    if args.csv:
        _writeCsv(report.csvRows(), args.csv)
    return 0


def _policies(value: str) -> List[CheckpointPolicy]:
    return CheckpointPolicy.tableOrder() if value == "all" else [CheckpointPolicy.parse(value)]


def cmdMembench(args: argparse.Namespace) -> int:
    spec = loadDocument(args.spec).require("arch")
    model = buildLadderModel(spec)
    initParameters(model.network, args.seed)
    height, width = args.res
    image = _randomImage(args.batch, height, width, args.seed)
    budget = None if args.budget_mb is None else int(args.budget_mb * MEBIBYTE)

    reports = []
    for policy in _policies(args.policy):
        try:
            policy.validateFor(model.network)
        except PolicyError as e:
            if args.policy != "all":
                raise
            logger.warning("Skipping %s: %s", policy.name, e)
            continue
        reports.append(measurePeak(model.network, image, policy))

    header = f"{'policy':<34}{'peak MB':>10}{'fwd MB':>10}{'recompute':>11}{'FPS':>9}"
    print(header + (f"{'max batch':>11}" if budget else ""))
    for r in reports:
        line = f"{r.label:<34}{r.peakTotalMB:>10.1f}{r.peakForwardBytes / MEBIBYTE:>10.1f}{r.recomputeKernelInvocations:>11}{r.fps:>9.2f}"
        print(line + (f"{r.maxBatch(budget):>11}" if budget else ""))
    if args.csv:
        header = list(reports[0].CSV_HEADER) if reports else []
        rows = [r.csvRow() for r in reports]
        if budget:
            header.append("max_batch")
            rows = [row + [str(r.maxBatch(budget))] for row, r in zip(rows, reports)]
        _writeCsv([header, *rows], args.csv)
    return 0


def cmdGradcheck(args: argparse.Namespace) -> int:
    names = sorted(KERNEL_CASES) if args.kernel == "all" else [args.kernel]
    unknown = [name for name in names if name not in KERNEL_CASES]
    if unknown:
        raise ConfigError(f"Unknown kernel {unknown[0]!r}; known kernels: {', '.join(sorted(KERNEL_CASES))}")
    results = checkKernels(names, trials=args.trials, seed=args.seed)
    for result in results:
        print(result)
    failed = [r.kernel for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"Gradient check failed for {', '.join(failed)}")
    return 0


def cmdCkptcheck(args: argparse.Namespace) -> int:
    spec = loadDocument(args.spec).require("arch")
    network = buildLadderModel(spec).network
    initParameters(network, args.seed)
    height, width = args.res
    image = _randomImage(args.batch, height, width, args.seed)
    snapshot = network.snapshotBuffers()

    def gradients(policy: CheckpointPolicy):
        network.restoreBuffers(snapshot)
        outputs, trace = traceForward(network, image, policy)
        return outputs, backward(trace, uniformLossGrads(outputs))

    baseOutputs, baseGrads = gradients(CheckpointPolicy())
    # Only single-threaded runs are bitwise reproducible.
    tolerance = 0.0 if args.threads == 1 else 1e-6
    scale = max(float(np.max(np.abs(g.data))) for g in baseGrads.values())
    mismatches = []
    for policy in CheckpointPolicy.tableOrder()[1:]:
        if not policy.segmentKinds & network.scopeKinds():
            logger.warning("Skipping %s: no matching scopes", policy.name)
            continue
        outputs, grads = gradients(policy)
        diff = max(float(np.max(np.abs(grads[name].data - baseGrads[name].data))) for name in baseGrads)
        outputDiff = max(float(np.max(np.abs(outputs[name].data - baseOutputs[name].data))) for name in baseOutputs)
        print(f"policy={policy.name} max_abs_diff={diff:g} max_output_diff={outputDiff:g}")
        if diff > tolerance * scale or outputDiff > tolerance:
            mismatches.append(policy.name)
    network.restoreBuffers(snapshot)
    if mismatches:
        raise CheckFailed(f"Gradients differ from the baseline under {', '.join(mismatches)}")
    return 0


def cmdMakeDataset(args: argparse.Namespace) -> int:
    document = loadDocument(args.spec)
    spec = document.synth or SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    meta = generateSynthetic(spec, args.out, args.count)
    print(f"count={meta.count}")
    print(f"mean_pixel={','.join(f'{v:.6f}' for v in meta.mean_pixel)}")
    return 0


def cmdTrain(args: argparse.Namespace) -> int:
    document = loadDocument(args.config)
    spec, config = document.require("arch"), document.require("train")
    for flag, field in (("epochs", "epochs"), ("batch", "batch"), ("seed", "seed"), ("policy", "checkpoint_policy")):
        if getattr(args, flag) is not None:
            setattr(config, field, getattr(args, flag))
    if args.no_aux:
        config.aux_loss = False
    config.validate()
    model = buildLadderModel(spec)
    initParameters(model.network, config.seed)
    trainer = Trainer(model, config, SegmentationDataset(args.data))
    start = time.perf_counter()
    history = trainer.fit(args.out)
    logger.info("Training took %.1f s", time.perf_counter() - start)
    if history and history[-1].valMiou is not None:
        print(f"val_miou={history[-1].valMiou:.6f}")
    print(f"checkpoint={Path(args.out) / 'checkpoint'}")
    return 0


def _scales(args: argparse.Namespace) -> Tuple[Sequence[float], bool]:
    if args.scales:
        return args.scales, args.ms
    return (MULTI_SCALES, True) if args.ms else ((1.0,), False)


def cmdEval(args: argparse.Namespace) -> int:
    model = loadCheckpoint(args.checkpoint)
    dataset = SegmentationDataset(args.data)
    scales, flips = _scales(args)
    mean, perClass = evaluateModel(model, dataset, None, scales, flips)
    print(f"miou={mean:.6f}")
    for c, iou in enumerate(perClass):
        print(f"iou_{c}={'nan' if np.isnan(iou) else f'{iou:.6f}'}")
    return 0


def cmdInfer(args: argparse.Namespace) -> int:
    model = loadCheckpoint(args.checkpoint)
    model.network.mode = "eval"
    image = loadImage(args.image)
    scales, flips = _scales(args)
    meanPixel = model.meanPixel
    if meanPixel is None:
        logger.warning("The checkpoint has no training mean pixel; padding with the mean of %s", args.image)
        meanPixel = image.reshape(3, -1).mean(axis=1)
    probs = multiScaleInfer(model, image[None], scales, flips, meanPixel)
    prediction = probs[0].argmax(axis=0).astype(np.uint8)
    writePpm(args.out, colorize(prediction))
    logger.info("Wrote prediction to %s", args.out)
    return 0


# ==================================================================================================
# Entry point
# ==================================================================================================


def buildParser() -> ArgumentParser:
    parser = ArgumentParser(prog="ldnkit", description="Ladder-style DenseNet segmentation on the CPU")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=positiveInt, default=None, help="bound the numerical thread pools")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log more (repeatable)")
    parser.add_argument("-q", "--quiet", action="store_true", help="log only errors")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def command(name: str, handler: Callable[[argparse.Namespace], int], description: str) -> ArgumentParser:
        sub = commands.add_parser(name, help=description, description=description)
        sub.set_defaults(handler=handler)
        return sub

    sub = command("analyze", cmdAnalyze, "weights, multiply-adds and caches of a model spec")
    sub.add_argument("--spec", type=Path, required=True)
    sub.add_argument("--res", type=parseResolution, default=(1024, 1024))
    sub.add_argument("--batch", type=int, default=1)
    sub.add_argument("--policies", action="store_true", help="also estimate the cache of every checkpoint policy")
    sub.add_argument("--csv", type=Path)

    sub = command("membench", cmdMembench, "measure peak memory of a training step per checkpoint policy")
    sub.add_argument("--spec", type=Path, required=True)
    sub.add_argument("--res", type=parseResolution, required=True)
    sub.add_argument("--batch", type=int, required=True)
    sub.add_argument("--policy", default="all")
    sub.add_argument("--budget-mb", type=float, dest="budget_mb")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--csv", type=Path)

    sub = command("gradcheck", cmdGradcheck, "compare kernel gradients with finite differences")
    sub.add_argument("--kernel", default="all")
    sub.add_argument("--trials", type=int, default=25)
    sub.add_argument("--seed", type=int, default=0)

    sub = command("ckptcheck", cmdCkptcheck, "compare gradients under every checkpoint policy")
    sub.add_argument("--spec", type=Path, required=True)
    sub.add_argument("--res", type=parseResolution, default=(96, 96))
    sub.add_argument("--batch", type=int, default=2)
    sub.add_argument("--seed", type=int, default=0)

    sub = command("make-dataset", cmdMakeDataset, "generate a synthetic segmentation dataset")
    sub.add_argument("--out", type=Path, required=True)
    sub.add_argument("--spec", type=Path, required=True)
    sub.add_argument("--count", type=int)
    sub.add_argument("--seed", type=int)

    sub = command("train", cmdTrain, "train a model")
    sub.add_argument("--config", type=Path, required=True)
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--policy")
    sub.add_argument("--no-aux", action="store_true", dest="no_aux")

    for name, handler, description in (
        ("eval", cmdEval, "evaluate a checkpoint"),
        ("infer", cmdInfer, "predict the labels of one image"),
    ):
        sub = command(name, handler, description)
        sub.add_argument("--checkpoint", type=Path, required=True)
        if name == "eval":
            sub.add_argument("--data", type=Path, required=True)
        else:
            sub.add_argument("--image", type=Path, required=True)
            sub.add_argument("--out", type=Path, required=True)
        sub.add_argument("--ms", action="store_true", help="multi-scale inference with flips")
        sub.add_argument("--scales", type=float, nargs="+")

    return parser


EXIT_CODES: Dict[type, int] = {ConfigError: 1, PolicyError: 1, FormatError: 1, ShapeError: 1, CheckFailed: 1}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = buildParser().parse_args(argv)
    if args.quiet:
        level = logging.ERROR
    else:
        level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(format=colored("%(name)s - %(levelname)s - %(message)s", "yellow"), level=level)
    try:
        with limitThreads(args.threads):
            return args.handler(args)
    except tuple(EXIT_CODES) as e:
        logger.error("%s", e)
        return 1
    except Exception as e:
        logger.exception("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
