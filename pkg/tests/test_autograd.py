import numpy as np
import pytest

from ldnkit.autograd import (
    CheckpointPolicy,
    GraphBuilder,
    MemoryReport,
    MemoryTracker,
    backward,
    inferShapes,
    measurePeak,
    planExecution,
    runForward,
    traceForward,
    uniformLossGrads,
)
from ldnkit.exceptions import CheckpointError, DTypeError, LdnError, PolicyError, ShapeError, TraceConsumedError
from ldnkit.nets import ArchSpec, buildLadderModel, initParameters
from ldnkit.utils import limitThreads

from conftest import toyModel


def smallNetwork(dtype=np.float64):
    """A dense unit, pooling, resizing and a grid head, in one block scope"""
    g = GraphBuilder(dtype)
    x = g.input(2)
    with g.stage("block1"), g.scope("block", "b"):
        with g.scope("unit", "u1"):
            c = g.bnReluConv(x, 3, 3, "u1")
        cat = g.concat([x, c], "b.out")
    pooled = g.pool(cat, "avg", 2, 2, name="down")
    up = g.resize(pooled, like=x, name="up")
    g.output("out", g.conv(up, 2, 1, name="head"))
    g.output("grid", g.gridPool(cat, 2, name="grid"))
    network = g.build()
    initParameters(network, 0)
    return network


def objective(network, image, directions):
    outputs = runForward(network, image, list(directions))
    return sum(float(np.sum(outputs[name].data * r)) for name, r in directions.items())


# ==================================================================================================
# Gradients
# ==================================================================================================


@pytest.mark.parametrize("policy", ["none", "custom:block", "custom:unit"])
def test_parameter_gradients_match_finite_differences(rng, policy):
    network = smallNetwork()
    image = rng.standard_normal((2, 2, 6, 6))
    outputs, trace = traceForward(network, image, policy, ["out", "grid"])
    directions = {name: rng.standard_normal(t.shape) for name, t in outputs.items()}
    grads = backward(trace, directions)

    step = 1e-6
    for name in ("u1.conv.weight", "u1.bn.weight", "u1.bn.bias", "head.weight"):
        value = network.parameters[name].value
        for index in list(np.ndindex(value.shape))[:6]:
            original = value[index]
            value[index] = original + step
            plus = objective(network, image, directions)
            value[index] = original - step
            minus = objective(network, image, directions)
            value[index] = original
            assert grads[name].data[index] == pytest.approx((plus - minus) / (2 * step), rel=1e-5, abs=1e-8)


def test_every_executed_parameter_gets_a_gradient(rng):
    network = smallNetwork()
    outputs, trace = traceForward(network, rng.standard_normal((2, 2, 6, 6)), None, ["grid"])
    grads = backward(trace, uniformLossGrads(outputs))
    assert set(grads) == {"u1.bn.weight", "u1.bn.bias", "u1.conv.weight"}


def test_backward_consumes_the_trace(rng):
    network = smallNetwork()
    outputs, trace = traceForward(network, rng.standard_normal((2, 2, 6, 6)), None, ["out"])
    backward(trace, uniformLossGrads(outputs))
    with pytest.raises(TraceConsumedError):
        backward(trace, uniformLossGrads(outputs))


def test_loss_gradient_shape_is_checked(rng):
    network = smallNetwork()
    outputs, trace = traceForward(network, rng.standard_normal((2, 2, 6, 6)), None, ["out"])
    with pytest.raises(ShapeError):
        backward(trace, {"out": np.zeros((1, 2, 6, 6))})


def test_unknown_output():
    with pytest.raises(LdnError):
        planExecution(smallNetwork(), None, ["nope"])


# ==================================================================================================
# Checkpointing
# ==================================================================================================


def test_all_policies_give_bitwise_equal_gradients():
    model = toyModel()
    network = model.network
    image = np.random.default_rng(0).standard_normal((2, 3, 64, 64)).astype(np.float32)
    snapshot = network.snapshotBuffers()

    def run(policy):
        network.restoreBuffers(snapshot)
        outputs, trace = traceForward(network, image, policy)
        return outputs, backward(trace, uniformLossGrads(outputs)), trace

    with limitThreads(1):
        baseOutputs, baseGrads, baseTrace = run(CheckpointPolicy())
        assert baseTrace.recomputeKernelInvocations == 0
        for policy in CheckpointPolicy.tableOrder()[1:]:
            outputs, grads, trace = run(policy)
            for name, value in baseOutputs.items():
                assert np.array_equal(outputs[name].data, value.data), f"{policy.name}: output {name}"
            assert set(grads) == set(baseGrads)
            for name, value in baseGrads.items():
                assert np.array_equal(grads[name].data, value.data), f"{policy.name}: gradient of {name}"


def test_segments_are_recomputed_once_and_one_at_a_time():
    network = toyModel().network
    image = np.random.default_rng(1).standard_normal((2, 3, 64, 64)).astype(np.float32)
    for policy in CheckpointPolicy.tableOrder()[1:]:
        outputs, trace = traceForward(network, image, policy)
        backward(trace, uniformLossGrads(outputs))
        interiors = sum(len(trace.plan.interior(s)) for s in range(len(trace.plan.segments)))
        assert trace.recomputeKernelInvocations == interiors
        assert trace.tracker.maxConcurrentSegments <= 1
        assert trace.tracker.liveBytes == 0
        assert trace.cachedIndices == []


def test_checkpointing_lowers_the_peak():
    network = toyModel().network
    image = np.random.default_rng(2).standard_normal((2, 3, 64, 64)).astype(np.float32)
    baseline = measurePeak(network, image, "none")
    catProj = measurePeak(network, image, "cat_proj")
    aggressive = measurePeak(network, image, "unit_whole_plus_stem_td_up")
    assert baseline.peakForwardBytes > catProj.peakForwardBytes > aggressive.peakForwardBytes
    assert baseline.peakTotalBytes > aggressive.peakTotalBytes
    assert baseline.recomputeKernelInvocations == 0 < aggressive.recomputeKernelInvocations


def test_measure_peak_restores_batch_norm_buffers():
    network = toyModel().network
    before = network.snapshotBuffers()
    measurePeak(network, np.ones((2, 3, 64, 64), dtype=np.float32), "unit_whole")
    for name, buffers in before.items():
        assert np.array_equal(network.buffers[name].runningMean, buffers.runningMean)


def test_interior_value_read_outside_its_segment():
    g = GraphBuilder()
    x = g.input(2)
    with g.scope("unit", "u"):
        a = g.conv(x, 2, 3, name="a")
        b = g.relu(a, "b")
    g.output("out", g.add(a, b, "leak"))
    network = g.build()
    planExecution(network, "none")
    with pytest.raises(CheckpointError):
        planExecution(network, "custom:unit")


def test_output_inside_a_segment():
    g = GraphBuilder()
    x = g.input(2)
    with g.scope("unit", "u"):
        a = g.conv(x, 2, 3, name="a")
        g.output("inner", a)
        g.output("out", g.relu(a, "b"))
    with pytest.raises(CheckpointError):
        planExecution(g.build(), "custom:unit", ["inner", "out"])


def test_policy_parsing():
    assert CheckpointPolicy.parse(None).name == "none"
    assert CheckpointPolicy.parse("custom:unit, td").customTags == ("unit", "td")
    assert CheckpointPolicy.parse("unit_whole").label == "(cat 1x1 3x3)"
    assert [p.name for p in CheckpointPolicy.tableOrder()][-1] == "unit_whole_plus_stem_td_up"
    with pytest.raises(PolicyError):
        CheckpointPolicy.parse("everything")
    with pytest.raises(PolicyError):
        CheckpointPolicy.parse("custom:bogus")
    with pytest.raises(PolicyError):
        CheckpointPolicy.parse("custom:")


def test_policy_must_match_the_model():
    residual = buildLadderModel(ArchSpec(backbone="rn18", downsample_factor=32, output_stride=32, num_classes=3)).network
    CheckpointPolicy.parse("unit_whole").validateFor(residual)
    with pytest.raises(PolicyError):
        CheckpointPolicy.parse("cat_proj").validateFor(residual)
    with pytest.raises(PolicyError):
        CheckpointPolicy.parse("custom:unit,tu").validateFor(residual)


# ==================================================================================================
# Execution details
# ==================================================================================================


def test_inferred_shapes_match_execution():
    network = toyModel().network
    image = np.zeros((1, 3, 64, 96), dtype=np.float32)
    outputs, trace = traceForward(network, image, "none")
    shapes = inferShapes(network, image.shape, network.trainingOutputs)
    for name, index in trace.plan.outputs.items():
        assert shapes[index] == outputs[name].shape


def test_run_forward_predicts_at_input_resolution():
    network = toyModel().network
    network.mode = "eval"
    final = runForward(network, np.zeros((1, 3, 64, 96), dtype=np.float32))["final"]
    assert final.shape == (1, 5, 64, 96)


def test_input_checks():
    network = toyModel().network
    with pytest.raises(ShapeError):
        runForward(network, np.zeros((1, 3, 48, 64), dtype=np.float32))
    with pytest.raises(ShapeError):
        runForward(network, np.zeros((1, 4, 64, 64), dtype=np.float32))
    with pytest.raises(DTypeError):
        runForward(network, np.zeros((1, 3, 64, 64), dtype=np.float64))


def test_network_mode():
    network = smallNetwork()
    with pytest.raises(ValueError):
        network.mode = "inference"


def test_eval_mode_does_not_touch_running_statistics(rng):
    network = smallNetwork()
    network.mode = "eval"
    before = network.snapshotBuffers()
    runForward(network, rng.standard_normal((2, 2, 6, 6)), ["out"])
    assert np.array_equal(network.buffers["u1.bn"].runningMean, before["u1.bn"].runningMean)
    network.mode = "train"
    runForward(network, rng.standard_normal((2, 2, 6, 6)) + 3, ["out"])
    assert not np.array_equal(network.buffers["u1.bn"].runningMean, before["u1.bn"].runningMean)


def test_memory_tracker():
    tracker = MemoryTracker()
    tracker.allocate("a", 100)
    tracker.allocate("b", 50)
    tracker.release("a")
    tracker.phase = "backward"
    tracker.replace("b", 70)
    assert tracker.liveBytes == 70
    assert tracker.peakForwardBytes == 150
    assert tracker.peakBackwardBytes == 120
    assert tracker.peakTotalBytes == 150
    with pytest.raises(LdnError):
        tracker.allocate("b", 1)


def test_memory_report():
    report = MemoryReport("none", "baseline - no ckpt", 2, 800, 1000, 1000, 0, 0.5, 2.0, 100)
    assert report.fps == 1.0
    assert report.maxBatch(2100) == 4
    assert report.toKeyValue().splitlines()[0] == "policy=none"
    assert len(report.csvRow()) == len(MemoryReport.CSV_HEADER)
    with pytest.raises(LdnError):
        MemoryReport("none", "", 1, 10, 10, 5, 0, 0.0, 0.0, 0)


def test_network_checksum_tracks_parameters():
    network = smallNetwork()
    before = network.checksum()
    network.parameters["head.weight"].value[0, 0, 0, 0] += 1
    assert network.checksum() != before


def test_parameter_tensor_requires_initialization():
    g = GraphBuilder()
    x = g.input(1)
    g.output("out", g.conv(x, 1, 1))
    with pytest.raises(LdnError):
        g.build().parameters["conv.weight"].tensor()


def test_graph_builder_checks_channels():
    g = GraphBuilder()
    x = g.input(2)
    with pytest.raises(ShapeError):
        g.add(x, g.conv(x, 3, 1))


@pytest.mark.slow
def test_densenet121_peak_memory_per_policy():
    model = buildLadderModel(ArchSpec())
    initParameters(model.network, 0)
    image = np.random.default_rng(0).standard_normal((2, 3, 192, 192)).astype(np.float32)
    peaks = {p.name: measurePeak(model.network, image, p).peakTotalBytes for p in CheckpointPolicy.tableOrder()}
    chain = ["none", "conv3x3_only", "cat_proj", "cat_proj_and_3x3", "unit_whole", "unit_whole_plus_stem_td_up"]
    assert all(peaks[a] > peaks[b] for a, b in zip(chain, chain[1:]))
    # whole-block recomputation lands next to whole-unit recomputation, in either order
    assert abs(peaks["block_stem_td_up"] / peaks["unit_whole"] - 1) <= 0.15
    assert peaks["cat_proj_and_3x3"] > peaks["block_stem_td_up"] > peaks["unit_whole_plus_stem_td_up"]
    assert min(peaks, key=peaks.get) == "unit_whole_plus_stem_td_up"
    assert peaks["none"] / peaks["unit_whole_plus_stem_td_up"] >= 4


@pytest.mark.slow
def test_recomputation_overhead():
    model = buildLadderModel(ArchSpec())
    initParameters(model.network, 0)
    image = np.random.default_rng(0).standard_normal((2, 3, 192, 192)).astype(np.float32)
    times = {}
    for policy in ("none", "unit_whole_plus_stem_td_up"):
        times[policy] = min(measurePeak(model.network, image, policy).wallTimeTotal for _ in range(2))
    assert times["unit_whole_plus_stem_td_up"] <= 1.5 * times["none"]
