import numpy as np
import pytest

from ldnkit.autograd import inferShapes, runForward
from ldnkit.exceptions import ConfigError
from ldnkit.nets import (
    ArchSpec,
    buildDenseBlockModel,
    buildLadderModel,
    emulateDenseBlockAsResidual,
    initParameters,
)

from conftest import toyModel, toySpec


# ==================================================================================================
# Specs
# ==================================================================================================


def test_backbone_defaults():
    spec = ArchSpec()
    assert spec.blockUnits == (6, 12, 24, 16)
    assert spec.growthRate == 32
    assert spec.stemWidth == 64
    assert spec.keptPools == (True, True, True)
    assert spec.splits == {}
    assert spec.transitionUpCount == 3


def test_default_splits():
    assert ArchSpec(downsample_factor=64).splits == {3: 12}
    assert ArchSpec(downsample_factor=128).splits == {3: 12, 4: 8}
    assert ArchSpec(downsample_factor=64, split_block=2, split_unit_index=5).splits == {2: 5}


def test_dilated_blocks_keep_the_resolution():
    spec = ArchSpec(dilations=[1, 1, 2, 4], downsample_factor=8, output_stride=8)
    assert spec.keptPools == (True, False, False)
    assert spec.splits == {}


@pytest.mark.parametrize(
    "fields",
    [
        {"downsample_factor": 16},
        {"downsample_factor": 24},
        {"downsample_factor": 64, "split_block": 5},
        {"downsample_factor": 64, "split_block": [3, 4]},
        {"downsample_factor": 64, "split_unit_index": 24},
        {"split_block": 3},
        {"output_stride": 64},
        {"output_stride": 3},
        {"num_classes": 1},
        {"compression": 0.0},
        {"spp_grids": []},
        {"backbone": "vgg16"},
        {"backbone": "toy"},
        {"backbone": "rn50", "units": [1, 1, 1, 1]},
        {"backbone": "rn50", "downsample_factor": 64},
        {"units": [6, 12, 24]},
        {"dilations": [1, 1, 0, 1]},
    ],
)
def test_inconsistent_specs(fields):
    with pytest.raises(ConfigError):
        ArchSpec(**fields).validate()


def test_spec_from_dict():
    spec = ArchSpec.fromDict({"backbone": "dn121", "downsample_factor": 64, "split_block": 3})
    assert spec.splits == {3: 12}
    assert ArchSpec.fromDict(spec.toDict()) == spec
    with pytest.raises(ConfigError):
        ArchSpec.fromDict({"backbone": "dn121", "depth": 121})


# ==================================================================================================
# Ladder models
# ==================================================================================================


def test_toy_model_outputs():
    model = toyModel()
    network = model.network
    assert network.trainingOutputs == [
        "logits", "aux.spp1", "aux.spp2", "aux.spp4", "aux.spp8", "aux.tu16", "aux.tu8", "aux.tu4",
    ]
    assert network.inferenceOutput == "final"
    assert network.inputDivisor == 32
    assert model.heads["aux.tu8"].stride == 8
    assert model.heads["aux.spp4"].rows == 4


def test_toy_model_shapes():
    network = toyModel().network
    outputs = [*network.trainingOutputs, "final"]
    shapes = inferShapes(network, (2, 3, 64, 64), outputs)
    byName = {name: shapes[network.outputs[name]] for name in outputs}
    assert byName["logits"] == (2, 5, 16, 16)
    assert byName["final"] == (2, 5, 64, 64)
    assert byName["aux.tu16"] == (2, 5, 4, 4)
    assert byName["aux.tu4"] == (2, 5, 16, 16)
    assert byName["aux.spp1"] == (2, 5, 1, 1)
    assert byName["aux.spp8"] == (2, 5, 2, 2)


def test_toy_model_widths():
    model = toyModel()
    nodes = model.network.nodes
    assert [nodes[model.levels[s]].channels for s in (4, 8, 16, 32)] == [80, 64, 64, 56]
    assert nodes[model.levels[2]].name == "stem.relu"


def test_split_blocks_feed_the_skips():
    model = toyModel(downsample_factor=64)
    nodes = model.network.nodes
    assert nodes[model.levels[16]].name == "db3a.out"
    assert nodes[model.levels[32]].name == "db3b.out"
    assert nodes[model.levels[64]].name == "db4.out"
    assert "aux.tu32" in model.heads
    assert model.network.inputDivisor == 64


def test_output_stride_two_uses_the_stem_activation():
    model = toyModel(output_stride=2)
    assert "aux.tu2" in model.heads
    assert "stem.pool" not in {
        model.network.nodes[i].name
        for i in range(len(model.network.nodes))
        if ("stem", "stem") in model.network.nodes[i].scopes
    }


def test_depthwise_separable_upsampling():
    model = toyModel(dws_upsampling=True)
    names = set(model.network.parameters)
    assert "tu4.dw.conv.weight" in names and "tu4.pw.weight" in names
    assert "tu4.blend.conv.weight" not in names
    assert model.network.parameters["tu4.dw.conv.weight"].shape == (32, 1, 3, 3)


def test_context_convolution_replaces_pyramid_pooling():
    model = toyModel(use_spp=False)
    assert not any(name.startswith("aux.spp") for name in model.heads)
    assert "context.conv.weight" in model.network.parameters


@pytest.mark.parametrize("backbone, widths", [("rn50", 2048), ("rn18", 512)])
def test_residual_backbones(backbone, widths):
    model = buildLadderModel(ArchSpec(backbone=backbone, num_classes=4))
    nodes = model.network.nodes
    assert nodes[model.levels[32]].channels == widths
    assert nodes[model.levels[8]].op == "add"
    shapes = inferShapes(model.network, (1, 3, 64, 64), ["final"])
    assert shapes[model.network.outputs["final"]] == (1, 4, 64, 64)


def test_dilated_model_runs_at_stride_eight():
    model = buildLadderModel(ArchSpec(dilations=[1, 1, 2, 4], downsample_factor=8, output_stride=4, num_classes=3))
    assert model.network.inputDivisor == 8
    assert set(model.levels) == {2, 4, 8}
    shapes = inferShapes(model.network, (1, 3, 32, 32), ["logits"])
    assert shapes[model.network.outputs["logits"]] == (1, 3, 8, 8)


def test_initialization_is_deterministic():
    first, second = toyModel(seed=5).network, toyModel(seed=5).network
    assert first.checksum() == second.checksum()
    assert toyModel(seed=6).network.checksum() != first.checksum()
    weight = first.parameters["stem.conv.weight"].value
    assert weight.dtype == np.float32
    assert abs(weight.std() - np.sqrt(2.0 / (3 * 7 * 7))) < 0.02
    assert np.all(first.parameters["stem.bn.weight"].value == 1)
    assert np.all(first.buffers["stem.bn"].runningVar == 1)


def test_uninitialized_model():
    model = buildLadderModel(toySpec())
    assert not model.network.initialized
    initParameters(model.network, 0)
    assert model.network.initialized


# ==================================================================================================
# Dense blocks as residual blocks
# ==================================================================================================


@pytest.mark.parametrize("units", [1, 2, 3, 4])
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_dense_block_equals_its_residual_emulation(units, mode):
    rng = np.random.default_rng(units)
    block = buildDenseBlockModel(6, units, 4, dtype=np.float64)
    initParameters(block.network, units)
    for buffers in block.network.buffers.values():
        buffers.runningMean = rng.standard_normal(buffers.channels)
        buffers.runningVar = rng.uniform(0.5, 2.0, buffers.channels)
    for parameter in block.network.parameters.values():
        if parameter.kind != "conv":
            parameter.value = rng.uniform(0.5, 1.5, parameter.shape)
    residual = emulateDenseBlockAsResidual(block)
    block.network.mode = residual.mode = mode

    for _ in range(10):
        image = rng.standard_normal((2, 6, 8, 8))
        expected = runForward(block.network, image, ["out"])["out"].data
        actual = runForward(residual, image, ["out"])["out"].data
        assert actual.shape == (2, 6 + 4 * units, 8, 8)
        np.testing.assert_allclose(actual, expected, atol=1e-5, rtol=0)


def test_emulation_needs_an_unsplit_initialized_block():
    with pytest.raises(ConfigError):
        emulateDenseBlockAsResidual(buildDenseBlockModel(4, 3, 2))
    split = buildDenseBlockModel(4, 3, 2, splitAt=1)
    initParameters(split.network, 0)
    with pytest.raises(ConfigError):
        emulateDenseBlockAsResidual(split)


def test_dense_block_split_index():
    with pytest.raises(ConfigError):
        buildDenseBlockModel(4, 3, 2, splitAt=3)
    block = buildDenseBlockModel(4, 3, 2, splitAt=1)
    shapes = inferShapes(block.network, (1, 4, 8, 8), ["out"])
    assert shapes[block.network.outputs["out"]] == (1, 10, 4, 4)
