import math

import pytest

from ldnkit.analyzer import (
    CSV_HEADER,
    analyze,
    blockCaches,
    cacheDensenet,
    cacheResnet,
    countMacs,
    countParams,
    naiveConcatCache,
    networkMacs,
    simulatePolicyCache,
    unitSpan,
)
from ldnkit.config import loadDocument
from ldnkit.exceptions import ShapeError
from ldnkit.nets import ArchSpec, buildDenseBlockModel, emulateDenseBlockAsResidual, initParameters

from conftest import CONFIGS_DIR, toySpec


def configSpec(name: str) -> ArchSpec:
    return loadDocument(CONFIGS_DIR / f"{name}.json").require("arch")


# ==================================================================================================
# Weights
# ==================================================================================================


def test_densenet121_block_weights():
    report = analyze(ArchSpec(), 1024, 1024)
    assert report.perBlockParams == [364_544, 1_040_384, 3_325_952, 2_129_920]
    assert report.stages["stem"].params == 64 * 3 * 7 * 7


def test_resnet50_block_weights():
    params = countParams(ArchSpec(backbone="rn50"))
    assert [params[f"block{b}"] for b in range(1, 5)] == [212_992, 1_212_416, 7_077_888, 14_942_208]


def test_weights_do_not_depend_on_the_resolution():
    spec = toySpec()
    assert analyze(spec, 64, 64).totalParams == analyze(spec, 128, 256).totalParams


def test_auxiliary_heads_are_excluded_from_totals():
    report = analyze(toySpec(), 64, 64)
    assert report.stages["aux"].params > 0
    assert report.totalParams == sum(s.params for s in report.rows() if s.stage != "aux")


# ==================================================================================================
# Multiply-adds
# ==================================================================================================


def test_densenet121_backbone_macs():
    report = analyze(configSpec("dn121"), 1024, 1024)
    assert report.backboneMacs / 1e9 == pytest.approx(56.1, rel=0.1)


@pytest.mark.parametrize("config, expected", [("ldn121_64", 66.5), ("ldn121_32", 75.4), ("ddn121_8", 147.8)])
def test_model_macs(config, expected):
    report = analyze(configSpec(config), 1024, 1024)
    assert report.totalMacs / 1e9 == pytest.approx(expected, rel=0.2)


def test_dilated_backbone_costs_more_than_the_ladder():
    ladder = analyze(configSpec("ldn121_32"), 512, 512).totalMacs
    dilated = analyze(configSpec("ddn121_8"), 512, 512).totalMacs
    assert dilated > 1.5 * ladder


def test_macs_scale_with_the_pixel_count():
    report = analyze(toySpec(use_spp=False), 64, 64)
    assert report.macsAt(64, 64) == report.totalMacs
    assert report.macsAt(128, 128) == 4 * report.totalMacs
    assert report.macsAt(64, 128) == 2 * report.totalMacs


@pytest.mark.parametrize("height, width", [(48, 64), (64, 80), (1, 1)])
def test_resolution_must_be_a_multiple_of_the_downsampling_factor(height, width):
    spec = toySpec()
    with pytest.raises(ShapeError, match="d=32"):
        countMacs(spec, height, width)
    with pytest.raises(ShapeError, match="d=32"):
        analyze(spec, height, width)
    with pytest.raises(ShapeError, match="d=32"):
        simulatePolicyCache(spec, "cat_proj", height, width)


def test_residual_emulation_of_a_dense_block_costs_more():
    block = buildDenseBlockModel(16, 4, 8)
    initParameters(block.network, 0)
    dense = networkMacs(block.network, 16, 16)["block1"]
    residual = networkMacs(emulateDenseBlockAsResidual(block), 16, 16)["block1"]
    assert residual > dense


def test_table_output():
    report = analyze(toySpec(), 64, 64)
    rows = report.csvRows()
    assert rows[0] == list(CSV_HEADER)
    assert [row[0] for row in rows[1:-1]] == [
        "stem", "block1", "block2", "block3", "block4", "spp", "upsampling", "classifier", "aux",
    ]
    assert rows[-1][0] == "total"
    table = report.toTable()
    assert table.startswith("# toy d=32 u=4 at 64x64")
    assert "block4" in table


# ==================================================================================================
# Caches
# ==================================================================================================


def test_cache_formulas():
    assert cacheResnet(3, 256) == 1024
    assert cacheDensenet(64, 6, 32) == 224
    assert naiveConcatCache(16, 4, 32) == 32 * 4 ** 2
    with pytest.raises(ValueError):
        cacheDensenet(0, 6, 32)


def test_naive_concatenation_grows_quadratically():
    sizes = [4, 8, 16, 32, 64]
    naive = [naiveConcatCache(16, n, 32) for n in sizes]
    slope = math.log(naive[-1] / naive[0]) / math.log(sizes[-1] / sizes[0])
    assert slope >= 1.8
    shared = [cacheDensenet(16, n, 32) for n in sizes]
    assert math.log(shared[-1] / shared[0]) / math.log(sizes[-1] / sizes[0]) < 1.1


def test_block_caches():
    assert blockCaches(ArchSpec())["block1"] == 224
    assert blockCaches(ArchSpec(backbone="rn50"))["block1"] == 1024


def test_policy_caches():
    report = analyze(toySpec(), 64, 64, batch=2, withPolicies=True)
    caches = report.policyCacheBytes
    assert set(caches) == {
        "none", "conv3x3_only", "cat_proj", "cat_proj_and_3x3", "block_stem_td_up", "unit_whole",
        "unit_whole_plus_stem_td_up",
    }
    assert all(caches["none"] > value for name, value in caches.items() if name != "none")
    assert caches["unit_whole"] < caches["cat_proj"]
    assert analyze(toySpec(), 64, 64).policyCacheBytes == {}


def test_policy_cache_scales_with_the_batch():
    spec = toySpec()
    assert simulatePolicyCache(spec, "cat_proj", 64, 64, batch=4) == 4 * simulatePolicyCache(spec, "cat_proj", 64, 64)


def test_residual_policy_table_skips_dense_policies():
    spec = ArchSpec(backbone="rn18", output_stride=32, num_classes=3)
    report = analyze(spec, 64, 64, withPolicies=True)
    assert "cat_proj" not in report.policyCacheBytes
    assert "unit_whole" in report.policyCacheBytes


# ==================================================================================================
# Receptive fields
# ==================================================================================================


def test_unit_spans():
    assert unitSpan(ArchSpec()) == {"block1": 9, "block2": 17, "block3": 33, "block4": 65}
    dilated = unitSpan(configSpec("ddn121_8"))
    assert dilated["block4"] == unitSpan(configSpec("dn121"))["block4"] == 65
    assert dilated["block3"] == 33


def test_unit_spans_of_split_blocks():
    fields = unitSpan(ArchSpec(downsample_factor=64))
    assert fields["block3"] == 2 * 32 + 1
    assert fields["block4"] == 2 * 64 + 1
