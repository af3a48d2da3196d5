import json

import numpy as np
import pytest

from ldnkit import __version__
from ldnkit.cli import main, parseResolution
from ldnkit.dataio import SegmentationDataset, colorize, loadImage, readPpm
from ldnkit.exceptions import NonFiniteGradientError
from ldnkit.trainer import Trainer, loadCheckpoint, multiScaleInfer

from conftest import CONFIGS_DIR


SMALL_DOCUMENT = {
    "arch": {
        "backbone": "toy", "units": [2, 3, 4, 3], "growth_rate": 8, "downsample_factor": 32,
        "output_stride": 4, "upsample_width": 32, "num_classes": 5,
    },
    "train": {
        "epochs": 1, "batch": 2, "crop": 64, "val_fraction": 0.5, "augmentation": "flip/crop",
        "recompute_bn": False, "checkpoint_policy": "cat_proj",
    },
    "synth": {"image_size": 64, "count": 4, "max_radius": 20, "seed": 1},
}


@pytest.fixture
def smallConfig(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_DOCUMENT))
    return path


def test_resolution_argument():
    assert parseResolution("512x1024") == (512, 1024)
    assert parseResolution("64X64") == (64, 64)


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert __version__ in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["analyze"],
        ["analyze", "--spec", "x.json", "--res", "64"],
        ["membench", "--spec", "x.json", "--res", "64x64", "--batch", "two"],
        ["--threads", "0", "gradcheck"],
        ["teleport"],
    ],
)
def test_invalid_arguments(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    assert excinfo.value.code == 1


def test_analyze(capsys, tmp_path):
    assert main(["analyze", "--spec", str(CONFIGS_DIR / "toy.json"), "--res", "128x128", "--policies", "--csv", str(tmp_path / "cost.csv")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# toy d=64 u=4 at 128x128")
    assert "unit_span block4=" in out
    assert "policy_cache none=" in out
    lines = (tmp_path / "cost.csv").read_text().splitlines()
    assert lines[0] == "block,params_M,macs_G,cache_per_pixel"
    assert lines[-1].startswith("total,")


def test_analyze_rejects_an_indivisible_resolution(capsys):
    assert main(["analyze", "--spec", str(CONFIGS_DIR / "toy.json"), "--res", "96x96"]) == 1
    assert capsys.readouterr().out == ""


def test_analyze_missing_spec(tmp_path):
    assert main(["analyze", "--spec", str(tmp_path / "absent.json")]) == 1


def test_analyze_needs_an_arch_section(tmp_path):
    path = tmp_path / "synth.json"
    path.write_text('{"synth": {"count": 3}}')
    assert main(["analyze", "--spec", str(path)]) == 1


def test_gradcheck(capsys):
    assert main(["gradcheck", "--kernel", "relu", "--trials", "2"]) == 0
    assert capsys.readouterr().out.startswith("relu: max_rel_error=")
    assert main(["gradcheck", "--kernel", "softplus"]) == 1


def test_membench(capsys, tmp_path, smallConfig):
    csvPath = tmp_path / "mem.csv"
    argv = ["membench", "--spec", str(smallConfig), "--res", "64x64", "--batch", "1", "--policy", "cat_proj", "--budget-mb", "512", "--csv", str(csvPath)]
    assert main(argv) == 0
    assert "(cat 1x1)" in capsys.readouterr().out
    header, row = csvPath.read_text().splitlines()
    assert header.endswith(",max_batch")
    assert row.startswith("cat_proj,")


def test_membench_unknown_policy(smallConfig):
    assert main(["membench", "--spec", str(smallConfig), "--res", "64x64", "--batch", "1", "--policy", "everything"]) == 1


def test_ckptcheck(capsys, smallConfig):
    assert main(["--threads", "1", "ckptcheck", "--spec", str(smallConfig), "--res", "64x64"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6
    assert all(line.endswith("max_abs_diff=0 max_output_diff=0") for line in lines)


def test_dataset_training_and_evaluation(capsys, tmp_path, smallConfig):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["make-dataset", "--spec", str(smallConfig), "--out", str(data)]) == 0
    out = capsys.readouterr().out
    assert "count=4" in out and "mean_pixel=" in out

    assert main(["train", "--config", str(smallConfig), "--data", str(data), "--out", str(run)]) == 0
    out = capsys.readouterr().out
    assert "val_miou=" in out
    assert (run / "history.csv").exists()
    assert (run / "checkpoint" / "manifest.json").exists()

    assert main(["eval", "--checkpoint", str(run / "checkpoint"), "--data", str(data), "--scales", "1.0", "0.5"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("miou=")
    assert [line.split("=")[0] for line in out[1:]] == ["iou_0", "iou_1", "iou_2", "iou_3", "iou_4"]

    prediction = tmp_path / "prediction.ppm"
    image = sorted((data / "images").glob("*.ppm"))[0]
    assert main(["infer", "--checkpoint", str(run / "checkpoint"), "--image", str(image), "--out", str(prediction)]) == 0
    assert readPpm(prediction).shape == (64, 64, 3)

    # 48 pixels at this scale, so the input is padded up to the downsampling factor
    prediction = tmp_path / "prediction_075.ppm"
    assert main([
        "infer", "--checkpoint", str(run / "checkpoint"), "--image", str(image), "--out", str(prediction),
        "--scales", "0.75",
    ]) == 0
    model = loadCheckpoint(run / "checkpoint")
    model.network.mode = "eval"
    probs = multiScaleInfer(model, loadImage(image)[None], [0.75], False, SegmentationDataset(data).meanPixel)
    np.testing.assert_array_equal(readPpm(prediction), colorize(probs[0].argmax(axis=0).astype(np.uint8)))


def test_failed_training_leaves_no_output(tmp_path, smallConfig, monkeypatch):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["make-dataset", "--spec", str(smallConfig), "--out", str(data)]) == 0
    original = Trainer.trainEpoch

    def trainEpoch(self, epoch):
        if epoch == 1:
            raise NonFiniteGradientError("Non-finite gradient for 'stem.conv.weight'")
        return original(self, epoch)

    monkeypatch.setattr(Trainer, "trainEpoch", trainEpoch)
    argv = ["train", "--config", str(smallConfig), "--data", str(data), "--out", str(run), "--epochs", "2"]
    assert main(argv) == 2
    assert not run.exists()


def test_train_rejects_an_unknown_policy(tmp_path, smallConfig):
    data = tmp_path / "data"
    assert main(["make-dataset", "--spec", str(smallConfig), "--out", str(data), "--count", "2"]) == 0
    argv = ["train", "--config", str(smallConfig), "--data", str(data), "--out", str(tmp_path / "run"), "--policy", "custom:bogus"]
    assert main(argv) == 1


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "absent"), "--data", str(tmp_path)]) == 1
