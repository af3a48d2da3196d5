from dataclasses import dataclass

import pytest

from ldnkit.exceptions import ConfigError
from ldnkit.utils import atomicOutput, dataclassFromDict, isPowerOfTwo, roundHalfUp


@dataclass
class Section:
    size:  int = 1
    label: str = "a"


def test_is_power_of_two():
    assert all(isPowerOfTwo(value) for value in (1, 2, 32, 64))
    assert not any(isPowerOfTwo(value) for value in (0, -4, 6, 48))


def test_round_half_up():
    assert roundHalfUp(2.5) == 3
    assert roundHalfUp(0.5) == 1
    assert roundHalfUp(1.49) == 1


def test_atomic_output_replaces_on_success(tmp_path):
    target = tmp_path / "nested" / "out.txt"
    with atomicOutput(target) as tempPath:
        tempPath.write_text("new")
    assert target.read_text() == "new"
    assert [path.name for path in target.parent.iterdir()] == ["out.txt"]


def test_atomic_output_keeps_the_original_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")
    with pytest.raises(RuntimeError):
        with atomicOutput(target) as tempPath:
            tempPath.write_text("partial")
            raise RuntimeError("interrupted")
    assert target.read_text() == "old"
    assert [path.name for path in tmp_path.iterdir()] == ["out.txt"]


def test_dataclass_from_dict():
    assert dataclassFromDict(Section, {"size": 4}, "section") == Section(size=4)
    with pytest.raises(ConfigError, match="Unknown fields in 'section': colour"):
        dataclassFromDict(Section, {"colour": "red"}, "section")
    with pytest.raises(ConfigError, match="must be a JSON object"):
        dataclassFromDict(Section, [1], "section")
