"""Loading of JSON configuration documents.

A document is a JSON object with up to three sections: ``arch`` (:class:`.ArchSpec`), ``train``
(:class:`.TrainConfig`) and ``synth`` (:class:`.SynthSpec`). Unknown keys are rejected at every
level.
"""


from __future__ import annotations

from typing import Optional, Union
from dataclasses import dataclass
from pathlib import Path
import json
import logging

from .dataio import SynthSpec
from .exceptions import ConfigError
from .nets import ArchSpec
from .trainer import TrainConfig


logger = logging.getLogger(__name__)


SECTIONS = ("arch", "train", "synth")


@dataclass
class ConfigDocument:
    arch:  Optional[ArchSpec]    = None
    train: Optional[TrainConfig] = None
    synth: Optional[SynthSpec]   = None

    @staticmethod
    def fromDict(data: dict) -> ConfigDocument:
        if not isinstance(data, dict):
            raise ConfigError("A configuration document must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Unknown sections {', '.join(unknown)}; expected {', '.join(SECTIONS)}")
        return ConfigDocument(
            arch  = ArchSpec.fromDict(data["arch"]) if "arch" in data else None,
            train = TrainConfig.fromDict(data["train"]) if "train" in data else None,
            synth = SynthSpec.fromDict(data["synth"]) if "synth" in data else None,
        )

    def toDict(self) -> dict:
        return {name: getattr(self, name).toDict() for name in SECTIONS if getattr(self, name) is not None}

    def require(self, section: str):
        """Returns ``section``, raising a :class:`.ConfigError` if the document lacks it"""
        value = getattr(self, section)
        if value is None:
            raise ConfigError(f"The configuration document has no {section!r} section")
        return value


def loadDocument(filePath: Union[Path, str]) -> ConfigDocument:
    """Reads and validates the configuration document at ``filePath``"""
    try:
        data = json.loads(Path(filePath).read_text())
    except OSError as e:
        raise ConfigError(f"Could not read configuration {filePath}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Configuration {filePath} is not valid JSON: {e}") from e
    document = ConfigDocument.fromDict(data)
    logger.debug("Loaded configuration %s with sections %s", filePath, ", ".join(document.toDict()))
    return document
