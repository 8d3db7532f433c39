"""
    file with helper functions, config access and package errors
"""

import os
from pathlib import Path
import yaml
import structlog


ROOT_DIR = Path(__file__).parent.parent
CONFIG_PATH = os.path.join(ROOT_DIR, "configs/config.yml")
HARDWARE_DIR = os.path.join(ROOT_DIR, "configs/hardware")

log = structlog.get_logger()


class ConfigParser:
    """
    Parse yml config configs/config.yml to python dict

    Attributes:
        config_path: Path to config file.

    """

    def __init__(self, config_path: str = CONFIG_PATH):
        self.path = config_path

        with open(self.path, "r") as stream:
            self.config = yaml.safe_load(stream)

    def section(self, name: str) -> dict:
        """
        Get config section, empty dict if the section is absent.

        Args:
            name: Top level key of the config.

        Returns:
            Section dict.
        """
        return dict(self.config.get(name) or {})


class ShapeMismatchError(ValueError):
    """Tensor shapes do not conform to the operator."""


class DomainError(ValueError):
    """Relaxation requested outside the function domain."""


class ScheduleError(ValueError):
    """Schedule is invalid or violates a hard resource rule."""


class InfeasibleScheduleError(ScheduleError):
    """No candidate schedule survives the hard rules."""


class UnknownOpError(KeyError):
    """Operator kind is not supported."""


class MisclassifiedInputError(ValueError):
    """Input is not verified even at zero radius."""


class ModelLoadError(IOError):
    """Model, embedding or metafile could not be loaded. Message names the path."""


class ProfilerError(RuntimeError):
    """
    Profiler callback failed during tuning.

    Attributes:
        trace: Partial ``TuningHistory`` collected before the failure.
    """

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
