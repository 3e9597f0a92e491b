"""
Exception hierarchy shared by every stage of the attention pipeline.
"""

from typing import Optional


class AttentionSimError(Exception):
    """Base class for errors raised by the simulator"""


class GeometryError(AttentionSimError, ValueError):
    """Event coordinates fall outside the sensor geometry"""


class TimestampRangeError(AttentionSimError, ValueError):
    """Event timestamp lies outside the binning horizon"""


class DimensionError(AttentionSimError, ValueError):
    """Two operands (frames, tensors, layer specs) do not have matching shapes"""


class AerParseError(AttentionSimError, ValueError):
    def __init__(self, message: str, line_no: Optional[int] = None, path: Optional[str] = None):
        self.line_no = line_no
        self.path = path
        location = ""
        if path is not None:
            location += f"{path}"
        if line_no is not None:
            location += f":{line_no}"
        super().__init__(f"{location}: {message}" if location else message)


class MetricRangeError(AttentionSimError, ValueError):
    """A similarity score left the [0, 1] interval"""


class UndefinedRatioError(AttentionSimError, ZeroDivisionError):
    """Relative score requested against a zero reference score"""


class IntensityDomainError(AttentionSimError, ValueError):
    """Log-intensity requested for a non-positive intensity"""


class ConfigurationError(AttentionSimError):
    """Experiment or model configuration is invalid or incomplete"""


class CheckpointFormatError(AttentionSimError):
    """Checkpoint file has a wrong magic, version or truncated payload"""


class TrainingDivergedError(AttentionSimError, RuntimeError):
    def __init__(self, message: str, epoch: int, layer: str):
        self.epoch = epoch
        self.layer = layer
        super().__init__(f"epoch {epoch}, layer '{layer}': {message}")
