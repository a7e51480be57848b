class PerceptionError(Exception):
    """Base class for all errors raised by the perception stack."""


class InvalidInputError(PerceptionError, ValueError):
    """An input tensor, mask or sample collection is not usable."""


class InputShapeError(InvalidInputError):
    """Image or feature dimensions do not match the configuration."""


class EmptyDatasetError(InvalidInputError):
    """A metric or evaluation was requested over nothing."""


class ConfigError(PerceptionError, ValueError):
    """Invalid configuration value, unknown key or schema violation."""


class InfeasibleMatchError(PerceptionError):
    """More ground-truth objects than predictions to match them to."""


class TrainingAbortError(PerceptionError, RuntimeError):
    def __init__(self, component, message=None):
        self.component = component
        super().__init__(message or f"non-finite value in loss component '{component}'")


class AnnotationFormatError(PerceptionError):
    def __init__(self, message, line=None, frame=None):
        self.line = line
        self.frame = frame
        if line is not None:
            message = f"{message} (line {line})"
        elif frame is not None:
            message = f"{message} (frame {frame})"
        super().__init__(message)


class ImageReadError(PerceptionError, IOError):
    """An image file could not be decoded."""
