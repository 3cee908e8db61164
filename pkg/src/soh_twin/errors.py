"""Exception hierarchy shared by every stage of the pipeline."""


class SohTwinError(Exception):
    """Base class for all errors raised by this package."""

    #: short machine-readable reason used by the command line
    reason = "error"


class InputError(SohTwinError):
    reason = "input-error"


class CyclesNotFoundError(InputError):
    reason = "cycles-not-found"


class LabelsNotFoundError(InputError):
    reason = "labels-not-found"


class ArtifactNotFoundError(InputError):
    """An output of an earlier pipeline stage is missing."""

    reason = "artifact-not-found"


class ParseError(InputError):
    reason = "parse-error"


class MissingLabelError(ParseError):
    reason = "missing-label"


class ConfigError(InputError):
    reason = "config-error"


class SplitError(InputError):
    reason = "split-error"


class DegenerateDataError(InputError):
    reason = "degenerate-data"


class KneeNotFoundError(DegenerateDataError):
    reason = "knee-not-found"


class AlignmentError(SohTwinError):
    """Singular warped Gram matrix or other numerical failure while warping."""

    reason = "alignment-error"


class ModelInputError(SohTwinError):
    reason = "model-input"


class TrainingError(SohTwinError):
    reason = "training-error"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ModelFormatError(SohTwinError):
    reason = "model-format"


class GridMismatchError(ModelFormatError):
    reason = "grid-mismatch"


class MatchExhaustedError(SohTwinError):
    reason = "match-exhausted"


class GridMismatchWarning(UserWarning):
    """The grid a model was trained with differs from the encoder in use."""
