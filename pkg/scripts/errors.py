"""
Error and warning types shared by the VibroSP modules.

Every error carries the process exit code the CLI maps it to:
1 for usage/configuration problems, 2 for bad input data and 3 for
numerical failures.
"""


class VibroSPError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


# Usage


class ConfigError(VibroSPError):
    """Invalid or inconsistent configuration value."""

    exit_code = 1


class MissingArtifactError(VibroSPError):
    """A prerequisite artifact is absent; names the subcommand producing it."""

    exit_code = 1

    def __init__(self, path, producer):
        self.path = str(path)
        self.producer = producer
        super().__init__(
            f"Missing artifact {self.path}. Run the `{producer}` subcommand first."
        )


# Data


class DataError(VibroSPError, ValueError):
    exit_code = 2


class DatasetNotFoundError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class UnknownClassError(DataError):
    pass


class MalformedRowError(DataError):
    """Non-numeric value or wrong column count in an input file."""

    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}:{line}: {reason}")


class InsufficientClassError(DataError):
    def __init__(self, label, count, required):
        self.label = label
        self.count = count
        self.required = required
        super().__init__(
            f"Class {label} has {count} windows, at least {required} are required"
        )


class InvalidWindowError(DataError):
    pass


class AlignmentError(DataError):
    """Paired inputs do not line up (lengths, ids or feature counts)."""


# Numerical


class NumericalError(VibroSPError, ValueError):
    exit_code = 3


class NonFiniteLossError(NumericalError):
    pass


class DegenerateVarianceError(NumericalError):
    pass


class AllFeaturesRemovedError(NumericalError):
    pass


class NotEnoughClassesError(NumericalError):
    pass


class PipelineStageError(NumericalError):
    def __init__(self, stage_index, stage, cause):
        self.stage_index = stage_index
        self.stage = stage
        super().__init__(f"Stage {stage_index} ({stage}) failed: {cause}")


# Warnings


class EmptyImfBandWarning(UserWarning):
    """Requested IMF band starts past the last IMF; a zero series was returned."""


class WaveletTruncationWarning(UserWarning):
    """Wavelet support at some requested scale exceeds the signal length."""


class ProbabilityClampWarning(UserWarning):
    """A predicted probability of the true class underflowed and was clamped."""


class AbsentClassWarning(UserWarning):
    """A class has no support in the labels; its per-class scores are 0."""
