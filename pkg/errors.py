"""
Exception taxonomy shared by every pipeline stage.
Library code raises these; only cli.py and run_experiment.py turn them into
exit codes and banners.
"""


class PoseUncertaintyError(Exception):
    """Root of every error raised by the toolkit."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class ConfigError(PoseUncertaintyError):
    """Invalid or missing configuration key, or an unresolvable path."""


class MissingArtifactError(PoseUncertaintyError):
    """A command needs a file produced by an earlier stage that is not there."""


# ---------------------------------------------------------------------------
# poseseq format
# ---------------------------------------------------------------------------

class PoseFormatError(PoseUncertaintyError):
    """Base class for poseseq read/write failures. `field` names the culprit."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class HeaderError(PoseFormatError):
    """Header line missing, not JSON, or internally inconsistent."""


class PayloadLengthError(PoseFormatError):
    """Payload byte count disagrees with the shape declared in the header."""


class NonFiniteError(PoseFormatError):
    """NaN or infinite coordinate values."""


class UnitsError(PoseFormatError):
    """Header declares units other than millimeters."""


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------

class ShapeMismatchError(PoseUncertaintyError, ValueError):
    """Tensor shapes do not agree."""


class NonFiniteInputError(PoseUncertaintyError, ValueError):
    """NaN (or inf) found where finite values are required."""


class PriorError(PoseUncertaintyError):
    """Invalid prior family, scope or parameter table."""


class PriorSingularityError(PriorError):
    """Sig5 evaluated with theta2 + theta4 == 0 (rate denominator vanishes)."""


class HorizonError(PoseUncertaintyError, ValueError):
    """Requested horizon is not on the frame grid or lies beyond T."""


# ---------------------------------------------------------------------------
# Training / checkpoints
# ---------------------------------------------------------------------------

class TrainingDivergedError(PoseUncertaintyError):
    """Loss became non-finite during optimisation."""

    def __init__(self, stage: str, epoch: int, value: float):
        self.stage = stage
        self.epoch = epoch
        self.value = value
        super().__init__(f"{stage} diverged at epoch {epoch} (loss={value})")


class CheckpointError(PoseUncertaintyError):
    """Base class for archive failures."""


class CheckpointVersionError(CheckpointError):
    """Archive format_version is not the one this build reads."""


class CheckpointCorruptError(CheckpointError):
    """Archive cannot be parsed (truncated payload, broken manifest)."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoints combined in one ensemble do not share an architecture."""


# ---------------------------------------------------------------------------
# Epistemic pipeline
# ---------------------------------------------------------------------------

class DegenerateGeometryError(PoseUncertaintyError):
    """All embeddings coincide; densities and distances are undefined."""


class EmptyClusterError(PoseUncertaintyError):
    """K-means kept producing an empty cluster after every re-seed."""


class DegenerateBaselineWarning(UserWarning):
    """A sampling baseline cannot produce spread (e.g. dropout rate 0)."""
