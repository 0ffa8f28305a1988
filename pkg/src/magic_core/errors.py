"""Exception hierarchy. Each class maps to one CLI error category."""


class MagicError(Exception):
    category = "runtime"


class ConfigError(MagicError, ValueError):
    """Invalid topology or shape configuration."""

    category = "config"


class InputError(MagicError, ValueError):
    """Bad caller-supplied data (sample ranges, image shapes, lengths)."""

    category = "input"


class UsageError(MagicError, RuntimeError):
    """API called in the wrong state or with the wrong kind of argument."""

    category = "usage"


class PlannerError(MagicError, RuntimeError):
    """Internal scheduling invariant broken; indicates a bug."""

    category = "internal"


class TrainingError(MagicError, RuntimeError):
    category = "training"


class CheckpointError(MagicError):
    category = "checkpoint"


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ConfigHashMismatchError(CheckpointError):
    pass


class CorruptPayloadError(CheckpointError):
    pass
