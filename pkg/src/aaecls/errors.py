"""Exception types shared across the package, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration (CLI exit code 1)."""

    exit_code = 1


class DataError(Exception):
    """Missing or malformed data, manifests, or checkpoints (CLI exit code 2)."""

    exit_code = 2


class TrainingDiverged(Exception):
    """A non-finite loss aborted training (CLI exit code 3)."""

    exit_code = 3
