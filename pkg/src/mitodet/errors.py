"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration and data
problems exit with 2, runtime divergence with 3.
"""


class ConfigError(ValueError):
    """A configuration value violates its contract (bad shape, indivisible
    size, unknown key, ...). Raised before any work is done."""


class DatasetError(ValueError):
    """A dataset manifest or its referenced files are invalid. The message
    names the offending field or path."""


class CheckpointError(RuntimeError):
    """A checkpoint file cannot be read: wrong magic, unsupported version,
    or truncated payload. The message says which."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite or runaway loss. The message records
    the offending step."""
