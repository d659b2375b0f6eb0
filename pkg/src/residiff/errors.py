"""Exception types that the CLI maps to distinct exit codes."""


class ConfigError(Exception):
    """Invalid, unreadable, or inconsistent experiment configuration."""


class DataError(Exception):
    """Missing, corrupt, or structurally inconsistent dataset artifacts."""


class NumericalError(RuntimeError):
    """Non-finite values encountered during optimization."""
