"""Exceptions shared across the simulator."""


class AsymsimError(Exception):
    pass


class ConfigError(AsymsimError):
    """Bad experiment or hardware configuration (CLI exit code 2)."""


class OutOfMemoryError(AsymsimError):
    """A placement or allocation cannot fit the available capacity (exit code 3)."""


class BudgetExceededError(AsymsimError):
    """An exhaustive search exceeds its candidate budget (exit code 4)."""


class ResidencyFault(AsymsimError):
    """Simulation bug: memory state inconsistent with the active mapping."""
