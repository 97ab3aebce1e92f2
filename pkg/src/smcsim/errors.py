"""Exception types shared across the simulator and attack tooling."""


class SimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimError):
    """Malformed profile or experiment configuration (unknown key, bad value)."""


class UnsupportedStrategyError(SimError):
    """The probe kind is not implemented by the active hardware profile."""


class NoLeakStrategyError(SimError):
    """The strategy is supported but cannot distinguish residency on this profile."""


class SharedPagePermissionError(SimError):
    """Write-based probe requested against a read/execute-only shared page."""
