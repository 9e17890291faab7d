"""Exception types raised across the package."""


class TpmcuError(Exception):
    """Base class for all package errors."""


class ConfigError(TpmcuError, ValueError):
    """Invalid or unreadable model/run configuration."""


class IndivisibleHeads(ConfigError):
    """The number of attention heads is not a multiple of the chip count."""


class IndivisibleIntermediate(ConfigError):
    """The intermediate (FC) dimension is not a multiple of the chip count."""


class ShapeMismatch(TpmcuError, ValueError):
    pass


class CacheFull(TpmcuError):
    pass


class PlanMismatch(TpmcuError, ValueError):
    """A partition plan does not match the config, weights or caches it is used with."""


class InconsistentPlan(TpmcuError, ValueError):
    """Residency/partition inputs handed to the simulator disagree with each other."""
