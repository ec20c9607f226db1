"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is missing, out of range, or inconsistent."""


class DegenerateQueryError(ValueError):
    """The query vector has zero L1 norm; the score temperature is undefined."""


class MappingError(KeyError):
    """A logical KV address was never written and has no physical mapping."""


class CapacityError(RuntimeError):
    """The simulated device or memory tier ran out of space."""


class ConsistencyError(RuntimeError):
    """Internal invariant violated (wrong group cover, reprogrammed page, ...)."""


class InfeasibleError(RuntimeError):
    """A scenario cannot run; the message names the binding constraint."""
