"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input lies outside a declared domain (parameter box or scheduling range)."""


class DimensionError(ValueError):
    """Array arguments do not match the declared dimensions."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration values."""


class NumericalError(RuntimeError):
    """A numerical operation failed (factorization, divergence, state explosion)."""


class PolicyFormatError(ValueError):
    """A policy file is malformed, truncated, or has an unsupported version."""
