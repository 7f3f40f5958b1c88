"""Exception hierarchy. The CLI maps these onto exit codes."""


class MoedError(Exception):
    """Base class for all package errors."""


class ParameterError(MoedError, ValueError):
    """Invalid model, prior or design parameter."""


class FactorizationError(MoedError, ArithmeticError):
    """A matrix factorization failed or revealed indefiniteness."""


class GuardError(MoedError):
    """A size or combinatorial guard was exceeded."""


class ConfigError(MoedError):
    """Malformed or invalid experiment configuration."""


class CacheError(MoedError):
    """On-disk kernel cache is missing, stale or corrupted."""
