"""Exception hierarchy shared by every module."""


class AsalppError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AsalppError, ValueError):
    """Invalid configuration or mismatched vector length."""


class InputError(AsalppError, ValueError):
    """Invalid caller-provided input (empty prompt, wrong dimensions, ...)."""


class NumericFault(AsalppError, ArithmeticError):
    """A simulation step produced non-finite activations."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ProviderError(AsalppError, RuntimeError):
    """A remote embedding or chat provider failed after all retries."""

    def __init__(self, message: str, endpoint: str | None = None, status: int | None = None,
                 index: int | None = None):
        parts = [message]
        if endpoint:
            parts.append(f"endpoint={endpoint}")
        if status is not None:
            parts.append(f"status={status}")
        if index is not None:
            parts.append(f"index={index}")
        super().__init__(", ".join(parts))
        self.endpoint = endpoint
        self.status = status
        self.index = index


class EvolverExhausted(AsalppError, RuntimeError):
    """The evolver backend can produce no further proposals."""


class TreeStructureError(AsalppError, ValueError):
    """A node list does not form a single rooted tree."""
