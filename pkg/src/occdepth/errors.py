"""Exception types shared across the toolkit."""


class InvalidArgumentError(ValueError):
    """An input violates an operation's preconditions."""


class EmptyDomainError(ValueError):
    """A reduction was asked to run over an empty set of valid pixels."""


class ConfigurationError(RuntimeError):
    """Pipeline configuration or dataset layout is unusable (CLI exit code 2)."""


class DataError(RuntimeError):
    """Input files exist but their content is malformed (CLI exit code 3)."""
