"""Exception types shared across the package."""


class NumericContractError(ValueError):
    """A numeric invariant was violated (mass caps, window coverage, plan sums)."""


class ConfigError(Exception):
    """A run configuration is missing, malformed, or inconsistent."""


class PropertyFailure(AssertionError):
    """A self-test property failed; carries the counterexample in the message."""
