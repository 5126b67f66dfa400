"""Exception hierarchy shared across the pipeline.

Exit-code mapping for the CLI lives in nep.cli: config errors exit 2,
validation/provenance errors exit 3, training divergence exits 4.
"""


class NepError(Exception):
    """Base class for all package errors."""


class ConfigError(NepError):
    """Invalid or unknown configuration field; message carries the field path."""


class CohortParseError(NepError):
    """Malformed cohort file."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(NepError):
    """Input violates a documented invariant or precondition."""


class ProvenanceError(NepError):
    """Artifact hashes do not match the configuration they are used with."""


class SamplingError(NepError):
    """No eligible training targets are available."""


class DivergenceError(NepError):
    """Training loss diverged; carries diagnostics for the abort report."""

    def __init__(self, message: str, step: int, recent_losses=None):
        super().__init__(message)
        self.step = step
        self.recent_losses = list(recent_losses or [])


class AdapterMergeError(NepError):
    """Low-rank adapter cannot be merged (rank mismatch or repeated merge)."""


class NonErgodicChainError(NepError):
    """Transition chain has multiple recurrent classes.

    `per_component` maps each recurrent class (tuple of token indices) to its
    stationary-weighted conditional entropy in nats.
    """

    def __init__(self, message: str, per_component=None):
        super().__init__(message)
        self.per_component = dict(per_component or {})
