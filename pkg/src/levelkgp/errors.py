"""Exception types shared across the package."""


class LevelkgpError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(LevelkgpError, ValueError):
    """Invalid kernel or model parameter (non-positive variance, etc.)."""


class ConfigurationError(LevelkgpError, ValueError):
    """Inconsistent configuration, e.g. mismatched bank dimensions."""


class InputError(LevelkgpError, ValueError):
    """Invalid operation input (NaN logits, empty counts, ...)."""


class SchemaError(InputError):
    """Input file does not match the expected schema."""


class NumericalError(LevelkgpError, RuntimeError):
    """Numerical failure that survived all recovery attempts."""


class MissingStateError(LevelkgpError, KeyError):
    """A state id is absent from a trained table and no fallback applies."""


class DegeneratePolicyError(LevelkgpError, ValueError):
    """A policy collapsed to an all-zero vector during normalization."""


class StageError(LevelkgpError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
