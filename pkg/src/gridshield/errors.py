"""Exception types shared across the package."""


class GridShieldError(Exception):
    pass


class ShapeError(GridShieldError, ValueError):
    """An op or architecture received incompatible dimensions."""


class SchemaError(GridShieldError, ValueError):
    """Input file is missing a required column or is malformed."""


class ConfigError(GridShieldError, ValueError):
    """Pipeline configuration failed validation."""


class DivergenceError(GridShieldError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, last_finite_epoch: int):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


class ModeCollapseError(GridShieldError, RuntimeError):
    """Generator output collapsed to (nearly) a single point."""


class MissingArtifactError(GridShieldError, FileNotFoundError):
    """A stage input produced by an upstream command does not exist."""

    def __init__(self, path, producer: str):
        super().__init__(f"missing artifact {path}; run `gridshield {producer}` first")
        self.path = path
        self.producer = producer


class StageError(GridShieldError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
