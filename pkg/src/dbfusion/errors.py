"""Exception types shared across the package."""


class DBFusionError(Exception):
    pass


class DimensionError(DBFusionError, ValueError):
    pass


class NumericError(DBFusionError, ArithmeticError):
    pass


class DegenerateInputError(DBFusionError, ValueError):
    def __init__(self, message: str, index=None):
        super().__init__(message)
        self.index = index


class DegenerateOutputError(DBFusionError, ValueError):
    pass


class ConfigError(DBFusionError, ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class TokenizerError(DBFusionError, ValueError):
    pass


class SequenceLengthError(DBFusionError, ValueError):
    pass


class IngestionError(DBFusionError, IOError):
    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record


class SceneSpecError(DBFusionError, ValueError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, step: int, batch_ids=(), max_grad_norm: float = float("nan")):
        super().__init__(f"{message} (step={step}, batch={list(batch_ids)}, max_grad_norm={max_grad_norm:.4g})")
        self.step = step
        self.batch_ids = list(batch_ids)
        self.max_grad_norm = max_grad_norm
