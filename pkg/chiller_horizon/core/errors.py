from typing import Any, Dict, Optional


class ChillerHorizonError(Exception):
    """Base class for every error raised by chiller_horizon."""
    exit_code: int = 1


class ConfigError(ChillerHorizonError):
    exit_code = 2


class InputError(ChillerHorizonError, ValueError):
    """A physical input is outside its domain (NaN load, negative PLR, ...)."""


class NoFlowError(InputError):
    pass


class SeriesError(InputError):
    pass


class ContractError(ChillerHorizonError):
    """An API was used out of contract (step after done, layout mismatch, ...)."""


class NumericError(ChillerHorizonError):
    exit_code = 3


class CurveFitError(NumericError):
    pass


class NormalizationError(NumericError):
    pass


class PpoNumericError(NumericError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
