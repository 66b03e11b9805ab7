"""Exception types raised across the package."""


class SurgVAEError(Exception):
    """Base class for all package errors."""


class DimensionError(SurgVAEError, ValueError):
    pass


class DomainError(SurgVAEError, ValueError):
    pass


class UsageError(SurgVAEError, ValueError):
    pass


class NonFiniteError(SurgVAEError, FloatingPointError):
    pass


class ProbeError(SurgVAEError, FloatingPointError):
    pass


class SchemaError(SurgVAEError, ValueError):
    pass


class ParseError(SurgVAEError, ValueError):
    pass


class CalibrationError(SurgVAEError, RuntimeError):
    pass


class ConfigError(SurgVAEError, ValueError):
    pass


class TrainingAborted(SurgVAEError, FloatingPointError):
    """Non-finite loss during training; carries the term, batch and (when known) fold."""

    def __init__(self, term, batch_index, epoch=None, detail="", fold=None):
        self.term = term
        self.batch_index = batch_index
        self.epoch = epoch
        self.detail = detail
        self.fold = fold
        where = f"fold {fold}, " if fold is not None else ""
        msg = f"non-finite {term} at {where}epoch {epoch}, batch {batch_index}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)

    def __reduce__(self):
        return type(self), (self.term, self.batch_index, self.epoch, self.detail, self.fold)
