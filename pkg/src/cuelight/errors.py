"""Exception types shared across the package."""


class CuelightError(Exception):
    pass


class InvalidArgument(CuelightError, ValueError):
    pass


class InvalidModel(CuelightError, ValueError):
    pass


class BackendError(CuelightError, RuntimeError):
    pass


class IngestionError(CuelightError, OSError):
    pass


class AnnotationParseError(CuelightError, ValueError):
    pass


class ConfigError(CuelightError, ValueError):
    pass


class CheckFailure(CuelightError, ArithmeticError):
    pass


class UndefinedMetric(CuelightError, ValueError):
    pass


class TrainingDiverged(CuelightError, RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DegenerateBatchWarning(UserWarning):
    """A contrastive batch had fewer than two usable members."""
