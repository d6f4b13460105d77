class CalidetError(Exception):
    """
    Base class for all errors raised by calidet.
    """


class EdgeValidationError(CalidetError, ValueError):
    pass


class AnnotationError(CalidetError, ValueError):
    pass


class NumericalError(CalidetError, FloatingPointError):
    pass


class DetectorError(CalidetError, RuntimeError):
    """
    Raised when a prediction source fails. `trace` holds whatever part of a
    self-calibration run finished before the failure.
    """

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
