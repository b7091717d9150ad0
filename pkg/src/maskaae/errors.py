"""Exception types shared across the package."""


class MaskAAEError(Exception):
    pass


class InvalidArgumentError(MaskAAEError, ValueError):
    pass


class ShapeError(MaskAAEError, ValueError):
    pass


class NumericError(MaskAAEError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class IntegrityError(MaskAAEError):
    pass


class DegenerateError(MaskAAEError, ValueError):
    pass


class StateError(MaskAAEError, RuntimeError):
    pass


class RangeError(MaskAAEError, OverflowError):
    pass
