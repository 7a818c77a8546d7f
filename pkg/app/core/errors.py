from typing import Optional


class OrePanelError(Exception):
    """Base error; carries the process exit code the CLI should return"""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(OrePanelError):
    exit_code = 2


class InputError(OrePanelError):
    exit_code = 2


class InvalidCoordinateError(InputError):
    pass


class MaskFormatError(InputError):
    pass


class IntervalError(InputError):
    pass


class EmptyInputError(InputError):
    pass


class DegenerateDataError(OrePanelError):
    pass


class ConvergenceError(OrePanelError):
    """Alternating projections did not reach tolerance"""

    def __init__(self, detail: str, last_delta: float, iterations: int):
        super().__init__(detail)
        self.last_delta = last_delta
        self.iterations = iterations


class NotEstimableError(OrePanelError):
    pass
