"""Exception hierarchy shared by the solvers and the CLI."""


class SchwarzError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class InputError(SchwarzError, ValueError):
    exit_code = 2


class BandwidthError(InputError):
    """A stored nonzero couples two vertices with no path between them."""


class NotPositiveDefiniteError(InputError):
    def __init__(self, message, smallest_eigenvalue=None, block=None):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue
        self.block = block


class NotCertifiableError(SchwarzError):
    """Gershgorin lower bound is not positive."""

    exit_code = 2


class DivergenceError(SchwarzError):
    exit_code = 3

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class ScheduleExhaustedError(SchwarzError):
    exit_code = 2


class SolverTimeout(SchwarzError):
    exit_code = 4
