"""Exception hierarchy shared by every module.

Each class maps onto one process exit code so the command line front end
can translate failures without inspecting messages.
"""


class ProSimError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


class InputError(ProSimError):
    """Invalid user input: scenario contents, bad arguments, malformed files."""

    exit_code = 2


class ConvergenceError(ProSimError):
    """An iterative solver ran out of iterations before reaching tolerance."""

    exit_code = 3


class CalibrationError(ProSimError):
    """A calibration routine was handed infeasible targets."""

    exit_code = 3


class InternalError(ProSimError):
    """An internal invariant was violated; indicates a bug, not bad input."""

    exit_code = 4


class OscillatorStalled(ProSimError):
    """The supply voltage at an oscillator fell to or below its stall threshold.

    Raised instead of returning a number so a stopped oscillator can never be
    confused with a slow one.
    """

    exit_code = 4
