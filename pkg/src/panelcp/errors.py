"""Exception and warning types.

Data problems derive from ``DataError`` and numerical problems from
``NumericalError`` so the command line can map them to exit codes.
"""


class PanelcpError(Exception):
    pass


class DataError(PanelcpError, ValueError):
    pass


class NumericalError(PanelcpError, ArithmeticError):
    pass


class MalformedInput(DataError):
    pass


class UnbalancedPanel(DataError):
    pass


class ParseError(DataError):
    pass


class InvalidInput(DataError):
    pass


class ScenarioTooSmall(DataError):
    pass


class SingularTilt(NumericalError):
    pass


class SingularFit(NumericalError):
    pass


class DivergedFit(NumericalError):
    pass


class DegenerateColumn(UserWarning):
    """A constant covariate column was dropped during standardization."""


class RankWarning(UserWarning):
    pass


class RidgeFallbackWarning(UserWarning):
    pass
