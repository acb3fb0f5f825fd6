"""Exception hierarchy shared across the package."""


class HierfitError(Exception):
    """Base class for all hierfit errors."""


# --- data / design errors ---------------------------------------------------


class MissingColumnError(HierfitError):
    pass


class EmptyTableError(HierfitError):
    pass


class NonNumericValueError(HierfitError):
    pass


class NonPositiveTimeError(HierfitError):
    pass


class BrokenNestingError(HierfitError):
    """A child factor label appears under more than one parent label."""


class UnknownTermError(HierfitError):
    pass


class RankDeficientError(HierfitError):
    pass


class ModelSpecParseError(HierfitError):
    pass


# --- distribution errors ----------------------------------------------------


class DomainError(HierfitError):
    """Argument outside the support or valid domain."""


class InvalidParamsError(HierfitError):
    pass


class MomentUndefinedError(HierfitError):
    pass


# --- fitting errors ---------------------------------------------------------


class NotPositiveDefiniteError(HierfitError):
    pass


class NonConvergenceError(HierfitError):
    pass


class DivergedWeightsError(HierfitError):
    pass


class NotConvergedError(HierfitError):
    """Operation requires a converged fit."""


class NotNestedError(HierfitError):
    pass


class UnknownLevelError(HierfitError):
    pass


# --- diagnostics errors -----------------------------------------------------


class TooFewError(HierfitError):
    pass


class TooManyPanelsError(HierfitError):
    pass


class ConstantError(HierfitError):
    pass


# --- simulator / CLI --------------------------------------------------------


class InvalidSpecError(HierfitError):
    pass
