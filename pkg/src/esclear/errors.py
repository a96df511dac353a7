"""Exception hierarchy shared across the package.

Domain errors (bad data, unreachable targets, solver-declared infeasibility)
derive from :class:`DomainError` so the CLI can map them to exit code 1.
Programming errors and internal invariant failures stay ordinary exceptions.
"""


class DomainError(Exception):
    """Base class for errors caused by user input or problem data."""


# -- case model -------------------------------------------------------------

class CaseError(DomainError):
    pass


class CycleDetected(CaseError):
    pass


class DisconnectedNode(CaseError):
    pass


class NoSlack(CaseError):
    pass


class MultipleSlack(CaseError):
    pass


class MarketOnSlack(CaseError):
    pass


class ParameterOutOfRange(CaseError):
    """Carries the offending field name in args[0]."""


class NonPositiveBase(CaseError):
    pass


# -- case file i/o ----------------------------------------------------------

class ParseError(DomainError):
    pass


class UnsupportedVersion(DomainError):
    pass


class BadTemplate(DomainError):
    pass


# -- best-response construction ---------------------------------------------

class DomainTooNarrow(DomainError):
    pass


class NumericalTieUnresolved(Exception):
    """Breakpoint sweep failed to advance; indicates a bug, not bad data."""


class OutOfRange(DomainError):
    pass


class OutOfDomain(DomainError):
    pass


class InconsistentStates(Exception):
    pass


# -- oracle -----------------------------------------------------------------

class NoValidAssignment(Exception):
    """No KKT mode assignment passed validity checks (should not happen)."""


class CapExceeded(DomainError):
    pass


class ZeroUnreachable(DomainError):
    pass


# -- clearing ---------------------------------------------------------------

class EmptyDomain(DomainError):
    pass


class NoIncumbent(DomainError):
    pass


class NodeLimit(DomainError):
    pass


class VerificationFailed(DomainError):
    """Raised under strict mode when Algorithm-3-style verification fails."""
