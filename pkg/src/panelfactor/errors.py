"""Exception hierarchy.

Every error a user can trigger with bad data or an infeasible request derives
from :class:`PanelDataError`; the command line maps those to exit code 2 and
prints the class name.  Anything else escaping the library is a bug.
"""

from __future__ import annotations

from typing import Optional


class PanelDataError(Exception):
    """Base class for data, configuration and identification errors."""


class DegeneratePanel(PanelDataError):
    """A unit or period has no observed entry, or the panel is too small."""


class NonFiniteValue(PanelDataError):
    def __init__(self, i: int, t: int):
        self.i, self.t = int(i), int(t)
        super().__init__(f"observed entry ({self.i}, {self.t}) is not finite")


class OverlapTooSparse(PanelDataError):
    def __init__(self, i: int, j: int, count: int | None = None, floor: int | None = None):
        self.i, self.j = int(i), int(j)
        self.count, self.floor = count, floor
        detail = "" if count is None else f": |Q| = {count} < {floor}"
        super().__init__(f"units {self.i} and {self.j} share too few observed periods{detail}")


class DimensionMismatch(PanelDataError):
    pass


class RankTooLarge(PanelDataError):
    pass


class EigenFailure(PanelDataError):
    pass


class SpectrumDegenerate(PanelDataError):
    pass


class PropensityUnderflow(PanelDataError):
    def __init__(self, i: int, t: int, value: float, floor: float):
        self.i, self.t = int(i), int(t)
        super().__init__(
            f"propensity {value:.3g} at observed entry ({self.i}, {self.t}) is below the floor {floor}"
        )


class CellTooSmall(PanelDataError):
    def __init__(self, level, size: int, floor: int):
        self.level, self.size, self.floor = level, int(size), int(floor)
        super().__init__(f"covariate cell {level!r} has {size} units, fewer than {floor}")


class LogitSeparation(PanelDataError):
    pass


class NoConvergence(PanelDataError):
    pass


class NoIdentifiablePeriods(PanelDataError):
    pass


class PeriodUnidentified(PanelDataError):
    def __init__(self, t: int):
        self.t = int(t)
        super().__init__(f"factor regression is not identified at period {self.t}")


class SingularMoment(PanelDataError):
    pass


class TreatedWindowTooShort(PanelDataError):
    def __init__(self, i: int, length: int, rank: int):
        self.i = int(i)
        super().__init__(
            f"unit {self.i} has {length} usable treated periods; at least {rank} are needed"
        )


class NotTreatedAt(PanelDataError):
    """Entry ``(i, t)`` is not treated; ``t=None`` means unit ``i`` never is."""

    def __init__(self, i: int, t: Optional[int] = None):
        self.i = int(i)
        self.t = None if t is None else int(t)
        where = "in any period" if self.t is None else f"at period {self.t}"
        super().__init__(f"unit {self.i} is not treated {where}")


class SingularZ(PanelDataError):
    pass


class DegenerateMask(PanelDataError):
    pass


class InvalidScenario(PanelDataError):
    pass


class ScheduleMismatch(PanelDataError):
    pass


class InputFormatError(PanelDataError):
    pass
