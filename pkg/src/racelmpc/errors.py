"""Exception types shared across the package."""


class RaceLmpcError(Exception):
    """Base class for all package errors."""


# -- track geometry ----------------------------------------------------------

class TrackError(RaceLmpcError):
    pass


class NonClosedCurve(TrackError):
    pass


class SelfIntersecting(TrackError):
    pass


class CurvatureTooHigh(TrackError):
    pass


class ProjectionAmbiguous(TrackError):
    pass


class ProjectionOutOfTube(TrackError):
    """Query point is outside the guarded tube around the centerline."""


# -- vehicle / plant ---------------------------------------------------------

class FrenetSingularity(RaceLmpcError):
    """1 - kappa(s) * e_y reached zero; curvilinear coordinates break down."""


class NonFiniteState(RaceLmpcError):
    pass


class TrackDeparture(RaceLmpcError):
    """Vehicle left the drivable corridor (|e_y| beyond the failure margin)."""


class ControllerFault(RaceLmpcError):
    """A control-policy callback raised instead of returning an input."""


# -- dataset -----------------------------------------------------------------

class DuplicateLap(RaceLmpcError):
    pass


class InsufficientData(RaceLmpcError):
    pass


class EmptyDataset(RaceLmpcError):
    pass


# -- learning ----------------------------------------------------------------

class DegenerateModel(RaceLmpcError):
    """Direct regression produced velocity dynamics with no data support."""


# -- experiments -------------------------------------------------------------

class SeedFailure(RaceLmpcError):
    """The low-speed seeding controller failed to complete its laps."""
