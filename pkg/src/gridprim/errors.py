"""Shared exception types."""


class InputError(ValueError):
    """Malformed or out-of-contract input (bad file, bad shape, bad value)."""


class DegenerateFitError(RuntimeError):
    """Fit impossible on the given data (rank-deficient, too few points)."""


class FlatSurfaceError(DegenerateFitError):
    """Circle-fit normal equations are singular: the samples describe a plane
    (a cylinder of unbounded radius). Callers route these segments to the
    plane branch."""


class UnderConstrainedError(RuntimeError):
    """Pose estimation left with fewer than 6 constrained degrees of freedom.

    ``null_directions`` holds the unconstrained unit directions in
    (rotation, translation) increment coordinates, one row per direction.
    """

    def __init__(self, message: str, null_directions=None):
        super().__init__(message)
        self.null_directions = null_directions
