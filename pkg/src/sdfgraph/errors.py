"""Exception types raised across the package."""


class SdfGraphError(Exception):
    """Base class for all package errors."""


class UnobservedRegion(SdfGraphError):
    """An interpolation query touched a missing or unobserved voxel."""


class FrozenSubmap(SdfGraphError):
    """Attempt to mutate the payload of a finished submap."""


class EmptyMap(SdfGraphError):
    """The grid has no observed voxels or no allocated blocks."""


class NoSurface(SdfGraphError):
    """No zero crossing exists between adjacent observed voxels."""


class NonMonotonicTimestamp(SdfGraphError):
    pass


class MissingSubmap(SdfGraphError):
    pass


class SameSubmap(SdfGraphError):
    """Both loop-closure timestamps fall inside the same submap."""


class TimestampOutOfRange(SdfGraphError):
    pass


class DegenerateWeights(SdfGraphError):
    """All isosurface weights are zero, so weighted sampling is undefined."""


class NotConnected(SdfGraphError):
    """The pose graph is not connected through odometry constraints."""


class SolverDiverged(SdfGraphError):
    pass


class EmptyCollection(SdfGraphError):
    pass


class InsufficientCorrespondences(SdfGraphError):
    pass
