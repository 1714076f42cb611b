"""Exception hierarchy shared by all demslam modules."""


class DemSlamError(Exception):
    """Base class for all errors raised by this package."""


# -- geometry ---------------------------------------------------------------

class InvalidBounds(DemSlamError):
    """Depth-filter bounds are inconsistent (d_min >= d_max or negative)."""


class DegenerateInput(DemSlamError):
    """Input has too few points or no usable spatial spread."""


# -- DEM rasterization ------------------------------------------------------

class EmptyInput(DemSlamError):
    """An operation that requires at least one point received none."""


class ZeroExtent(DemSlamError):
    """Planar bounding box has zero span along both axes."""


class OutOfBounds(DemSlamError):
    """Point falls outside the grid bounds it is being binned into."""


class InvalidTemperature(DemSlamError):
    """Softmax reducer temperature must be > 0."""


class EmptyGrid(DemSlamError):
    """Grid has no observed cells."""


# -- descriptors ------------------------------------------------------------

class AllEmptyRegion(DemSlamError):
    """Pooling region contains no observed pixels."""


class InvalidSigma(DemSlamError):
    """Gaussian weight sigma must be > 0."""


class NoSalientContent(DemSlamError):
    """All pooling weights vanished; the tile carries no usable signal."""


class FormatError(DemSlamError):
    """Binary file does not match the expected on-disk format."""


# -- ANN index --------------------------------------------------------------

class ZeroVector(DemSlamError):
    """Cosine similarity is undefined for zero-norm vectors."""


class DuplicateId(DemSlamError):
    """Entry id already present in the index."""


class DimensionMismatch(DemSlamError):
    """Vector dimensionality differs from the index dimensionality."""


class EmptyIndex(DemSlamError):
    """Search requested on an index with no entries."""


# -- covisibility -----------------------------------------------------------

class EmptyCandidate(DemSlamError):
    """Rerank candidate has no tile descriptors."""


class SelfEdge(DemSlamError):
    """Covisibility edges between a submap and itself are not allowed."""


# -- Sim(3) optimization ----------------------------------------------------

class BranchSingularity(DemSlamError):
    """Log map evaluated at a rotation angle of pi (principal branch edge)."""


class DisconnectedGraph(DemSlamError):
    """Pose graph is not connected from the anchor node."""


class SingularSystem(DemSlamError):
    """Normal equations are singular after gauge fixing."""


# -- evaluation -------------------------------------------------------------

class NoAssociation(DemSlamError):
    """No trajectory sample pairs within the association time window."""


# -- pipeline / CLI ---------------------------------------------------------

class ConfigError(DemSlamError):
    """Configuration file or flag violates a config invariant."""


class DependencyError(DemSlamError):
    """A pipeline stage is missing an artifact a prior stage should have written."""


class UserInputError(DemSlamError):
    """Bad user-supplied input (missing file, malformed manifest, ...)."""
