"""Exception types shared across the package."""


class EpiboxError(Exception):
    """Base class for all errors raised by this package."""


class NonPositiveDepth(EpiboxError):
    """Projection was asked for a point at or behind the camera plane."""


class DegenerateRotation(EpiboxError):
    """A 6D rotation parameterization collapsed (near-zero column norm)."""


class NonDifferentiablePoint(EpiboxError):
    """Analytic gradient requested exactly on a kink of the objective."""


class DegenerateUnion(EpiboxError):
    """Monte-Carlo IoU drew no samples inside either box."""


class EmptySampleSet(EpiboxError):
    """Aggregation was asked for the summary of zero feature samples."""


class ZeroVector(EpiboxError):
    """A similarity query feature has zero norm; cosine similarity is undefined."""


class PlacementFailure(EpiboxError):
    """Rejection sampling could not place all requested objects."""


class ParseError(EpiboxError):
    """A file could not be read as its container format (bytes / JSON)."""


class SchemaError(EpiboxError):
    """A parsed file is structurally valid but violates the expected schema."""


class VersionMismatch(SchemaError):
    """A file declares a format version this code does not understand."""
