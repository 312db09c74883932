"""Exception types shared across the package.

Everything raised on bad data, bad models, or failed numerics derives from
``TrajgpError`` so the CLI can map the whole family to exit code 2.
"""


class TrajgpError(Exception):
    """Base class for all trajgp errors."""


class SchemaError(TrajgpError):
    """Cohort file header or per-subject field consistency violation."""


class ParseError(TrajgpError):
    """Unreadable or non-finite value in a cohort or model payload."""


class DuplicateVisitError(TrajgpError):
    """Two visits of one subject share a time stamp."""


class EmptyCohortError(TrajgpError):
    """A generator config or filter produced zero subjects."""


class SplitError(TrajgpError):
    """Cohort too small (or fractions invalid) for a train/val/test split."""


class HistoryError(TrajgpError):
    """History length h outside 1 <= h < number of visits."""


class ShapeError(TrajgpError):
    """Dimension mismatch between arrays that must conform."""


class FactorizationError(TrajgpError):
    """Cholesky failed even after jitter escalation."""


class OptimizerError(TrajgpError):
    """Non-finite gradient or loss inside an optimization step."""


class CacheError(TrajgpError):
    """Backward pass invoked with a cache from a different forward pass."""


class TrainingError(TrajgpError):
    """Population training failed or violated the ascent contract."""


class FitError(TrajgpError):
    """Subject-specific GP fit failed."""


class FormatError(TrajgpError):
    """Serialized model/estimator has an unsupported version."""


class ParameterError(TrajgpError):
    """Scalar parameter (e.g. a correlation) outside its legal range."""


class GridCoverageError(TrajgpError):
    """Evaluation grid does not contain a held-out visit time."""


class BenchmarkError(TrajgpError):
    """Benchmark preconditions violated (empty test set, split leakage)."""
