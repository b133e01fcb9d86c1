"""Exception types shared across the package.

Every error below corresponds to a precondition violation of a public
operation; callers that satisfy the documented preconditions never see them.
"""


class RetentiveKVError(Exception):
    """Base class for all package errors."""


class EmptyVector(RetentiveKVError):
    """Operation received an empty vector."""


class NonFinite(RetentiveKVError):
    """A value contained NaN or infinity."""


class ShapeMismatch(RetentiveKVError):
    """Operand dimensions are incompatible."""


class DegenerateNorm(RetentiveKVError):
    """layer_norm needs at least two elements."""


class DuplicateToken(RetentiveKVError):
    """Token id already present in the cache."""


class OutOfOrder(RetentiveKVError):
    """Token id not greater than all ids already cached."""


class UnknownToken(RetentiveKVError):
    """Token id not present in the cache."""


class EmptyCache(RetentiveKVError):
    """Attention over an empty cache is undefined."""


class NoVisualTokens(RetentiveKVError):
    """Cross-modal entropy needs at least one visual position."""


class NotADistribution(RetentiveKVError):
    """Weights must be nonnegative and sum to one."""


class OutOfRange(RetentiveKVError):
    """Scalar argument outside its documented interval."""


class NegativeInput(RetentiveKVError):
    """Scores to normalize must be nonnegative."""


class WrongKind(RetentiveKVError):
    """State update applied to a state of the wrong kind."""


class EmptyAttnMap(RetentiveKVError):
    """Visual state initialization needs at least one patch."""


class InfeasiblePlanting(RetentiveKVError):
    """More planted tokens requested than orthogonal directions available."""


class DegenerateFit(RetentiveKVError):
    """Gate calibration saw no variation in its regressor."""


class ConfigError(RetentiveKVError):
    """Config file problem; message carries the line number."""
