"""Exception hierarchy shared across the toolkit."""


class PCStudioError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(PCStudioError):
    """An input violates a documented precondition (range, finiteness, emptiness)."""


class DimensionError(ValidationError):
    """Tensor shapes are incompatible with the operation or the configured layout."""


class DirectionNotFoundError(PCStudioError, KeyError):
    """An edit direction name does not resolve in the catalog."""


class FaceDetectionError(PCStudioError):
    """The face embedder could not find a face in the given image."""


class SingularityError(PCStudioError):
    """A denominator in a closed-form expression is zero (degenerate schedule)."""


class SynchronizationError(PCStudioError):
    """Chained diffusion branches are not at the same timestep at a merge barrier."""


class InsufficientInstancesError(PCStudioError):
    """The segmenter found fewer instances than subjects requested."""

    def __init__(self, found: int, needed: int):
        super().__init__(f"segmenter found {found} instances, need {needed}")
        self.found = found
        self.needed = needed


class FingerprintMismatchError(PCStudioError):
    """A persisted artifact was produced under a different adaptor/backend configuration."""


class ConfigError(PCStudioError):
    """A backend bundle spec is missing a component or is otherwise malformed."""


class DivergenceError(PCStudioError):
    """Training loss became non-finite or blew up past the divergence guard."""


class RangeViolationError(PCStudioError):
    """A backend returned a value outside its advertised range (contract breach)."""
