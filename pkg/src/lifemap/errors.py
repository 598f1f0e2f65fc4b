"""Exception types shared across the package."""


class LifemapError(Exception):
    """Base class for all package errors."""


class FrameMismatchError(LifemapError):
    """Operands refer to incompatible coordinate frames."""


class RotationDomainError(LifemapError):
    """Rotation angle outside the invertible domain of the logarithm."""


class GraphValidationError(LifemapError):
    """Pose graph violates a structural invariant."""


class SessionFormatError(LifemapError):
    """On-disk session directory is malformed."""


class ResourceNotFoundError(LifemapError):
    """Requested vertex resource does not exist."""


class DisconnectedSessionError(LifemapError):
    """A session has no inter-session link to the anchor component."""

    def __init__(self, session_id: str):
        super().__init__(f"session {session_id!r} is not connected to the anchor session")
        self.session_id = session_id


class OptimizerError(LifemapError):
    """Optimization aborted; carries the report accumulated so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(LifemapError):
    """Invalid pipeline configuration; names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class InvalidEndpointError(LifemapError):
    """Planner start or goal lies on an unknown or untraversable cell."""
