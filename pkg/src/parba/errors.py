"""Exception types shared across the package."""

from __future__ import annotations


class ParbaError(Exception):
    """Base class for all package-specific errors."""


class DepthNonPositive(ParbaError):
    """A 3D point sits at or behind a projection center.

    Signals a degenerate configuration; callers typically treat the
    observation as an outlier candidate.
    """

    def __init__(self, camera_index: int, point_index: int, depth: float):
        self.camera_index = camera_index
        self.point_index = point_index
        self.depth = depth
        super().__init__(
            f"non-positive depth {depth:.6g} for camera {camera_index}, "
            f"point {point_index}"
        )


class NonPositiveRedundancy(ParbaError):
    """Redundancy 2*K - #free parameters is not positive."""


class SingularPointBlock(ParbaError):
    """A 3x3 point block of the normal equations could not be inverted."""

    def __init__(self, point_index: int):
        self.point_index = point_index
        super().__init__(f"singular 3x3 normal block for point {point_index}")


class CgStagnated(ParbaError):
    """Conjugate gradients hit the iteration cap above tolerance."""

    def __init__(self, iterations: int, relative_residual: float):
        self.iterations = iterations
        self.relative_residual = relative_residual
        super().__init__(
            f"CG stagnated after {iterations} iterations "
            f"(relative residual {relative_residual:.3e})"
        )


class DivergenceDetected(ParbaError):
    """The adjustment error grew persistently instead of shrinking.

    Carries the convergence trace collected so far (``trace`` attribute,
    may be None for the serial adjuster).
    """

    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)


class IntersectionDiverged(ParbaError):
    """Single-point intersection failed to reduce its cost."""

    def __init__(self, point_index: int):
        self.point_index = point_index
        super().__init__(f"intersection diverged for point {point_index}")


class ParseError(ParbaError):
    """Malformed input file."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class VersionMismatch(ParbaError):
    """Native block file with an unsupported version tag."""


class IndexOutOfRange(ParbaError):
    """An observation references a camera or point that does not exist."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class SpecInfeasible(ParbaError):
    """A generator spec whose overlap geometry yields no shared points."""
