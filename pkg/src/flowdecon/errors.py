"""Exception hierarchy shared by all flowdecon modules."""

from __future__ import annotations


class FlowDeconError(Exception):
    """Base class for all library errors."""


class IntegrationBlowupError(FlowDeconError):
    """A coordinate exceeded the blowup bound during integration."""

    def __init__(self, time, bound, point_index=None):
        self.time = time
        self.bound = bound
        self.point_index = point_index
        loc = "" if point_index is None else f" (batch point {point_index})"
        super().__init__(
            f"state exceeded |coord| > {bound:g} at integration time t={time:.6g}{loc}"
        )


class InvalidFrequencyError(FlowDeconError):
    """A frequency vector contains a zero (or otherwise unusable) component."""


class DependentFrequenciesError(FlowDeconError):
    """The independence scan found an integer relation among frequencies."""

    def __init__(self, coeffs, residual, harmonic=0):
        self.coeffs = tuple(int(a) for a in coeffs)
        self.residual = float(residual)
        self.harmonic = int(harmonic)
        tail = "" if harmonic == 0 else f" - 2*pi*{harmonic}"
        super().__init__(
            f"integer relation a={self.coeffs}: |a.omega{tail}| = {residual:.3g}"
        )


class MetricDegenerateError(FlowDeconError):
    """Gram matrix singular or not positive definite at the query point."""


class StencilTooCoarseError(FlowDeconError):
    """Phase jump across a finite-difference stencil exceeded pi/2."""


class SubmersionViolationError(FlowDeconError):
    """Eigenfunction differentials lost rank at a point."""

    def __init__(self, point, message="differentials rank-deficient"):
        self.point = point
        super().__init__(f"{message} at x={point}")


class InsufficientRecurrenceError(FlowDeconError):
    """Leaf sampler found fewer crossings than requested."""

    def __init__(self, found, requested, horizon):
        self.found = found
        self.requested = requested
        self.horizon = horizon
        super().__init__(
            f"found {found}/{requested} leaf crossings within T={horizon:g}; "
            f"increase the trajectory horizon"
        )


class LeafEscapeError(FlowDeconError):
    """Return-map output left the leaf beyond the drift budget."""


class TowerCoordinatesError(FlowDeconError):
    """A point could not be expressed in (leaf, angle) tower coordinates."""


class InversionFailureError(TowerCoordinatesError):
    """Tower inversion produced a point failing leaf membership."""


class ConjugacyViolationError(FlowDeconError):
    """Extracted angle block disagrees with the affine skew prediction."""


class UndersampledBinsError(FlowDeconError):
    """Angle-bin projection had bins with too few samples."""

    def __init__(self, bins, minimum):
        self.bins = list(bins)
        self.minimum = minimum
        shown = ", ".join(str(b) for b in self.bins[:8])
        more = "" if len(self.bins) <= 8 else f", ... ({len(self.bins)} total)"
        super().__init__(
            f"bins with fewer than {minimum} samples: {shown}{more}"
        )


class MissingInputError(FlowDeconError):
    """A pipeline stage requires an artifact that is absent."""


class ConfigError(FlowDeconError):
    """Invalid or unresolvable pipeline configuration."""
