"""Exception hierarchy.

Each exception carries the CLI exit code it maps to, so the frontend can
translate failures without a lookup table of its own.
"""


class CmtkError(Exception):
    exit_code = 1


class ConfigError(CmtkError, ValueError):
    """Bad user input: dimension mismatch, non-SPD B, malformed files."""

    exit_code = 2


class NoOrbitError(CmtkError):
    exit_code = 3


class EquilibriumError(CmtkError):
    """A point is too close to an equilibrium (||f|| below the guard)."""

    exit_code = 4


class IntegrationError(CmtkError):
    """Step-size underflow or step budget exhausted.

    ``t`` and ``y`` hold the last accepted state for each row so callers can
    inspect the partial trajectory.
    """

    exit_code = 5

    def __init__(self, msg, t=None, y=None):
        super().__init__(msg)
        self.t = t
        self.y = y


class EscapeError(IntegrationError):
    """Trajectory left the configured bounding box."""


class NoDecayError(CmtkError):
    """Projected variational solutions do not decay (point not in a basin)."""

    exit_code = 5


class MetricDegenerateError(CmtkError):
    """Reduced metric Q^T M Q is not positive definite."""

    exit_code = 6


class HypothesisViolated(CmtkError):
    """Gronwall hypothesis does not hold on the samples; no conclusion."""

    exit_code = 6


class CertificationFailed(CmtkError):
    exit_code = 6


class EmptyRegionError(CmtkError):
    """Every sample of a region was excluded."""

    exit_code = 2


class PerturbationTooLarge(CmtkError):
    """Synchronisation root solve diverged; use a smaller perturbation."""

    exit_code = 5
