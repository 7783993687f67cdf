"""Exception types raised across the package."""


class GneError(Exception):
    """Base class for all package errors."""


class ParseError(GneError):
    """A spec or scenario file could not be parsed."""


class ValidationError(GneError):
    """A structural assumption failed at load time.

    Parameters
    ----------
    assumption : str
        Short name of the violated assumption.
    evidence : object, optional
        Numeric evidence (eigenvalue, witness pair, ...).
    """

    def __init__(self, assumption, evidence=None):
        self.assumption = assumption
        self.evidence = evidence
        msg = assumption if evidence is None else f"{assumption} (evidence: {evidence})"
        super().__init__(msg)


class DimensionMismatch(GneError):
    """An input vector does not match the game's dimensions."""


class ProxFailure(GneError):
    """A custom proximal callback did not converge."""


class StepSizeViolation(GneError):
    """Step sizes violate the admissibility bound of the chosen operator."""


class NotAffine(GneError):
    """pFB requested but the coupling constraints are not affine."""


class MissingCocoercivity(GneError):
    """pFB requested but no cocoercivity modulus is declared or derivable."""


class EstimationDiverged(GneError):
    """The Lipschitz estimation procedure failed to settle."""


class NotStronglyMonotone(GneError):
    """The reference solver requires a strongly monotone pseudogradient."""


class Diverged(GneError):
    """Iterates exceeded the divergence guard; inputs are likely invalid."""


class BetaOutOfRange(GneError):
    """Constant step size outside (0, 2*sigma/L_phi^2)."""


class AlphaTooLarge(GneError):
    """Contraction factor alpha >= 1/2; raise the inner iteration count K."""


class InstanceValidationError(GneError):
    """A patched game instance failed validation.

    Attributes
    ----------
    t : int
        Time step of the failing instance.
    """

    def __init__(self, t, cause):
        self.t = t
        self.cause = cause
        super().__init__(f"instance at t={t} failed validation: {cause}")


class EmptySlice(GneError):
    """No probe sample found at the requested distance shell."""


class OracleUnavailable(GneError):
    """No reference solver applies to the given game family."""


class DimensionTooLarge(GneError):
    """Enumeration oracle limited to small primal dimension."""


class LocalityViolation(GneError):
    """An agent read a block owned by a non-neighbor; implementation bug."""


class ProfileMismatch(GneError):
    """Demand or price profiles do not cover the requested horizon."""


class IslandedBus(GneError):
    """The electric network has a bus with no line."""


class PlanMissing(GneError):
    """Real-time market build requires a day-ahead plan."""
