"""Exception hierarchy shared by every module.

Each error carries a short machine-readable ``code`` so the CLI can turn
failures into JSON diagnoses.
"""


class MkvError(Exception):
    code = "error"

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        return {"error": self.code, "message": str(self), "details": self.details}


class InvalidMeasure(MkvError):
    code = "invalid_measure"


class GridMismatch(MkvError):
    code = "grid_mismatch"


class NotProbability(MkvError):
    code = "not_probability"


class MassLoss(MkvError):
    code = "mass_loss"


class DomainError(MkvError):
    code = "domain_error"


class Divergent(MkvError):
    code = "divergent"


class IndexSetError(MkvError):
    code = "index_set"


class EllipticityError(MkvError):
    code = "ellipticity"


class NonIntegrableSingularity(MkvError):
    code = "non_integrable_singularity"


class SeriesDiverging(MkvError):
    code = "series_diverging"


class NoEnvelope(MkvError):
    code = "no_envelope"


class AssumptionViolation(MkvError):
    code = "assumption_violation"


class MissingDerivative(MkvError):
    code = "missing_derivative"


class ParticleBlowup(MkvError):
    code = "particle_blowup"


class CFLViolation(MkvError):
    code = "cfl_violation"


class NonFiniteState(MkvError):
    code = "non_finite_state"


class UnknownScenario(MkvError):
    code = "unknown_scenario"


class ParamOutOfRange(MkvError):
    code = "param_out_of_range"


class NegativeKernel(MkvError):
    code = "negative_kernel"
