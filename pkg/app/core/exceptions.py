"""
Lab Exceptions

Every service raises a subclass of LabError. Orchestration code catches
LabError per stage and records the stage name in the run manifest; the API
turns it into a 400.
"""


class LabError(ValueError):
    """Base class for all laboratory failures"""


class InvalidGridError(LabError):
    """Grid fields violate their invariants"""


class DensityNotNormalizedError(LabError):
    """Probability density does not carry unit mass"""


class BoundaryViolationError(LabError):
    """Mass or wavepacket support reaches the box boundary margin"""


class PotentialHypothesisError(LabError):
    """Potential is not even, or its declared bounds do not dominate samples"""


class PathRangeError(LabError):
    """Requested time lies outside a stored density path"""


class StepSizeError(LabError):
    """Time step too large for the declared Lipschitz constant"""


class MemoryBudgetError(LabError):
    """Tensor-product object exceeds the configured memory budget"""


class MarginalRangeError(LabError):
    """Marginal order n outside 1..N"""


class IncompatibleInputsError(LabError):
    """Grids, hbar or dimensions of the inputs do not match"""


class InfeasiblePlanError(LabError):
    """Transport plan marginals do not match the measures"""


class NonProductMeasureError(LabError):
    """Tensor transport bound requested for a non-product input"""


class NoFeasibleCouplingError(LabError):
    """No coupling construction applies to the inputs"""


class CouplingDriftError(LabError):
    """Propagated coupling left the coupling set beyond tolerance"""


class ConfigError(LabError):
    """Experiment configuration cannot be parsed or resolved"""
