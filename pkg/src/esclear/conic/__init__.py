from .program import (  # noqa: F401
    ConeProgram,
    ConicBackend,
    ConicSolution,
    SolveStatus,
    primal_residuals,
    verify_infeasibility_certificate,
    verify_unboundedness_certificate,
)
from .backends import ClarabelBackend, get_backend  # noqa: F401
from .assemble import (  # noqa: F401
    SocpModel,
    SocpVars,
    TightnessReport,
    assemble_socp,
    check_tightness,
    recompute_voltages,
)
