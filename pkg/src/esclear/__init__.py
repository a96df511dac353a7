"""Two-layer prosumer energy-sharing market clearing on radial feeders."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    BranchSpec,
    LesmSpec,
    NetworkCase,
    NodeSpec,
    ProsumerParams,
    ValidatedCase,
    to_per_unit,
    validate_case,
)
from .bestresp import (  # noqa: F401
    AuxParams,
    BestResponse,
    Mode,
    PiecewiseLinear,
    aux_params,
    build_best_response,
    build_p_of_x,
    build_x_of_w0,
    initial_segment,
    invert_price,
    migration_path,
)
from .clearing import (  # noqa: F401
    ClearOptions,
    ClearingResult,
    CostReport,
    clear_local_only,
    clear_market,
    run_config,
)
from .caseio import load_case, save_case  # noqa: F401
from .scenarios import ScenarioTemplate, generate_case  # noqa: F401
