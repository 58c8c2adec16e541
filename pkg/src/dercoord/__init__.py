"""Data-driven coordination of distributed energy resources on a radial
feeder: online sensitivity estimation, randomized tracking control, and
convex least-cost dispatch, exercised against a built-in AC power-flow plant.
"""

from .controller import (
    ControllerConfig,
    ControlState,
    DispatchCost,
    DispatchProblem,
    DispatchResult,
    OdcpInfeasibleError,
    beta_bounds,
    beta_bounds_estimation,
    sample_mask,
    solve_odcp,
    tracking_step,
)
from .estimator import (
    EstimatorConfig,
    SensitivityEstimate,
    adaptive_alpha,
    estimation_step,
    predict_output,
    project_box,
)
from .net import (
    Bus,
    FeederError,
    FeederModel,
    Line,
    incidence_matrix,
    line_flows_approx,
    load_feeder,
    map_injections,
)
from .plant import (
    AcPlant,
    LinearPlant,
    LoadProfile,
    OperatingPoint,
    PowerFlowError,
    ReactiveLimitError,
    fd_sensitivity,
    measure_output,
    solve_power_flow,
)
from .sim import (
    Metrics,
    ScenarioConfig,
    ScenarioError,
    SimTrace,
    bundled_path,
    compute_metrics,
    equilibrium_class,
    export_trace,
    import_trace,
    load_scenario,
    run_estimation_phase,
    run_two_timescale,
)

__version__ = "0.1.0"
