"""Label-free online adaptation of Kalman-filter noise statistics via
optimal transport, with simulators and a drift-experiment harness."""

__version__ = "0.1.0"

from .ssm import (  # noqa: F401
    SsmSpec,
    CovariancePair,
    Trajectory,
    lorenz_spec,
    nclt_spec,
    linear1d_spec,
    lorenz_transition,
    nclt_transition,
    measure,
    simulate,
    covariance_from_ratio,
)
from .ekf import (  # noqa: F401
    StateEstimate,
    NoiseParams,
    PredictiveMeasurement,
    jacobian_f,
    predict,
    predictive_measurement,
    update,
    run_filter,
)
from .ot import (  # noqa: F401
    DiscreteMeasure,
    TransportPlan,
    cost_matrix,
    sinkhorn,
    ipot,
    lp_exact,
    gaussian_w2_sq,
    ot_loss_and_point_grad,
)
from .adapt import (  # noqa: F401
    AdaptConfig,
    ResidualWindow,
    OptimizerState,
    warmup_lr,
    build_source,
    build_target,
    theta_gradient,
    adapt_step,
    run_otak_filter,
    innovation_stats,
)
from .bench import (  # noqa: F401
    DriftScenario,
    MethodResult,
    mse_db,
    run_scenario,
    drift_sweep,
    convergence_curve,
)
