"""Numerical laboratory for controlled regime-switching diffusions.

Builds hybrid diffusion models (continuous state plus a finite regime
chain), solves their control problems under discounted, ergodic,
finite-horizon and exit-time criteria by coupled Riccati integration,
finite-difference HJB systems and seeded Monte Carlo, and runs the
robustness program: perturb the model, re-solve, replay the perturbed
policy in the true model, and track how value functions and realized
costs converge as the perturbation vanishes.
"""

__version__ = "0.1.0"

from .costs import (
    DEFAULT_BATCH,
    McEstimate,
    discounted_horizon,
    mc_discounted,
    mc_ergodic,
    mc_exit,
    mc_finite_horizon,
    pairwise_sum,
    write_estimates_csv,
)
from .errors import (
    BlowupError,
    CapFractionWarning,
    ConfigError,
    EigError,
    IoError,
    MaxIterError,
    NanError,
    RatesError,
    ShapeError,
    StepError,
    SwitchSdeError,
    UnboundedError,
)
from .hjbgrid import (
    DEFAULT_LADDER,
    ErgodicEstimate,
    Grid1D,
    GridSolution,
    estimate_ergodic,
    estimate_ergodic_policy,
    evaluate_policy_exit,
    evaluate_policy_finite_horizon,
    evaluate_policy_value,
    solve_discounted,
    solve_exit,
    solve_finite_horizon,
)
from .model import (
    ActionGrid,
    BoundaryCost,
    CostSpec,
    DiffusionFamily,
    DriftFamily,
    ExitDiscount,
    Finding,
    GeneratorSpec,
    LyapunovPair,
    ModelSpec,
    PerturbationSchedule,
    RegimeSet,
    RunningCost,
    TerminalCost,
    ValidationReport,
    check_lyapunov_sampled,
    default_sample,
    make_perturbation_sequence,
    model_from_dict,
    model_to_dict,
    validate_model,
)
from .riccati import (
    FeedbackTrajectory,
    LQSpec,
    RiccatiTrajectory,
    a_priori_bound,
    fixed_feedback_cost,
    lq_feedback,
    lq_from_model,
    riccati_defect,
    solve_coupled_riccati,
    time_lipschitz_bound,
)
from .robustness import (
    EpsOptimalityReport,
    SweepReport,
    SweepRow,
    check_eps_optimality,
    perturbed_lq_sequence,
    sweep_grid,
    sweep_lq_finite_horizon,
)
from .simulate import (
    BatchStepper,
    CallablePolicy,
    ConstantPolicy,
    GridPolicy,
    LQFeedbackPolicy,
    PathSample,
    RngStream,
    TimeGridPolicy,
    make_rng_stream,
    simulate_exit_path,
    simulate_path,
)

__all__ = [name for name in dir() if not name.startswith("_")]
