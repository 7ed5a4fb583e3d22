"""Numerics laboratory for the exact time reversal of an Ornstein-Uhlenbeck diffusion.

The forward process dX_t = -X_t dt + sqrt(2) dB_t has a closed-form transition,
and for atomic or Gaussian-mixture data laws the score of its marginals is
explicit. That makes every piece of the reverse-time construction checkable:
samplers against closed-form marginals, density solvers against stored forward
solutions, and regression losses against their exact minimizer. The central
empirical fact the toolkit demonstrates: the exact reverse process lands on the
training atoms (memorization), with landing probabilities given in closed form.
"""

from .core import (
    ConfigError,
    NumericalError,
    RandomStream,
    SampleSet,
    Schedule,
    StatisticsError,
    TransitionCoeffs,
    coeffs,
    forward_sample,
    make_blobs,
    make_grid,
    make_ring,
    make_schedule,
)
from .scores import (
    GaussianMixtureScore,
    KernelScore,
    PredictorScore,
    ScoreField,
    score_from_eps_predictor,
)
from .samplers import (
    InitialLaw,
    StepParams,
    TrajectoryBatch,
    dirac_exact_marginal,
    em_step,
    exact_step,
    exact_step_coeffs,
    gaussian_product,
    ode_step,
    posterior_step,
    read_binary,
    reverse_drift,
    reverse_drift_hyperbolic,
    run_reverse,
    sinh_step,
    sinh_step_coeffs,
)
from .pde import (
    DensityGrid,
    PdeRunReport,
    PdeSolution,
    highfreq_energy,
    mixture_density_grid,
    solve_forward,
    solve_reverse_stable,
    solve_reverse_transport,
    solve_reverse_unstable,
)
from .analysis import (
    MemorizationReport,
    TimeReversalReport,
    expected_terminal_weights,
    memorization_report,
    sliced_w2,
    terminal_weights,
    time_reversal_check,
    voronoi_assign,
    w2_to_dirac,
    wasserstein1d,
)
from .losses import (
    LossEstimate,
    TimeSampling,
    c_weight,
    constant_shift_predictor,
    eps_total_loss,
    kernel_xbar_predictor,
    nearest_atom_predictor,
    random_feature_perturbation,
    riemann_eps_loss,
    score_loss,
    total_loss,
    variance_floor,
    zero_predictor,
)
from .config import ExperimentConfig, load_config

__version__ = "0.1.0"
