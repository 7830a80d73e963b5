"""Riemannian manifold optimization of weighted-sum-rate precoders for MU-MIMO downlinks."""

from .errors import *  # noqa: F401,F403
from .harness import (
    ExperimentSpec,
    generate_channels,
    initial_point,
    load_channels,
    run_experiment,
    save_channels,
    summarize,
)
from .manifolds import (
    ManifoldPoint,
    feasibility_residual,
    normalize_to_manifold,
    project_tangent,
    retract,
    riemannian_gradient,
    riemannian_hessian,
    transport,
)
from .objective import euclidean_gradient, wsr_objective
from .optimizers import (
    LineSearchParams,
    StopCriteria,
    TrustRegionParams,
    flop_counter_report,
    rcg_solve,
    rsd_solve,
    rtr_solve,
)
from .oracles import brute_force_small_wsr, fd_riemannian_gradient, gradient_check, rzf_precoder
from .types import ChannelSet, ConstraintKind, PrecoderStack, SystemConfig, TangentStack

__version__ = "0.1.0"
