"""Regularized optimal transport, smoothed generative training and theory probes."""

from .distributions import (
    CostFunction,
    DiscreteDistribution,
    cost,
    cost_grad_x,
    cost_matrix,
    gaussian_grid,
    pairwise_cost,
    sample,
)
from .regularized_ot import (
    DualPotentials,
    Method,
    OtSolveReport,
    RegKind,
    Regularizer,
    StopCriteria,
    TransportPlan,
    exact_ot,
    reg_distance,
    sinkhorn_loss,
    solve_dual,
)

__version__ = "0.1.0"
