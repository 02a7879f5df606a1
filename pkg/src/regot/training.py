"""Oracle-based stochastic training of generators.

Each generator step asks a dual solver for near-optimal potentials on the
current supports, maps them to a pseudo-plan and pulls the plan-weighted cost
gradients back through the generator.  Two objectives are supported: the
regularized transport distance to the data and the Sinkhorn loss, whose
self term is estimated from two independent code batches.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Union

import numpy as np

from .distributions import (
    CostFunction,
    DiscreteDistribution,
    pairwise_cost,
    pairwise_cost_grad_x,
    sample,
)
from .generators import GeneratorParams, forward, vjp_sum
from .regularized_ot import (
    DualPotentials,
    RegKind,
    Regularizer,
    StopCriteria,
    solve_dual,
)

__all__ = [
    "Objective",
    "Oracle",
    "Fixed",
    "Thm42",
    "Sgd",
    "Adam",
    "TrainConfig",
    "GradientEstimate",
    "TrainRecord",
    "AdamState",
    "step_size",
    "adam_update",
    "estimate_gradient_regot",
    "estimate_gradient_sinkhorn",
    "full_gradient",
    "objective_value",
    "train",
    "running_min",
    "write_trajectory",
    "mode_coverage",
    "TRAJECTORY_COLUMNS",
]


class Objective(str, Enum):
    REGOT = "regot"
    SINKHORN = "sinkhorn"


class Oracle(str, Enum):
    """Where the inner problem is solved.

    ``BATCH`` solves it between the sampled batches (the practical scheme).
    ``FULL`` solves it on the full supports and then samples pairs i.i.d.,
    which makes the minibatch gradient an unbiased estimate of the plan
    gradient; this is the setting the convergence analysis assumes.
    ``EXACT`` uses the full-support plan gradient itself (no sampling noise).
    """

    BATCH = "batch"
    FULL = "full"
    EXACT = "exact"


@dataclass(frozen=True)
class Fixed:
    a: float


@dataclass(frozen=True)
class Thm42:
    """Constant step chosen from Delta, L and sigma by the two-regime rule."""


Schedule = Union[Fixed, Thm42]


@dataclass(frozen=True)
class Sgd:
    schedule: Schedule = Fixed(0.01)


@dataclass(frozen=True)
class Adam:
    lr: float = 0.003
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    objective: Objective = Objective.REGOT
    cost_fn: CostFunction = CostFunction.L1
    reg: Regularizer = Regularizer(RegKind.NORM2, 0.01)
    batch_size: int = 128
    gen_iters: int = 10_000
    disc_stop: StopCriteria = StopCriteria(max_iters=20, stat_band=0.01, check_every=1)
    disc_method: str | None = None
    optimizer: Union[Sgd, Adam] = Adam()
    delta_estimate: float | None = None
    L_estimate: float | None = None
    sigma_estimate: float | None = None
    seed: int = 0
    eval_every: int = 100
    eval_size: int = 256
    warm_start: bool = False
    self_grad: str = "total"
    oracle: Oracle = Oracle.BATCH
    track_full_grad: bool = False

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        object.__setattr__(self, "cost_fn", CostFunction(self.cost_fn))
        object.__setattr__(self, "oracle", Oracle(self.oracle))
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.gen_iters < 0:
            raise ValueError("gen_iters must be nonnegative")
        if self.self_grad not in ("total", "one_sided"):
            raise ValueError("self_grad must be 'total' or 'one_sided'")
        if isinstance(self.optimizer, Sgd) and isinstance(self.optimizer.schedule, Thm42):
            vals = (self.delta_estimate, self.L_estimate, self.sigma_estimate)
            if any(v is None for v in vals) or not (vals[0] > 0 and vals[1] > 0 and vals[2] >= 0):
                raise ValueError("the Thm42 schedule needs positive Delta and L estimates "
                                 "and a nonnegative sigma estimate")


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    g: np.ndarray
    epsilon_used: float
    statistic: float
    indices: dict = field(default_factory=dict)
    value: float = math.nan
    m_max: float = math.nan
    full_grad: np.ndarray | None = None
    converged: bool = True


TRAJECTORY_COLUMNS = ("iter", "loss_estimate", "grad_norm_sq", "epsilon_used", "statistic",
                      "step_size", "wall_ms")


@dataclass(frozen=True)
class TrainRecord:
    """One generator iteration.

    ``loss_estimate`` is the batch objective; ``full_loss`` is filled every
    ``eval_every`` iterations (NaN otherwise).  ``full_grad_norm_sq`` is the
    squared norm of the plan gradient on the full supports when it is
    available.
    """

    iter: int
    loss_estimate: float
    grad_norm_sq: float
    epsilon_used: float
    statistic: float
    step_size: float
    wall_ms: float
    full_loss: float = math.nan
    full_grad_norm_sq: float = math.nan
    m_max: float = math.nan


# ---------------------------------------------------------------------------
# step sizes and optimizers

def step_size(schedule: Schedule, t: int, T: int, Delta=None, L=None, sigma=None) -> float:
    """Step ``alpha_t``; for ``Thm42`` it is ``1/L`` while ``T < 2 Delta L / sigma^2``
    and ``sqrt(2 Delta / (L sigma^2 T))`` otherwise."""
    if isinstance(schedule, Fixed):
        return float(schedule.a)
    if not (Delta > 0 and L > 0 and sigma >= 0 and T >= 1):
        raise ValueError("Thm42 needs positive Delta, L and T and a nonnegative sigma")
    # compare T * sigma^2 with 2 Delta L to avoid overflow when sigma is tiny
    if T * sigma * sigma < 2.0 * Delta * L:
        return 1.0 / L
    return math.sqrt(2.0 * Delta / (L * T)) / sigma


@dataclass(frozen=True, eq=False)
class AdamState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def start(cls, theta) -> "AdamState":
        theta = np.array(theta, dtype=float)
        return cls(theta, np.zeros_like(theta), np.zeros_like(theta), 0)


def adam_update(state: AdamState, g, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam step (descent on the objective)."""
    g = np.asarray(g, dtype=float)
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t) if beta1 > 0 else m
    v_hat = v / (1.0 - beta2 ** t) if beta2 > 0 else v
    theta = state.theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(theta, m, v, t)


# ---------------------------------------------------------------------------
# gradient estimation

def _ratio_bound(ratio, q, p):
    # the optimal ratio is at most 1 / max(q_i, p_j) because pi*_ij <= min(q_i, p_j)
    cap = 1.0 / np.maximum(q[:, None], p[None, :])
    return float(max(np.max(ratio), np.max(cap)))


def _pair_grads(Z, Y, cost_fn, W):
    """``U_i = sum_j W_ij dc(z_i, y_j)/dz_i`` and ``V_j = sum_i W_ij dc(z_i, y_j)/dy_j``."""
    if cost_fn is CostFunction.SQUARED_L2:
        # closed form avoids the (S, S, d) tensor
        U = W.sum(axis=1)[:, None] * Z - W @ Y
        return U, W.sum(axis=0)[:, None] * Y - W.T @ Z
    G = pairwise_cost_grad_x(Z, Y, cost_fn)
    U = np.einsum("ij,ijk->ik", W, G)
    if cost_fn in (CostFunction.L1, CostFunction.EUCLIDEAN):
        # antisymmetric in the arguments
        return U, -np.einsum("ij,ijk->jk", W, G)
    Gy = pairwise_cost_grad_x(Y, Z, cost_fn)
    return U, np.einsum("ij,jik->jk", W, Gy)


def _solve(Z, Y, qa, pb, config, warm=None):
    c = pairwise_cost(Z, Y, config.cost_fn)
    return solve_dual(c, qa, pb, config.reg, method=config.disc_method,
                      warm_start=warm, stop=config.disc_stop)


def _plan_term(spec, params, Xa, Ya, qa, pb, config, rng, warm=None, Xb=None, total=False,
               sample_size=None):
    """Plan-weighted pullback for one transport term.

    Rows are the generated points ``G(Xa)``.  Columns are ``Ya`` (data) or,
    when ``Xb`` is given, the generated points ``G(Xb)`` whose pullback is
    added when ``total`` is set.
    """
    Za = forward(spec, params, Xa)
    Zb = forward(spec, params, Xb) if Xb is not None else Ya
    rep = _solve(Za, Zb, qa, pb, config, warm)
    W = rep.plan.pi
    full = None
    if sample_size is not None:
        # unbiased i.i.d. pair sampling from the solved full-support plan
        full = _pullback(spec, params, Xa, Xb, Za, Zb, W, config.cost_fn, total)
        I = rng.choice(qa.size, size=sample_size, p=qa)
        J = rng.choice(pb.size, size=sample_size, p=pb)
        Wb = rep.plan.ratio[np.ix_(I, J)] / float(sample_size) ** 2
        g = _pullback(spec, params, Xa[I], None if Xb is None else Xb[J], Za[I], Zb[J], Wb,
                      config.cost_fn, total)
    else:
        g = _pullback(spec, params, Xa, Xb, Za, Zb, W, config.cost_fn, total)
    return g, rep, full


def _pullback(spec, params, Xa, Xb, Za, Zb, W, cost_fn, total):
    U, Vb = _pair_grads(Za, Zb, cost_fn, W)
    g = vjp_sum(spec, params, Xa, U)
    if total and Xb is not None:
        g = g + vjp_sum(spec, params, Xb, Vb)
    return g


def _uniform(n):
    return np.full(n, 1.0 / n)


def estimate_gradient_regot(spec, params, codes, data, config: TrainConfig, *,
                            code_weights=None, data_weights=None, rng=None,
                            warm_start: DualPotentials | None = None) -> GradientEstimate:
    """Minibatch plan gradient of the regularized transport objective.

    With the batch oracle, ``codes`` (S, n) and ``data`` (S', d) are the
    sampled batches and weights default to uniform.  With the full oracle they
    are the full supports with their weights, and ``rng`` draws the pairs.
    """
    codes, data = np.asarray(codes, float), np.asarray(data, float)
    qa = _uniform(len(codes)) if code_weights is None else np.asarray(code_weights, float)
    pb = _uniform(len(data)) if data_weights is None else np.asarray(data_weights, float)
    S = config.batch_size if config.oracle is Oracle.FULL else None
    g, rep, full = _plan_term(spec, params, codes, data, qa, pb, config, rng, warm_start,
                              sample_size=S)
    if config.oracle is Oracle.EXACT:
        full = g
    return GradientEstimate(
        g=g, epsilon_used=rep.epsilon_certificate, statistic=rep.termination_statistic,
        value=rep.reg_distance, m_max=_ratio_bound(rep.plan.ratio, qa, pb), full_grad=full,
        converged=rep.converged, indices={"potentials": rep.potentials},
    )


def estimate_gradient_sinkhorn(spec, params, codes, data, codes_bar, codes_hat,
                               config: TrainConfig, *, code_weights=None, data_weights=None,
                               rng=None) -> GradientEstimate:
    """Minibatch gradient of the Sinkhorn loss: twice the cross-term plan
    gradient minus the self-term plan gradient.

    The self term differentiates ``c(G(x_bar), G(x_hat))`` through both
    arguments unless ``config.self_grad == "one_sided"``.
    """
    codes, data = np.asarray(codes, float), np.asarray(data, float)
    codes_bar, codes_hat = np.asarray(codes_bar, float), np.asarray(codes_hat, float)
    qa = _uniform(len(codes)) if code_weights is None else np.asarray(code_weights, float)
    pb = _uniform(len(data)) if data_weights is None else np.asarray(data_weights, float)
    qbar = _uniform(len(codes_bar)) if code_weights is None else qa
    qhat = _uniform(len(codes_hat)) if code_weights is None else qa
    S = config.batch_size if config.oracle is Oracle.FULL else None
    total = config.self_grad == "total"
    g_x, rep_x, full_x = _plan_term(spec, params, codes, data, qa, pb, config, rng, sample_size=S)
    g_s, rep_s, full_s = _plan_term(spec, params, codes_bar, None, qbar, qhat, config, rng,
                                    Xb=codes_hat, total=total, sample_size=S)
    full = None if full_x is None else 2.0 * full_x - full_s
    if config.oracle is Oracle.EXACT:
        full = 2.0 * g_x - g_s
    # the self-term certificate enters the gradient error once, the cross term twice
    return GradientEstimate(
        g=2.0 * g_x - g_s,
        epsilon_used=max(rep_x.epsilon_certificate, rep_s.epsilon_certificate),
        statistic=rep_x.termination_statistic,
        value=2.0 * rep_x.reg_distance - rep_s.reg_distance,
        m_max=max(_ratio_bound(rep_x.plan.ratio, qa, pb),
                  _ratio_bound(rep_s.plan.ratio, qbar, qhat)),
        full_grad=full, converged=rep_x.converged and rep_s.converged,
    )


def full_gradient(spec, params, q_codes: DiscreteDistribution, p_data: DiscreteDistribution,
                  config: TrainConfig) -> np.ndarray:
    """Plan gradient on the full supports with the configured inner accuracy."""
    cfg = replace(config, oracle=Oracle.BATCH)
    if cfg.objective is Objective.REGOT:
        est = estimate_gradient_regot(spec, params, q_codes.support, p_data.support, cfg,
                                      code_weights=q_codes.weights, data_weights=p_data.weights)
    else:
        est = estimate_gradient_sinkhorn(spec, params, q_codes.support, p_data.support,
                                         q_codes.support, q_codes.support, cfg,
                                         code_weights=q_codes.weights,
                                         data_weights=p_data.weights)
    return est.g


def _eval_subset(d: DiscreteDistribution, k: int) -> DiscreteDistribution:
    if d.size <= k:
        return d
    # deterministic, evenly spread subset reweighted to uniform
    idx = np.linspace(0, d.size - 1, k).round().astype(int)
    return DiscreteDistribution.uniform(d.support[idx])


def objective_value(spec, params, q_codes: DiscreteDistribution, p_data: DiscreteDistribution,
                    config: TrainConfig, stop: StopCriteria | None = None) -> float:
    """Debiased transport cost (regularized objective) or the Sinkhorn loss,
    evaluated on the supports (or a fixed subset of ``eval_size`` atoms)."""
    from .regularized_ot import sinkhorn_loss

    stop = stop or StopCriteria(gap=1e-9, max_iters=200)
    q_eval = _eval_subset(q_codes, config.eval_size)
    p_eval = _eval_subset(p_data, config.eval_size)
    gen = DiscreteDistribution(forward(spec, params, q_eval.support), q_eval.weights)
    if config.objective is Objective.SINKHORN:
        return sinkhorn_loss(gen, p_eval, config.cost_fn, config.reg, stop=stop)
    c = pairwise_cost(gen.support, p_eval.support, config.cost_fn)
    return solve_dual(c, gen.weights, p_eval.weights, config.reg, stop=stop).debiased_distance


# ---------------------------------------------------------------------------
# training loop

def _theta(params) -> np.ndarray:
    return np.array(params.theta if isinstance(params, GeneratorParams) else params, dtype=float)


def train(spec, theta0, q_codes: DiscreteDistribution, p_data: DiscreteDistribution,
          config: TrainConfig, callback=None):
    """Run ``config.gen_iters`` generator steps.

    Returns the final parameters and one ``TrainRecord`` per step.  The run is
    a deterministic function of the inputs and ``config.seed``.  ``callback``
    (if given) is called as ``callback(t, params, record)`` after every step.
    """
    layout_ = theta0.layout if isinstance(theta0, GeneratorParams) else None
    theta = _theta(theta0)
    wrap = (lambda th: GeneratorParams(th, layout_)) if layout_ is not None else (lambda th: th)
    T = config.gen_iters
    rng = np.random.default_rng(config.seed)
    opt = config.optimizer
    adam = AdamState.start(theta) if isinstance(opt, Adam) else None
    S = config.batch_size
    records: list[TrainRecord] = []
    warm = None
    for t in range(T):
        start = time.perf_counter()
        params = wrap(theta)
        if config.oracle in (Oracle.FULL, Oracle.EXACT):
            args = dict(code_weights=q_codes.weights, data_weights=p_data.weights, rng=rng)
            if config.objective is Objective.REGOT:
                est = estimate_gradient_regot(spec, params, q_codes.support, p_data.support,
                                              config, **args)
            else:
                est = estimate_gradient_sinkhorn(spec, params, q_codes.support, p_data.support,
                                                 q_codes.support, q_codes.support, config, **args)
        else:
            xi = sample(q_codes, S, rng)
            yi = sample(p_data, S, rng)
            X, Y = q_codes.support[xi], p_data.support[yi]
            if config.objective is Objective.REGOT:
                est = estimate_gradient_regot(spec, params, X, Y, config,
                                              warm_start=warm if config.warm_start else None)
                warm = est.indices.get("potentials")
            else:
                xb = sample(q_codes, S, rng)
                xh = sample(q_codes, S, rng)
                est = estimate_gradient_sinkhorn(spec, params, X, Y, q_codes.support[xb],
                                                 q_codes.support[xh], config)
        g = est.g
        full_sq = math.nan
        if est.full_grad is not None:
            full_sq = float(est.full_grad @ est.full_grad)
        elif config.track_full_grad:
            G = full_gradient(spec, params, q_codes, p_data, config)
            full_sq = float(G @ G)
        if isinstance(opt, Adam):
            adam = adam_update(adam, g, opt.lr, opt.beta1, opt.beta2, opt.eps)
            alpha = opt.lr
            theta = adam.theta
        else:
            alpha = step_size(opt.schedule, t, T, config.delta_estimate, config.L_estimate,
                              config.sigma_estimate)
            theta = theta - alpha * g
        full_loss = math.nan
        if config.eval_every and (t + 1) % config.eval_every == 0:
            full_loss = objective_value(spec, wrap(theta), q_codes, p_data, config)
        rec = TrainRecord(
            iter=t, loss_estimate=float(est.value), grad_norm_sq=float(g @ g),
            epsilon_used=float(est.epsilon_used), statistic=float(est.statistic),
            step_size=float(alpha), wall_ms=1e3 * (time.perf_counter() - start),
            full_loss=float(full_loss), full_grad_norm_sq=full_sq, m_max=float(est.m_max),
        )
        records.append(rec)
        if callback is not None:
            callback(t, wrap(theta), rec)
    return wrap(theta), records


def running_min(values) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(values, dtype=float))


def write_trajectory(path, records, extra: bool = True):
    """Write the trajectory CSV (the standard columns, then the optional
    full-support diagnostics when ``extra`` is set)."""
    cols = list(TRAJECTORY_COLUMNS)
    if extra:
        cols += ["full_loss", "full_grad_norm_sq", "m_max"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            w.writerow([r.iter] + [repr(float(getattr(r, c))) for c in cols[1:]])


# ---------------------------------------------------------------------------
# evaluation

def mode_coverage(samples, mode_centers, sigma: float) -> tuple[int, float]:
    """Modes with a sample within ``3 sigma`` and the fraction of samples
    farther than ``3 sigma`` from every mode."""
    samples = np.asarray(samples, dtype=float)
    centers = np.asarray(mode_centers, dtype=float)
    if samples.size == 0:
        return 0, 0.0
    samples = samples.reshape(len(samples), -1)
    centers = centers.reshape(len(centers), -1)
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    near = d2 <= (3.0 * sigma) ** 2
    covered = int(np.count_nonzero(near.any(axis=0)))
    spurious = float(np.mean(~near.any(axis=1)))
    return covered, spurious


def config_field_names() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
