"""Numerical probes of the smoothness, stability and convergence guarantees.

Each probe restates a guarantee as a finite-sample inequality with explicit
slack, evaluates it on seeded random instances and returns a
``ProbeReport``.  A violation is a failure of the inequality, never a
warning.  Constants that the guarantees take as suprema are replaced by
sampled maxima; those are lower bounds of the true suprema and are labelled
as such.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .distributions import CostFunction, DiscreteDistribution, pairwise_cost, pairwise_cost_grad_x
from .generators import LinearGeneratorSpec, LinearSpec, forward, jacobian, n_params
from .regularized_ot import (
    Method,
    RegKind,
    Regularizer,
    StopCriteria,
    exact_ot,
    gap_bound,
    reg_distance,
    sinkhorn_loss,
    solve_dual,
)
from .training import (
    Objective,
    Oracle,
    Sgd,
    Thm42,
    TrainConfig,
    estimate_gradient_regot,
    full_gradient,
    step_size,
    train,
)

__all__ = [
    "ThetaBox",
    "SmoothnessConstants",
    "ProbeReport",
    "estimate_constants",
    "plan_stability_probe",
    "gradient_error_scaling_probe",
    "sandwich_probe",
    "pseudo_distance_probe",
    "sinkhorn_robustness_probe",
    "large_lambda_linear_probe",
    "ConvergenceTestbed",
    "LinearTestbed",
    "ball_points",
    "convergence_shape_probe",
    "delta_bound",
    "write_report",
]

TIGHT = StopCriteria(gap=1e-12, max_iters=500, check_every=1)


@dataclass(frozen=True, eq=False)
class ThetaBox:
    """Axis-aligned box ``center +- radius`` in parameter space."""

    center: np.ndarray
    radius: float

    def sample(self, n: int, rng) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return c[None, :] + self.radius * rng.uniform(-1.0, 1.0, (n, c.size))

    def scaled(self, factor: float) -> "ThetaBox":
        return ThetaBox(self.center, self.radius * factor)


@dataclass(frozen=True)
class SmoothnessConstants:
    """Sampled smoothness constants (empirical lower bounds of the suprema).

    ``L0_hat`` bounds ``||grad_theta c||``, ``L1_hat`` its Lipschitz modulus in
    theta.  ``ell0_hat`` is the Lipschitz modulus of the whole cost matrix in
    Frobenius norm and ``p_max = max_ij q_i p_j``; they enter the norm-2 plan
    bound ``||pi1 - pi2||_2 <= ell0_hat * p_max / lam * ||theta1 - theta2||``.
    """

    L0_hat: float
    L1_hat: float
    lam: float
    ell0_hat: float
    p_max: float
    n_samples: int

    @property
    def L_bound(self) -> float:
        return self.L1_hat + self.L0_hat ** 2 / self.lam

    def to_dict(self) -> dict:
        d = asdict(self)
        d["L_bound"] = self.L_bound
        return d


@dataclass
class ProbeReport:
    name: str
    trials: int
    violations: int
    worst_margin: float
    config: dict = field(default_factory=dict)
    details: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    details_path: str | None = None

    def __post_init__(self):
        if not 0 <= self.violations <= self.trials:
            raise ValueError("violations must lie between 0 and the number of trials")

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def summary(self) -> dict:
        return {"name": self.name, "config": self.config, "trials": self.trials,
                "violations": self.violations, "worst_margin": self.worst_margin,
                "notes": self.notes, "details_path": self.details_path}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if hasattr(x, "value"):
        return x.value
    return x


def write_report(report: ProbeReport, out_dir, with_csv: bool = True) -> Path:
    """Write ``<name>.json`` (and ``<name>.csv`` with per-trial rows)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if with_csv and report.details:
        csv_path = out / f"{report.name}.csv"
        keys = list(report.details[0].keys())
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in report.details:
                w.writerow([_jsonable(row.get(k)) for k in keys])
        report.details_path = csv_path.name
    path = out / f"{report.name}.json"
    path.write_text(json.dumps(_jsonable(report.summary()), indent=2, sort_keys=True) + "\n")
    return path


def _margin_report(name, margins, config, details, notes=()):
    margins = np.asarray(margins, dtype=float)
    return ProbeReport(name=name, trials=int(margins.size),
                       violations=int(np.count_nonzero(margins < 0)),
                       worst_margin=float(margins.min()) if margins.size else math.inf,
                       config=config, details=details, notes=list(notes))


# ---------------------------------------------------------------------------
# smoothness constants

def _pullbacks(spec, theta, X, Y, cost_fn):
    """All ``grad_theta c(G(x_i), y_j)`` as an (M, N, P) array."""
    Z = forward(spec, theta, X)
    Gz = pairwise_cost_grad_x(Z, Y, cost_fn)
    if isinstance(spec, LinearSpec):
        return np.einsum("ijk,il->ijkl", Gz, X).reshape(len(X), len(Y), -1)
    J = np.stack([jacobian(spec, theta, x) for x in X])
    return np.einsum("ijk,ikp->ijp", Gz, J)


def estimate_constants(spec, theta_box: ThetaBox, q: DiscreteDistribution,
                       p: DiscreteDistribution, cost_fn, reg: Regularizer, n_samples: int = 64,
                       seed=0, extra_thetas=None) -> SmoothnessConstants:
    """Sampled maxima of the gradient norm, its Lipschitz modulus and the
    Frobenius Lipschitz modulus of the cost matrix over ``theta_box``.

    Parameter pairs are drawn as independent box samples plus local
    perturbations of each sample; ``extra_thetas`` are always included.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    cost_fn = CostFunction(cost_fn)
    rng = np.random.default_rng(seed)
    thetas = theta_box.sample(n_samples, rng)
    if extra_thetas is not None:
        thetas = np.vstack([thetas, np.asarray(extra_thetas, dtype=float).reshape(-1, thetas.shape[1])])
    X, Y = q.support, p.support
    pbs = [_pullbacks(spec, th, X, Y, cost_fn) for th in thetas]
    costs = [pairwise_cost(forward(spec, th, X), Y, cost_fn) for th in thetas]
    L0 = max(float(np.sqrt((pb ** 2).sum(axis=2)).max()) for pb in pbs)
    L1 = 0.0
    ell0 = 0.0
    local = thetas + 1e-3 * max(theta_box.radius, 1e-3) * rng.standard_normal(thetas.shape)
    pairs = [(k, (k + 1) % len(thetas)) for k in range(len(thetas))]
    for a, b in pairs:
        dth = float(np.linalg.norm(thetas[a] - thetas[b]))
        if dth > 0:
            diff = np.sqrt(((pbs[a] - pbs[b]) ** 2).sum(axis=2)).max()
            L1 = max(L1, float(diff) / dth)
            ell0 = max(ell0, float(np.linalg.norm(costs[a] - costs[b])) / dth)
    for k, th in enumerate(local):
        dth = float(np.linalg.norm(th - thetas[k]))
        if dth > 0:
            pb = _pullbacks(spec, th, X, Y, cost_fn)
            L1 = max(L1, float(np.sqrt(((pb - pbs[k]) ** 2).sum(axis=2)).max()) / dth)
            c = pairwise_cost(forward(spec, th, X), Y, cost_fn)
            ell0 = max(ell0, float(np.linalg.norm(c - costs[k])) / dth)
    p_max = float(np.max(np.outer(q.weights, p.weights)))
    return SmoothnessConstants(L0_hat=L0, L1_hat=L1, lam=reg.lam, ell0_hat=ell0,
                               p_max=p_max, n_samples=len(thetas))


def delta_bound(epsilon: float, m_max: float, L0: float, reg: Regularizer) -> float:
    """Certified gradient error from an inner certificate ``epsilon``:
    ``2 L0 sqrt(m_max eps / lam)`` for KL and ``L0 sqrt(2 eps / lam)`` for norm-2."""
    eps = max(float(epsilon), 0.0)
    if reg.kind is RegKind.KL:
        return 2.0 * L0 * math.sqrt(m_max * eps / reg.lam)
    return L0 * math.sqrt(2.0 * eps / reg.lam)


# ---------------------------------------------------------------------------
# default testbeds

def ball_points(k: int, dim: int, radius: float, rng) -> np.ndarray:
    """``k`` points drawn uniformly from the radius ``dim``-ball."""
    g = rng.standard_normal((k, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * radius * rng.uniform(0, 1, (k, 1)) ** (1.0 / dim)


@dataclass(frozen=True, eq=False)
class LinearTestbed:
    """Linear generator with codes and data in balls of radii ``r_x`` and ``r_y``."""

    linspec: LinearGeneratorSpec
    q: DiscreteDistribution
    p: DiscreteDistribution
    theta: np.ndarray

    @property
    def spec(self) -> LinearSpec:
        return self.linspec.spec

    @classmethod
    def default(cls, seed: int = 0, n: int = 2, d: int = 2, points: int = 6,
                r_x: float = 1.0, r_y: float = 1.0) -> "LinearTestbed":
        rng = np.random.default_rng(seed)
        q = DiscreteDistribution.uniform(ball_points(points, n, r_x, rng))
        p = DiscreteDistribution.uniform(ball_points(points, d, r_y, rng))
        theta = rng.uniform(-1.0, 1.0, n * d)
        return cls(LinearGeneratorSpec(n, d, r_x, r_y), q, p, theta)


# ---------------------------------------------------------------------------
# plan stability

def _optimal_plan(spec, theta, q, p, cost_fn, reg):
    c = pairwise_cost(forward(spec, theta, q.support), p.support, cost_fn)
    rep = solve_dual(c, q.weights, p.weights, reg, stop=TIGHT)
    return rep.plan.pi


def plan_stability_probe(spec, q: DiscreteDistribution, p: DiscreteDistribution, cost_fn,
                         reg: Regularizer, pairs: int = 100, scale: float = 0.5, seed=0,
                         theta_box: ThetaBox | None = None, slack: float = 1.05,
                         linspec: LinearGeneratorSpec | None = None) -> ProbeReport:
    """Plan stability in parameters.

    KL: ``||pi1 - pi2||_1 <= slack * L0_hat / lam * ||theta1 - theta2||``.
    Norm-2: ``||pi1 - pi2||_2 <= slack * ell0_hat * p_max / lam * ||theta1 - theta2||``.
    With ``linspec`` the closed-form linear constant ``r_x r_y / lam`` is
    checked as well (L1 form).
    """
    cost_fn = CostFunction(cost_fn)
    rng = np.random.default_rng(seed)
    P = n_params(spec)
    box = theta_box or ThetaBox(np.zeros(P), 1.0)
    th1 = box.sample(pairs, rng)
    th2 = th1 + scale * rng.standard_normal(th1.shape) * rng.uniform(0, 1, (pairs, 1))
    ends = np.vstack([th1, th2])
    const = estimate_constants(spec, box, q, p, cost_fn, reg, n_samples=64, seed=seed,
                               extra_thetas=ends)
    notes = ["L0_hat, ell0_hat are sampled maxima (lower bounds of the suprema)"]
    r_x = float(np.linalg.norm(q.support, axis=1).max())
    r_y = float(np.linalg.norm(p.support, axis=1).max())

    def run(const):
        rows, margins = [], []
        for a, b in zip(th1, th2):
            d_th = float(np.linalg.norm(a - b))
            diff = _optimal_plan(spec, a, q, p, cost_fn, reg) - _optimal_plan(spec, b, q, p, cost_fn, reg)
            if reg.kind is RegKind.KL:
                lhs = float(np.abs(diff).sum())
                rhs = slack * const.L0_hat / reg.lam * d_th
            else:
                lhs = float(np.linalg.norm(diff))
                rhs = slack * const.ell0_hat * const.p_max / reg.lam * d_th
            row = {"dtheta": d_th, "lhs": lhs, "rhs": rhs, "margin": rhs - lhs}
            m = rhs - lhs
            if linspec is not None:
                l1 = float(np.abs(diff).sum())
                rhs_lin = r_x * r_y / reg.lam * d_th
                row.update(lhs_l1=l1, rhs_linear=rhs_lin, margin_linear=rhs_lin - l1)
                m = min(m, rhs_lin - l1 + 1e-12)
            rows.append(row)
            margins.append(m if d_th > 0 else max(m, 0.0))
        return rows, margins

    rows, margins = run(const)
    if min(margins) < 0:
        const = estimate_constants(spec, box, q, p, cost_fn, reg, n_samples=256, seed=seed + 1,
                                   extra_thetas=ends)
        rows, margins = run(const)
        notes.append("re-estimated constants with 4x samples after a violation")
    cfg = {"pairs": pairs, "scale": scale, "lambda": reg.lam, "reg": reg.kind.value,
           "cost": cost_fn.value, "constants": const.to_dict(), "r_x": r_x, "r_y": r_y}
    return _margin_report("plan-stability", margins, cfg, rows, notes)


# ---------------------------------------------------------------------------
# gradient error vs inner accuracy

def _plan_gradient(spec, theta, q, p, cost_fn, reg, plan):
    pb = _pullbacks(spec, theta, q.support, p.support, cost_fn)
    return np.einsum("ij,ijp->p", plan, pb)


def gradient_error_scaling_probe(spec, theta, q: DiscreteDistribution, p: DiscreteDistribution,
                                 cost_fn, reg: Regularizer,
                                 eps_grid=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8), seed=0,
                                 method=None, band=(0.35, 0.65)) -> ProbeReport:
    """Log-log slope of the plan-gradient error against the certified inner
    accuracy.  Each grid point is a cold solve stopped as soon as its
    certificate drops below the target."""
    cost_fn = CostFunction(cost_fn)
    theta = np.asarray(theta, dtype=float)
    c = pairwise_cost(forward(spec, theta, q.support), p.support, cost_fn)
    ref = solve_dual(c, q.weights, p.weights, reg, stop=StopCriteria(gap=1e-13, max_iters=500,
                                                                      check_every=1))
    G_ref = _plan_gradient(spec, theta, q, p, cost_fn, reg, ref.plan.pi)
    if method is None:
        method = Method.SINKHORN if reg.kind is RegKind.KL else Method.GRADIENT
    rows = []
    for eps in eps_grid:
        rep = solve_dual(c, q.weights, p.weights, reg, method=method,
                         stop=StopCriteria(gap=eps, max_iters=200_000, check_every=1, seed=seed))
        G = _plan_gradient(spec, theta, q, p, cost_fn, reg, rep.plan.pi)
        rows.append({"target": eps, "certificate": rep.epsilon_certificate,
                     "error": float(np.linalg.norm(G - G_ref)), "iterations": rep.iterations,
                     "converged": rep.converged})
    notes = []
    floor = 1e-12 * max(1.0, float(np.linalg.norm(G_ref)))
    use = [r for r in rows if r["error"] > floor and r["certificate"] > 0]
    if len(use) < len(rows):
        notes.append(f"dropped {len(rows) - len(use)} points at machine precision")
    cfg = {"lambda": reg.lam, "reg": reg.kind.value, "cost": cost_fn.value,
           "method": Method(method).value, "eps_grid": list(eps_grid), "band": list(band)}
    if len(use) < 2:
        notes.append("fewer than two usable points; slope undefined")
        return ProbeReport("grad-scaling", 1, 1, -math.inf, cfg, rows, notes)
    x = np.log([r["certificate"] for r in use])
    y = np.log([r["error"] for r in use])
    slope = float(np.polyfit(x, y, 1)[0])
    cfg["slope"] = slope
    margin = min(slope - band[0], band[1] - slope)
    return ProbeReport("grad-scaling", 1, int(margin < 0), margin, cfg, rows, notes)


# ---------------------------------------------------------------------------
# sandwich bounds

def _random_instances(n, size, dim, seed):
    rng = np.random.default_rng(seed)
    return [(DiscreteDistribution.uniform(rng.random((size, dim))),
             DiscreteDistribution.uniform(rng.random((size, dim))), CostFunction.L1)
            for _ in range(n)]


def sandwich_probe(instances=None, lambdas=(1e-3, 1e-2, 1e-1, 1.0),
                   regs=(RegKind.KL, RegKind.NORM2), seed=0, tol: float = 1e-8) -> ProbeReport:
    """``d_c <= d_lam`` and ``d_lam - lam * I_bound <= d_c`` on exact-oracle
    instances, plus monotonicity of ``d_lam - d_c`` in ``lam``.

    Default grid: 50 random 4x4 uniform L1 instances in the unit square.
    """
    if instances is None:
        instances = _random_instances(50, 4, 2, seed)
    lambdas = sorted(lambdas)
    stop = StopCriteria(gap=1e-11, max_iters=500, check_every=1)
    rows, margins = [], []
    for k, (a, b, cost_fn) in enumerate(instances):
        exact = exact_ot(a, b, cost_fn)
        for kind in regs:
            prev = -math.inf
            for lam in lambdas:
                reg = Regularizer(kind, lam)
                rep = reg_distance(a, b, cost_fn, reg, stop=stop)
                d = rep.dual_value
                slack = gap_bound(a.weights, b.weights, reg).slack
                upper = d + tol - exact
                lower = exact + tol - (d - slack)
                # d_lam - d_c is nondecreasing in lam; the solve gap is the only slack
                mono = (d - exact) - prev + 2 * max(rep.epsilon_certificate, 0) + 1e-12
                prev = d - exact
                margins.append(min(upper, lower, mono))
                rows.append({"instance": k, "reg": RegKind(kind).value, "lambda": lam,
                             "exact": exact, "d_lam": d, "bound": slack,
                             "certificate": rep.epsilon_certificate,
                             "margin_upper": upper, "margin_lower": lower})
    cfg = {"instances": len(instances), "lambdas": list(lambdas),
           "regs": [RegKind(r).value for r in regs], "tol": tol}
    return _margin_report("sandwich", margins, cfg, rows)


# ---------------------------------------------------------------------------
# pseudo-distance

def pseudo_distance_probe(triples: int = 100, points_per_dist: int = 5, dim: int = 2,
                          lambdas=(0.1, 1.0), seed=0, triangle_tol: float = 1e-6) -> ProbeReport:
    """Symmetry, nonnegativity and the triangle inequality of the KL-regularized
    distance with the Euclidean ground metric.  The same triples are reused
    for every ``lam``."""
    lambdas = [lambdas] if np.isscalar(lambdas) else list(lambdas)
    rng = np.random.default_rng(seed)
    stop = StopCriteria(gap=1e-10, max_iters=500, check_every=1)
    clouds = [tuple(DiscreteDistribution.uniform(rng.standard_normal((points_per_dist, dim)))
                    for _ in range(3)) for _ in range(triples)]
    rows, margins = [], []
    for lam in lambdas:
        reg = Regularizer(RegKind.KL, lam)

        def d(a, b):
            return reg_distance(a, b, CostFunction.EUCLIDEAN, reg, stop=stop).dual_value

        for k, (X, Y, Z) in enumerate(clouds):
            dxy, dyx, dxz, dzx, dyz, dzy = d(X, Y), d(Y, X), d(X, Z), d(Z, X), d(Y, Z), d(Z, Y)
            sym = 1e-8 - max(abs(dxy - dyx), abs(dxz - dzx), abs(dyz - dzy))
            nonneg = min(dxy, dxz, dyz) + 1e-9
            tri = min(dxz + dzy - dxy, dxy + dyz - dxz, dyx + dxz - dyz) + triangle_tol
            margins.append(min(sym, nonneg, tri))
            rows.append({"lambda": lam, "triple": k, "d_xy": dxy, "d_xz": dxz, "d_yz": dyz,
                         "margin_symmetry": sym, "margin_nonneg": nonneg,
                         "margin_triangle": tri})
    cfg = {"triples": triples, "points_per_dist": points_per_dist, "dim": dim,
           "lambdas": lambdas, "cost": "euclidean", "reg": "kl"}
    return _margin_report("pseudo-distance", margins, cfg, rows)


# ---------------------------------------------------------------------------
# Sinkhorn-loss robustness

def _exact_cfg(objective, cost_fn, reg):
    return TrainConfig(objective=objective, cost_fn=cost_fn, reg=reg, disc_stop=TIGHT,
                       batch_size=1, gen_iters=0)


def sinkhorn_robustness_probe(spec, theta0, q: DiscreteDistribution,
                              lambdas=(1e-2, 1e-1, 1.0, 10.0, 100.0), cost_fn=CostFunction.L1,
                              seed=0, reg_kind=RegKind.KL, contrast_lambda: float | None = 100.0,
                              loss_tol: float = 1e-6, grad_tol: float = 1e-5,
                              contrast_ratio: float = 100.0) -> ProbeReport:
    """At the pushforward ``p = G_theta0(q)`` the Sinkhorn loss vanishes and
    its gradient is zero for every ``lam``; the regularized objective's
    gradient is not, which is the contrast check."""
    cost_fn = CostFunction(cost_fn)
    theta0 = np.asarray(getattr(theta0, "theta", theta0), dtype=float)
    p = DiscreteDistribution(forward(spec, theta0, q.support), q.weights)
    gen = DiscreteDistribution(forward(spec, theta0, q.support), q.weights)
    rows, margins = [], []
    for lam in lambdas:
        reg = Regularizer(reg_kind, lam)
        loss = sinkhorn_loss(gen, p, cost_fn, reg, stop=TIGHT)
        g = full_gradient(spec, theta0, q, p, _exact_cfg(Objective.SINKHORN, cost_fn, reg))
        gn = float(np.linalg.norm(g))
        margins.append(min(loss_tol - abs(loss), grad_tol - gn))
        rows.append({"lambda": lam, "check": "stationary", "loss": loss, "grad_norm": gn,
                     "margin": margins[-1]})
    notes = []
    if contrast_lambda is not None:
        reg = Regularizer(reg_kind, contrast_lambda)
        g_s = full_gradient(spec, theta0, q, p, _exact_cfg(Objective.SINKHORN, cost_fn, reg))
        g_r = full_gradient(spec, theta0, q, p, _exact_cfg(Objective.REGOT, cost_fn, reg))
        ns, nr = float(np.linalg.norm(g_s)), float(np.linalg.norm(g_r))
        margin = nr - contrast_ratio * ns
        row = {"lambda": contrast_lambda, "check": "contrast", "loss": math.nan,
               "grad_norm": nr, "sinkhorn_grad_norm": ns, "margin": margin}
        if isinstance(spec, LinearSpec):
            second = float(np.sum(q.weights * (q.support ** 2).sum(axis=1)))
            need = 0.1 * float(np.linalg.norm(theta0)) * second
            # descent direction -g must point toward Theta = 0
            toward_zero = float(g_r @ theta0) > 0
            row["magnitude_floor"] = need
            row["toward_zero"] = toward_zero
            margin = min(margin, nr - need, math.inf if toward_zero else -1.0)
            notes.append("contrast floor 0.1 * ||Theta|| * E||x||^2 is a qualitative check")
        row["margin"] = margin
        margins.append(margin)
        rows.append(row)
    cfg = {"lambdas": list(lambdas), "cost": cost_fn.value, "reg": RegKind(reg_kind).value,
           "contrast_lambda": contrast_lambda, "loss_tol": loss_tol, "grad_tol": grad_tol}
    return _margin_report("sinkhorn-robustness", margins, cfg, rows, notes)


# ---------------------------------------------------------------------------
# large-lambda linear generator

def sphere_points(n: int, radius: float, samples: int, rng) -> np.ndarray:
    """Antipodally symmetric points on the radius sphere (exact in 1-D)."""
    if n == 1:
        return np.array([[-radius], [radius]])
    half = rng.standard_normal((max(samples // 2, 1), n))
    half *= radius / np.linalg.norm(half, axis=1, keepdims=True)
    return np.vstack([half, -half])


def large_lambda_linear_probe(linspec: LinearGeneratorSpec, lam: float | None = None,
                              samples: int = 16, seed=0, tol_grad: float = 1e-3,
                              scan=(-2.0, 2.0, 401), n_dirs: int = 20, step: float = 0.5,
                              scan_tol: float = 0.05, curvature_tol: float = -1e-6,
                              expect_convex: bool | None = None) -> ProbeReport:
    """Convexity and the zero minimizer of the KL-regularized squared-distance
    objective of a linear generator for large ``lam``.

    Codes lie on the radius ``r_x`` sphere and data on the radius ``r_y``
    sphere.  ``lam`` defaults to the threshold ``n r_y^2 sqrt(n d)``.  With
    ``expect_convex=False`` the scan check is inverted: the minimum must lie
    farther than ``scan_tol`` from zero.
    """
    n, d = linspec.n, linspec.d
    threshold = n * linspec.r_y ** 2 * math.sqrt(n * d)
    lam = threshold if lam is None else lam
    if expect_convex is None:
        expect_convex = lam >= threshold
    rng = np.random.default_rng(seed)
    q = DiscreteDistribution.uniform(sphere_points(n, linspec.r_x, samples, rng))
    p = DiscreteDistribution.uniform(sphere_points(d, linspec.r_y, samples, rng))
    spec = linspec.spec
    reg = Regularizer(RegKind.KL, lam)

    def h(theta):
        c = pairwise_cost(forward(spec, theta, q.support), p.support, CostFunction.SQUARED_L2)
        return solve_dual(c, q.weights, p.weights, reg, stop=TIGHT).dual_value

    P = n * d
    rows, margins = [], []
    zero = np.zeros(P)
    cfg_exact = _exact_cfg(Objective.REGOT, CostFunction.SQUARED_L2, reg)
    gn = float(np.linalg.norm(full_gradient(spec, zero, q, p, cfg_exact)))
    rows.append({"check": "grad_at_zero", "value": gn, "margin": tol_grad - gn})
    margins.append(tol_grad - gn)
    h0 = h(zero)
    dirs = rng.standard_normal((n_dirs, P))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for k, v in enumerate(dirs):
        sd = h(step * v) + h(-step * v) - 2.0 * h0
        m = sd - curvature_tol if expect_convex else 0.0
        rows.append({"check": f"second_difference_{k}", "value": sd, "margin": m})
        if expect_convex:
            margins.append(m)
    lo, hi, num = scan
    grid = np.linspace(lo, hi, int(num))
    direction = np.zeros(P)
    direction[0] = 1.0
    vals = np.array([h(t * direction) for t in grid])
    t_min = float(grid[int(np.argmin(vals))])
    m = scan_tol - abs(t_min) if expect_convex else abs(t_min) - scan_tol
    rows.append({"check": "scan_minimum", "value": t_min, "margin": m})
    margins.append(m)
    cfg = {"n": n, "d": d, "r_x": linspec.r_x, "r_y": linspec.r_y, "lambda": lam,
           "threshold": threshold, "samples": samples, "expect_convex": expect_convex,
           "scan": list(scan), "step": step}
    notes = ["discrete sphere stands in for the continuous one; tolerances encode that"]
    return _margin_report("large-lambda", margins, cfg, rows, notes)


# ---------------------------------------------------------------------------
# convergence shape

@dataclass(frozen=True, eq=False)
class ConvergenceTestbed:
    """Fixed linear-generator instance for the convergence-rate probe."""

    spec: LinearSpec
    q: DiscreteDistribution
    p: DiscreteDistribution
    theta0: np.ndarray
    reg: Regularizer
    cost_fn: CostFunction = CostFunction.SQUARED_L2
    batch_size: int = 2
    box_radius: float = 3.0
    sigma_points: int = 9
    sigma_draws: int = 400
    oracle: Oracle = Oracle.FULL

    @classmethod
    def default(cls, seed: int = 0) -> "ConvergenceTestbed":
        rng = np.random.default_rng(seed)
        codes = np.sort(rng.uniform(-1.0, 1.0, 6))
        data = np.sort(rng.uniform(-2.0, 2.0, 6))
        return cls(LinearSpec(1, 1), DiscreteDistribution.uniform(codes),
                   DiscreteDistribution.uniform(data), np.array([-1.5]),
                   Regularizer(RegKind.KL, 0.5))

    def config(self, T: int, seed: int, Delta=1.0, L=1.0, sigma=1.0) -> TrainConfig:
        return TrainConfig(objective=Objective.REGOT, cost_fn=self.cost_fn, reg=self.reg,
                           batch_size=self.batch_size, gen_iters=T, disc_stop=TIGHT,
                           optimizer=Sgd(Thm42()), delta_estimate=Delta, L_estimate=L,
                           sigma_estimate=sigma, seed=seed, eval_every=0,
                           oracle=self.oracle)


def _estimate_sigma(tb: ConvergenceTestbed, box: ThetaBox, seed) -> float:
    """Largest sampled root-mean-square deviation of the minibatch gradient
    from its conditional mean over a grid of parameters."""
    if tb.oracle is Oracle.EXACT:
        return 0.0
    rng = np.random.default_rng(seed)
    cfg = tb.config(1, seed)
    grid = box.sample(tb.sigma_points, rng)
    grid = np.vstack([grid, tb.theta0[None, :]])
    worst = 0.0
    for th in grid:
        draws = [estimate_gradient_regot(tb.spec, th, tb.q.support, tb.p.support, cfg,
                                         code_weights=tb.q.weights, data_weights=tb.p.weights,
                                         rng=rng) for _ in range(tb.sigma_draws)]
        G = draws[0].full_grad
        dev = np.array([e.g - G for e in draws])
        worst = max(worst, float(np.sqrt(np.mean((dev ** 2).sum(axis=1)))))
    return worst


def convergence_shape_probe(testbed: ConvergenceTestbed | None = None,
                            T_grid=(250, 1000, 4000), seed=0, slack: float = 1.2,
                            repeats: int = 1) -> ProbeReport:
    """Trajectory-averaged squared gradient norms under the two-regime step.

    Delta is the objective at ``theta0`` (the objective is nonnegative), L is
    ``L1_hat + L0_hat^2 / lam`` over a box around ``theta0``, sigma is the
    sampled gradient noise, and per-step errors come from the inner
    certificates.  The averages must not increase along ``T_grid`` (down to
    the error floor) and must respect the bound of the active regime.
    """
    tb = testbed or ConvergenceTestbed.default(seed)
    box = ThetaBox(np.asarray(tb.theta0, float), tb.box_radius)
    c0 = pairwise_cost(forward(tb.spec, tb.theta0, tb.q.support), tb.p.support, tb.cost_fn)
    Delta = solve_dual(c0, tb.q.weights, tb.p.weights, tb.reg, stop=TIGHT).primal_value
    const = estimate_constants(tb.spec, box, tb.q, tb.p, tb.cost_fn, tb.reg, n_samples=64,
                               seed=seed)
    L = const.L_bound
    sigma = _estimate_sigma(tb, box, seed)
    rows, margins = [], []
    prev = math.inf
    for T in T_grid:
        avgs, deltas, left_box = [], [], False
        for r in range(repeats):
            cfg = tb.config(T, seed + 1000 * r, Delta, L, sigma)
            final, recs = train(tb.spec, np.asarray(tb.theta0, float), tb.q, tb.p, cfg)
            avgs.append(float(np.mean([rec.full_grad_norm_sq for rec in recs])))
            d2 = [delta_bound(rec.epsilon_used, rec.m_max, const.L0_hat, tb.reg) ** 2
                  for rec in recs]
            deltas.append(float(np.mean(d2)))
            left_box |= bool(np.any(np.abs(np.asarray(final.theta if hasattr(final, "theta")
                                                      else final) - box.center) > box.radius))
        avg, dbar2 = float(np.mean(avgs)), float(np.mean(deltas))
        regime2 = T * sigma * sigma >= 2.0 * Delta * L
        if regime2:
            bound = sigma * math.sqrt(8.0 * L * Delta / T) + dbar2
        else:
            bound = 2.0 * L * Delta / T + dbar2 + sigma * sigma
        floor = 10.0 * dbar2 + 1e-14
        mono = prev - avg if avg > floor else 0.0
        prev = avg
        m = min(slack * bound - avg, mono)
        margins.append(m)
        rows.append({"T": T, "avg_grad_sq": avg, "bound": bound, "delta_bar_sq": dbar2,
                     "regime": 2 if regime2 else 1,
                     "step": step_size(Thm42(), 0, T, Delta, L, sigma),
                     "left_box": left_box, "margin": m})
    cfg_echo = {"T_grid": list(T_grid), "Delta": Delta, "L": L, "sigma": sigma,
                "constants": const.to_dict(), "lambda": tb.reg.lam, "reg": tb.reg.kind.value,
                "batch_size": tb.batch_size, "repeats": repeats, "slack": slack}
    notes = ["sigma is an empirical stand-in for the conditional-variance bound"]
    if any(r["left_box"] for r in rows):
        notes.append("an iterate left the box used for L; constants may be underestimated")
    return _margin_report("convergence-shape", margins, cfg_echo, rows, notes)
