import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from regot.distributions import DiscreteDistribution, cost_matrix
from regot.regularized_ot import (
    DualPotentials,
    Method,
    RegKind,
    Regularizer,
    StopCriteria,
    TransportPlan,
    dual_gradient,
    dual_objective,
    exact_ot,
    f_lambda,
    gap_bound,
    multiplier,
    plan_from_duals,
    primal_value,
    reg_distance,
    round_to_feasible,
    sinkhorn_loss,
    solve_dual,
    termination_statistic,
    violation_matrix,
)

KL1 = Regularizer(RegKind.KL, 1.0)
TIGHT = StopCriteria(gap=1e-12, max_iters=500, check_every=1)
ONE = np.array([1.0])


def uniform(n):
    return np.full(n, 1.0 / n)


def random_instance(rng, m, n, dim=2):
    a = DiscreteDistribution.uniform(rng.random((m, dim)))
    b = DiscreteDistribution.uniform(rng.random((n, dim)))
    return a, b, cost_matrix("l1", a, b)


def golden_2x2(lam):
    """Minimize the primal over the symmetric 2x2 family [[a, 1/2-a], [1/2-a, a]]."""
    def g(a):
        ent = 2 * a * math.log(4 * a) if a > 0 else 0.0
        rest = (1 - 2 * a) * math.log(2 - 4 * a) if a < 0.5 else 0.0
        return (1 - 2 * a) + lam * (ent + rest)
    lo, hi = 0.0, 0.5
    ratio = (math.sqrt(5) - 1) / 2
    for _ in range(200):
        x1, x2 = hi - ratio * (hi - lo), lo + ratio * (hi - lo)
        if g(x1) < g(x2):
            hi = x2
        else:
            lo = x1
    a = (lo + hi) / 2
    return a, g(a)


def permutation_oracle(C):
    n = C.shape[0]
    return min(sum(C[i, s[i]] for i in range(n)) for s in itertools.permutations(range(n))) / n


class TestPenalty:
    def test_kl_value(self):
        assert f_lambda(KL1, 0.0) == pytest.approx(1 / math.e, abs=1e-15)

    def test_norm2_value(self):
        assert f_lambda(Regularizer("l2", 0.5), 1.0) == pytest.approx(1.0)

    def test_norm2_negative(self):
        assert f_lambda(Regularizer("l2", 3.0), -2.0) == 0.0

    def test_multiplier_examples(self):
        assert multiplier(KL1, 1.0) == pytest.approx(1.0)
        assert multiplier(Regularizer("l2", 2.0), 3.0) == pytest.approx(1.5)

    @pytest.mark.parametrize("kind", ["kl", "l2"])
    def test_multiplier_is_derivative(self, kind, rng):
        reg = Regularizer(kind, 0.7)
        v = rng.uniform(-2, 2, 100)
        v = v[np.abs(v) > 1e-3]
        h = 1e-6
        fd = (f_lambda(reg, v + h) - f_lambda(reg, v - h)) / (2 * h)
        np.testing.assert_allclose(multiplier(reg, v), fd, rtol=1e-6, atol=1e-8)

    def test_lambda_positive(self):
        with pytest.raises(ValueError):
            Regularizer("kl", 0.0)


class TestDualPieces:
    def test_violation_zero_potentials(self, rng):
        c = rng.random((3, 4))
        np.testing.assert_array_equal(violation_matrix(DualPotentials.zeros(3, 4), c), -c)

    def test_violation_singleton(self):
        assert violation_matrix(DualPotentials(np.array([2.0]), np.array([0.0])), [[1.0]])[0, 0] == 1.0

    def test_violation_shift(self, rng):
        c = rng.random((3, 4))
        pot = DualPotentials(rng.standard_normal(3), rng.standard_normal(4))
        np.testing.assert_allclose(violation_matrix(pot.shifted(2.5), c), violation_matrix(pot, c),
                                   atol=1e-14)

    def test_dual_singleton_values(self):
        assert dual_objective(DualPotentials.zeros(1, 1), [[1.0]], ONE, ONE, KL1) == \
            pytest.approx(-math.exp(-2), abs=1e-15)
        pot = DualPotentials(np.array([2.0]), np.array([0.0]))
        assert dual_objective(pot, [[1.0]], ONE, ONE, KL1) == pytest.approx(1.0)

    def test_gradient_at_singleton_optimum(self):
        pot = DualPotentials(np.array([2.0]), np.array([0.0]))
        gp, gq = dual_gradient(pot, [[1.0]], ONE, ONE, KL1)
        assert gp[0] == pytest.approx(0.0, abs=1e-15) and gq[0] == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("kind", ["kl", "l2"])
    def test_gradient_zero_at_product_point(self, kind, rng):
        lam = 0.3
        a, b = rng.random(3), rng.random(4)
        c = a[:, None] + b[None, :]
        pot = DualPotentials(a + lam, -b)
        q, p = uniform(3), uniform(4)
        gp, gq = dual_gradient(pot, c, q, p, Regularizer(kind, lam))
        np.testing.assert_allclose(gp, 0.0, atol=1e-15)
        np.testing.assert_allclose(gq, 0.0, atol=1e-15)

    @pytest.mark.parametrize("kind", ["kl", "l2"])
    def test_gradient_matches_fd(self, kind):
        r = np.random.default_rng(5)
        reg = Regularizer(kind, 0.4)
        for _ in range(5):
            c = r.random((4, 5))
            q, p = r.dirichlet(np.ones(4)), r.dirichlet(np.ones(5))
            phi, psi = r.standard_normal(4), r.standard_normal(5)
            gp, gq = dual_gradient(DualPotentials(phi, psi), c, q, p, reg)
            h = 1e-6
            for k in range(4):
                e = np.zeros(4)
                e[k] = h
                fd = (dual_objective(DualPotentials(phi + e, psi), c, q, p, reg)
                      - dual_objective(DualPotentials(phi - e, psi), c, q, p, reg)) / (2 * h)
                assert gp[k] == pytest.approx(fd, abs=1e-6)
            for k in range(5):
                e = np.zeros(5)
                e[k] = h
                fd = (dual_objective(DualPotentials(phi, psi + e), c, q, p, reg)
                      - dual_objective(DualPotentials(phi, psi - e), c, q, p, reg)) / (2 * h)
                assert gq[k] == pytest.approx(fd, abs=1e-6)

    def test_plan_singleton(self):
        plan = plan_from_duals(DualPotentials(np.array([2.0]), np.array([0.0])), [[1.0]], ONE, ONE, KL1)
        np.testing.assert_allclose(plan.pi, [[1.0]])
        assert plan.feasible and plan.marginal_error == pytest.approx(0.0, abs=1e-15)

    def test_plan_norm2_zero(self, rng):
        q, p = uniform(3), uniform(2)
        plan = plan_from_duals(DualPotentials.zeros(3, 2), rng.random((3, 2)) + 0.1, q, p,
                               Regularizer("l2", 1.0))
        np.testing.assert_array_equal(plan.pi, 0.0)
        np.testing.assert_allclose(np.abs(plan.row_residual), q)

    def test_plan_ratio_identity(self, rng):
        q, p = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))
        plan = plan_from_duals(DualPotentials(rng.standard_normal(3), rng.standard_normal(4)),
                               rng.random((3, 4)), q, p, KL1)
        np.testing.assert_array_equal(plan.ratio * q[:, None] * p[None, :], plan.pi)
        assert np.all(plan.pi >= 0)


class TestPrimalAndRounding:
    def test_primal_singleton(self):
        assert primal_value(np.array([[1.0]]), [[1.0]], ONE, ONE, KL1) == 1.0

    def test_primal_product_plan(self, rng):
        q, p, c = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4)), rng.random((3, 4))
        pi = np.outer(q, p)
        mean_cost = float(q @ c @ p)
        assert primal_value(pi, c, q, p, Regularizer("kl", 0.7)) == pytest.approx(mean_cost, abs=1e-14)
        assert primal_value(pi, c, q, p, Regularizer("l2", 0.7)) == pytest.approx(mean_cost + 0.35)

    def test_round_feasible_unchanged(self, rng):
        q, p = uniform(3), uniform(3)
        pi = np.outer(q, p)
        np.testing.assert_array_equal(round_to_feasible(pi, q, p).pi, pi)

    def test_round_zero_plan(self):
        q, p = uniform(3), uniform(4)
        np.testing.assert_allclose(round_to_feasible(np.zeros((3, 4)), q, p).pi, np.outer(q, p))

    def test_round_random(self, rng):
        for _ in range(20):
            q, p = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(6))
            out = round_to_feasible(rng.random((5, 6)) * 0.1, q, p)
            assert np.abs(out.pi.sum(axis=1) - q).max() <= 1e-12
            assert np.abs(out.pi.sum(axis=0) - p).max() <= 1e-12
            assert np.all(out.pi >= 0)


class TestSolve:
    def test_singleton(self):
        rep = solve_dual([[1.0]], ONE, ONE, KL1)
        assert rep.dual_value == pytest.approx(1.0, abs=1e-12)
        assert rep.potentials.phi[0] == pytest.approx(2.0, abs=1e-9)
        assert rep.potentials.psi[0] == pytest.approx(0.0, abs=1e-12)

    def test_sinkhorn_gradient_agree_8x8(self, rng):
        for lam in (0.1, 1.0):
            reg = Regularizer("kl", lam)
            _, _, c = random_instance(rng, 8, 8)
            q = uniform(8)
            stop = StopCriteria(gap=1e-9, max_iters=100_000)
            s = solve_dual(c, q, q, reg, method=Method.SINKHORN, stop=stop)
            g = solve_dual(c, q, q, reg, method=Method.GRADIENT, stop=stop)
            assert s.epsilon_certificate <= 1e-8 and g.epsilon_certificate <= 1e-8
            assert abs(s.dual_value - g.dual_value) <= 1e-6

    @pytest.mark.parametrize("method", list(Method))
    def test_all_methods_reach_optimum(self, method, rng):
        _, _, c = random_instance(rng, 6, 7)
        q, p = uniform(6), uniform(7)
        for kind in ("kl", "l2"):
            if method is Method.SINKHORN and kind == "l2":
                continue
            reg = Regularizer(kind, 0.5)
            ref = solve_dual(c, q, p, reg, stop=TIGHT)
            rep = solve_dual(c, q, p, reg, method=method, stop=StopCriteria(gap=1e-9, max_iters=100_000))
            assert rep.converged
            assert rep.dual_value == pytest.approx(ref.dual_value, abs=1e-8)

    def test_sinkhorn_rejects_norm2(self):
        with pytest.raises(ValueError):
            solve_dual([[1.0]], ONE, ONE, Regularizer("l2", 1.0), method=Method.SINKHORN)

    def test_warm_start_helps(self):
        r = np.random.default_rng(11)
        cold, warm = [], []
        reg = Regularizer("kl", 0.1)
        stop = StopCriteria(gap=1e-8, max_iters=100_000, check_every=1)
        for _ in range(20):
            _, _, c = random_instance(r, 8, 8)
            q = uniform(8)
            base = solve_dual(c, q, q, reg, method=Method.SINKHORN, stop=stop)
            c2 = c + 1e-3 * r.standard_normal(c.shape)
            cold.append(solve_dual(c2, q, q, reg, method=Method.SINKHORN, stop=stop).iterations)
            warm.append(solve_dual(c2, q, q, reg, method=Method.SINKHORN, stop=stop,
                                   warm_start=base.potentials).iterations)
        assert np.median(warm) < np.median(cold)

    def test_nonconvergence_reported(self, rng):
        _, _, c = random_instance(rng, 8, 8)
        rep = solve_dual(c, uniform(8), uniform(8), Regularizer("kl", 0.01),
                         method=Method.GRADIENT, stop=StopCriteria(gap=1e-12, max_iters=3))
        assert not rep.converged
        assert rep.epsilon_certificate >= -1e-9

    def test_marginals_after_tight_solve(self, rng):
        for kind in ("kl", "l2"):
            for _ in range(5):
                _, _, c = random_instance(rng, 8, 8)
                rep = solve_dual(c, uniform(8), uniform(8), Regularizer(kind, 0.1),
                                 stop=StopCriteria(gap=1e-10, max_iters=500))
                assert rep.plan.marginal_error <= 1e-4

    def test_large_lambda_product_plan(self, rng):
        _, _, c = random_instance(rng, 5, 6)
        q, p = uniform(5), uniform(6)
        rep = solve_dual(c, q, p, Regularizer("kl", 1e3 * c.max()), stop=TIGHT)
        assert np.abs(rep.plan.pi - np.outer(q, p)).max() <= 1e-3

    def test_statistic_near_one(self, rng):
        _, _, c = random_instance(rng, 16, 16)
        rep = solve_dual(c, uniform(16), uniform(16), KL1, stop=StopCriteria(gap=1e-8, stat_pairs=256))
        assert 0.99 <= rep.termination_statistic <= 1.01

    def test_statistic_examples(self, rng):
        q, p = uniform(3), uniform(4)
        pairs = [(0, 0), (2, 3), (1, 1)]
        prod = TransportPlan.from_pi(np.outer(q, p), q, p)
        assert termination_statistic(prod, q, p, pairs) == 1.0
        zero = TransportPlan.from_pi(np.zeros((3, 4)), q, p)
        assert termination_statistic(zero, q, p, pairs) == 0.0

    def test_report_dict(self):
        d = solve_dual([[1.0]], ONE, ONE, KL1).to_dict()
        for key in ("dual_value", "primal_value", "epsilon_certificate", "iterations",
                    "termination_statistic", "reg_distance", "debiased_distance"):
            assert key in d


class TestDistances:
    def test_identical_singletons(self):
        a = DiscreteDistribution.uniform([[0.3, 0.1]])
        rep = reg_distance(a, a, "l1", KL1)
        assert rep.reg_distance == pytest.approx(0.0, abs=1e-12)
        assert rep.debiased_distance == pytest.approx(0.0, abs=1e-12)

    def test_distinct_singletons(self):
        a, b = DiscreteDistribution.uniform([[0.0]]), DiscreteDistribution.uniform([[1.0]])
        assert reg_distance(a, b, "l1", KL1).reg_distance == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("lam", [0.1, 1.0, 3.0])
    def test_2x2_golden_section(self, lam):
        a = DiscreteDistribution.uniform([[0.0], [1.0]])
        reg = Regularizer("kl", lam)
        rep = reg_distance(a, a, "l1", reg, stop=StopCriteria(gap=1e-10))
        a_star, value = golden_2x2(lam)
        assert rep.reg_distance == pytest.approx(value, abs=1e-6)
        expected = np.array([[a_star, 0.5 - a_star], [0.5 - a_star, a_star]])
        np.testing.assert_allclose(rep.plan.pi, expected, atol=1e-6)

    def test_sinkhorn_loss_self(self, rng):
        a = DiscreteDistribution.uniform(rng.random((5, 2)))
        assert abs(sinkhorn_loss(a, a, "l1", Regularizer("kl", 0.3), stop=TIGHT)) <= 2e-9

    @pytest.mark.parametrize("lam", [0.01, 1.0, 100.0])
    def test_sinkhorn_loss_singletons(self, lam):
        a, b = DiscreteDistribution.uniform([[0.0]]), DiscreteDistribution.uniform([[1.0]])
        assert sinkhorn_loss(a, b, "l1", Regularizer("kl", lam)) == pytest.approx(2.0, abs=1e-9)

    def test_sinkhorn_loss_nonnegative(self, rng):
        for lam in (0.1, 1.0, 10.0):
            a = DiscreteDistribution.uniform(rng.random((6, 2)))
            b = DiscreteDistribution.uniform(rng.random((6, 2)))
            assert sinkhorn_loss(a, b, "l1", Regularizer("kl", lam), stop=TIGHT) >= -1e-6

    def test_exact_ot_examples(self, rng):
        a = DiscreteDistribution.uniform(rng.random((4, 2)))
        assert exact_ot(a, a, "l1") == 0.0
        two = DiscreteDistribution.uniform([[0.0], [1.0]])
        assert exact_ot(two, two, "l1") == 0.0

    def test_exact_ot_permutations(self, rng):
        for _ in range(5):
            a, b, c = random_instance(rng, 5, 5)
            assert exact_ot(a, b, "l1") == pytest.approx(permutation_oracle(c), abs=1e-14)

    def test_exact_ot_large_matches_lp(self, rng):
        a, b, c = random_instance(rng, 10, 10)
        n = 10
        A = np.vstack([np.kron(np.eye(n), np.ones(n)), np.kron(np.ones(n), np.eye(n))])
        lp = linprog(c.ravel(), A_eq=A, b_eq=np.full(2 * n, 1 / n), bounds=(0, None))
        assert exact_ot(a, b, "l1") == pytest.approx(lp.fun, abs=1e-9)

    def test_exact_ot_1d_quantile(self):
        a = DiscreteDistribution(np.array([[0.0], [1.0]]), np.array([0.3, 0.7]))
        b = DiscreteDistribution.uniform([[0.5]])
        assert exact_ot(a, b, "l1") == pytest.approx(0.5)

    def test_exact_ot_unsupported(self, rng):
        a = DiscreteDistribution.uniform(rng.random((3, 2)))
        b = DiscreteDistribution.uniform(rng.random((4, 2)))
        with pytest.raises(ValueError):
            exact_ot(a, b, "l1")

    def test_gap_bound(self):
        assert gap_bound(uniform(2), uniform(2), Regularizer("kl", 0.5)).slack == pytest.approx(0.5 * math.log(2))
        assert gap_bound(uniform(3), uniform(7), Regularizer("l2", 1.0)).istar_bound == 1.5
        assert gap_bound(ONE, ONE, KL1).slack == 0.0

    def test_monotone_consistency(self):
        r = np.random.default_rng(3)
        for _ in range(5):
            a, b, _ = random_instance(r, 5, 5)
            exact = exact_ot(a, b, "l1")
            gaps = [abs(reg_distance(a, b, "l1", Regularizer("kl", lam), stop=TIGHT).reg_distance - exact)
                    for lam in (1.0, 0.1, 0.01, 0.001)]
            assert all(x >= y - 1e-10 for x, y in zip(gaps, gaps[1:]))


# properties

dims = st.integers(1, 5)


@given(m=dims, n=dims, seed=st.integers(0, 2**31), kind=st.sampled_from(["kl", "l2"]),
       lam=st.floats(0.05, 5.0))
def test_weak_duality(m, n, seed, kind, lam):
    r = np.random.default_rng(seed)
    c = r.random((m, n))
    q, p = r.dirichlet(np.ones(m)), r.dirichlet(np.ones(n))
    reg = Regularizer(kind, lam)
    pot = DualPotentials(r.standard_normal(m), r.standard_normal(n))
    F = dual_objective(pot, c, q, p, reg)
    H = primal_value(round_to_feasible(plan_from_duals(pot, c, q, p, reg), q, p), c, q, p, reg)
    assert F <= H + 1e-9


@given(m=dims, n=dims, seed=st.integers(0, 2**31), kind=st.sampled_from(["kl", "l2"]),
       t=st.floats(-5, 5))
def test_shift_invariance(m, n, seed, kind, t):
    r = np.random.default_rng(seed)
    c = r.random((m, n))
    q, p = r.dirichlet(np.ones(m)), r.dirichlet(np.ones(n))
    reg = Regularizer(kind, 0.5)
    pot = DualPotentials(r.standard_normal(m), r.standard_normal(n))
    assert dual_objective(pot.shifted(t), c, q, p, reg) == pytest.approx(
        dual_objective(pot, c, q, p, reg), abs=1e-10)
    np.testing.assert_allclose(plan_from_duals(pot.shifted(t), c, q, p, reg).pi,
                               plan_from_duals(pot, c, q, p, reg).pi, atol=1e-12)


@given(m=dims, n=dims, seed=st.integers(0, 2**31), kind=st.sampled_from(["kl", "l2"]),
       lam=st.sampled_from([0.01, 0.1, 1.0]))
def test_solve_certificate(m, n, seed, kind, lam):
    r = np.random.default_rng(seed)
    c = r.random((m, n))
    q, p = r.dirichlet(np.ones(m)), r.dirichlet(np.ones(n))
    rep = solve_dual(c, q, p, Regularizer(kind, lam), stop=StopCriteria(gap=1e-9, max_iters=200))
    assert rep.epsilon_certificate >= -1e-9
    assert rep.dual_value <= rep.primal_value + 1e-9
    assert rep.converged
    assert abs(rep.potentials.psi.mean()) <= 1e-9


@given(seed=st.integers(0, 2**31), size=st.integers(1, 5), kind=st.sampled_from(["kl", "l2"]),
       lam=st.sampled_from([1e-3, 1e-2, 0.1, 1.0]))
def test_sandwich(seed, size, kind, lam):
    r = np.random.default_rng(seed)
    a = DiscreteDistribution.uniform(r.random((size, 2)))
    b = DiscreteDistribution.uniform(r.random((size, 2)))
    reg = Regularizer(kind, lam)
    d = reg_distance(a, b, "l1", reg, stop=StopCriteria(gap=1e-11, max_iters=500)).dual_value
    exact = exact_ot(a, b, "l1")
    assert exact <= d + 1e-8
    assert d - gap_bound(a.weights, b.weights, reg).slack <= exact + 1e-8
