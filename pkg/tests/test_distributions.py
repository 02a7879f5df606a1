import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from regot.distributions import (
    CostFunction,
    DiscreteDistribution,
    cost,
    cost_grad_x,
    cost_matrix,
    gaussian_grid,
    pairwise_cost,
    read_mode_centers,
    read_point_cloud,
    sample,
    write_mode_centers,
    write_point_cloud,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def points(dim):
    return arrays(np.float64, (dim,), elements=finite)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestCostExamples:
    def test_l1(self):
        assert cost("l1", [0, 0], [0, 1]) == 1.0

    def test_cosine_identical(self):
        assert cost("cosine", [1, 0], [1, 0]) == pytest.approx(0.0, abs=1e-15)

    def test_squared_l2_half_factor(self):
        assert cost("l2sq", [3], [1]) == 2.0

    def test_grad_squared_l2(self):
        np.testing.assert_array_equal(cost_grad_x("l2sq", [3], [1]), [2.0])

    def test_grad_l1_sign_zero(self):
        np.testing.assert_array_equal(cost_grad_x("l1", [0, 2], [0, 1]), [0.0, 1.0])

    def test_grad_cosine_matches_fd(self, rng):
        x, y = rng.standard_normal(3), rng.standard_normal(3)
        g = cost_grad_x("cosine", x, y)
        fd = fd_grad(lambda z: cost("cosine", z, y), x)
        assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)

    def test_mismatched_dims(self):
        with pytest.raises(ValueError):
            cost("l1", [0, 0], [1])


class TestCostMatrix:
    def test_scalar(self):
        a = DiscreteDistribution.uniform([[0.0]])
        b = DiscreteDistribution.uniform([[3.0]])
        np.testing.assert_array_equal(cost_matrix("l1", a, b), [[3.0]])

    def test_two_by_one(self):
        a = DiscreteDistribution.uniform([[0, 0], [1, 1]])
        b = DiscreteDistribution.uniform([[0, 1]])
        np.testing.assert_array_equal(cost_matrix("l1", a, b), [[1.0], [1.0]])

    def test_zero_diagonal(self, rng):
        a = DiscreteDistribution.uniform(rng.standard_normal((4, 3)))
        np.testing.assert_array_equal(np.diag(cost_matrix("l2sq", a, a)), 0.0)


class TestDistribution:
    def test_weights_normalized(self):
        with pytest.raises(ValueError):
            DiscreteDistribution(np.zeros((2, 1)), np.array([0.5, 0.6]))

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            DiscreteDistribution(np.zeros((2, 1)), np.array([1.5, -0.5]))

    def test_empty_support(self):
        with pytest.raises(ValueError):
            DiscreteDistribution.uniform(np.zeros((0, 2)))

    def test_nonfinite(self):
        with pytest.raises(ValueError):
            DiscreteDistribution.uniform([[np.nan, 0.0]])


class TestSample:
    def test_point_mass(self):
        d = DiscreteDistribution.uniform([[1.0, 2.0]])
        assert list(sample(d, 5, 0)) == [0] * 5

    def test_frequency(self):
        d = DiscreteDistribution.uniform([[0.0], [1.0]])
        idx = sample(d, 100_000, 42)
        assert abs(np.mean(idx == 0) - 0.5) <= 0.01

    def test_determinism(self):
        d = DiscreteDistribution.uniform(np.arange(7.0)[:, None])
        np.testing.assert_array_equal(sample(d, 50, 9), sample(d, 50, 9))

    def test_distinct_seeds(self):
        d = DiscreteDistribution.uniform(np.arange(7.0)[:, None])
        assert not np.array_equal(sample(d, 100, 1), sample(d, 100, 2))


class TestGaussianGrid:
    def test_25_centers(self):
        g = gaussian_grid(5, 2.0, 0.1, 3, 0)
        assert len(g.metadata["mode_centers"]) == 25
        assert g.size == 75

    def test_sigma_zero(self):
        g = gaussian_grid(3, 2.0, 0.0, 4, 0)
        centers = np.asarray(g.metadata["mode_centers"])
        d = np.linalg.norm(g.support[:, None, :] - centers[None], axis=2).min(axis=1)
        np.testing.assert_array_equal(d, 0.0)

    def test_single_mode_at_origin(self):
        g = gaussian_grid(1, 123.0, 0.0, 5, 0)
        np.testing.assert_array_equal(g.support, 0.0)


class TestIO:
    def test_point_cloud_roundtrip(self, tmp_path, rng):
        d = DiscreteDistribution(rng.standard_normal((6, 2)), np.full(6, 1 / 6))
        write_point_cloud(tmp_path / "a.csv", d)
        back = read_point_cloud(tmp_path / "a.csv")
        np.testing.assert_array_equal(back.support, d.support)

    def test_weighted_roundtrip(self, tmp_path):
        d = DiscreteDistribution(np.array([[0.0], [1.0]]), np.array([0.25, 0.75]))
        write_point_cloud(tmp_path / "w.csv", d)
        np.testing.assert_allclose(read_point_cloud(tmp_path / "w.csv").weights, [0.25, 0.75])

    @pytest.mark.parametrize("text", ["", "x0\n", "x0,x1\n1,foo\n", "x0,x1\n1\n"])
    def test_malformed(self, tmp_path, text):
        p = tmp_path / "bad.csv"
        p.write_text(text)
        with pytest.raises(ValueError):
            read_point_cloud(p)

    def test_mode_centers(self, tmp_path):
        write_mode_centers(tmp_path / "m.json", [[0, 1], [2, 3]], 0.5, 2.0)
        centers, sigma = read_mode_centers(tmp_path / "m.json")
        assert centers.shape == (2, 2) and sigma == 0.5
        assert json.loads((tmp_path / "m.json").read_text())["spacing"] == 2.0


# properties

KINDS = [CostFunction.L1, CostFunction.SQUARED_L2, CostFunction.COSINE, CostFunction.EUCLIDEAN]


@given(st.sampled_from(KINDS), points(3), points(3))
def test_symmetry(kind, x, y):
    if kind is CostFunction.COSINE and (np.linalg.norm(x) == 0 or np.linalg.norm(y) == 0):
        return
    assert cost(kind, x, y) == cost(kind, y, x)


@given(points(2), points(2), points(2))
def test_l1_triangle(x, y, z):
    assert cost("l1", x, z) <= cost("l1", x, y) + cost("l1", y, z) + 1e-12


@given(st.sampled_from([CostFunction.L1, CostFunction.SQUARED_L2]), points(3), points(3))
def test_nonnegative_and_zero_on_diagonal(kind, x, y):
    assert cost(kind, x, y) >= 0
    assert cost(kind, x, x) == 0


@given(points(3).filter(lambda v: np.linalg.norm(v) > 1e-3),
       points(3).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_cosine_range(x, y):
    assert -1e-12 <= cost("cosine", x, y) <= 2 + 1e-12


def test_cost_matrix_entries_exact(rng):
    a = DiscreteDistribution.uniform(rng.standard_normal((5, 3)))
    b = DiscreteDistribution.uniform(rng.standard_normal((4, 3)))
    for kind in KINDS:
        C = cost_matrix(kind, a, b)
        for i in range(5):
            for j in range(4):
                assert C[i, j] == cost(kind, a.support[i], b.support[j])


@pytest.mark.parametrize("kind", KINDS)
def test_grad_matches_fd_at_random_points(kind):
    r = np.random.default_rng(7)
    for _ in range(200):
        x, y = r.standard_normal(3), r.standard_normal(3)
        if kind is CostFunction.L1 and np.min(np.abs(x - y)) < 1e-3:
            continue
        g = cost_grad_x(kind, x, y)
        fd = fd_grad(lambda z: cost(kind, z, y), x)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_pairwise_matches_cost(rng):
    X, Y = rng.standard_normal((3, 2)), rng.standard_normal((2, 2))
    C = pairwise_cost(X, Y, "euclidean")
    assert C[1, 0] == pytest.approx(np.linalg.norm(X[1] - Y[0]))
