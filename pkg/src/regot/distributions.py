"""Finite-support distributions, ground costs and pairwise cost matrices."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "CostFunction",
    "DiscreteDistribution",
    "cost",
    "cost_grad_x",
    "cost_matrix",
    "pairwise_cost",
    "pairwise_cost_grad_x",
    "sample",
    "gaussian_grid",
    "read_point_cloud",
    "write_point_cloud",
    "write_mode_centers",
    "read_mode_centers",
]


class CostFunction(str, Enum):
    """Ground cost between two points.

    ``SQUARED_L2`` carries the 1/2 factor, ``COSINE`` is one minus the cosine
    similarity and ``EUCLIDEAN`` is the plain 2-norm distance (a metric, used
    where a proper distance is required).
    """

    L1 = "l1"
    SQUARED_L2 = "l2sq"
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Probability measure with finitely many atoms.

    Parameters
    ----------
    support : ndarray, shape (n, d)
        Atom locations, one row per point.
    weights : ndarray, shape (n,)
        Nonnegative probabilities summing to one.
    metadata : dict
        Free-form annotations (e.g. ``mode_centers`` for mixtures).
    """

    support: np.ndarray
    weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        support = np.asarray(self.support, dtype=float)
        if support.ndim == 1:
            support = support[:, None]
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if support.ndim != 2 or support.shape[0] == 0:
            raise ValueError("support must be a non-empty (n, d) array")
        if weights.shape[0] != support.shape[0]:
            raise ValueError(
                f"got {weights.shape[0]} weights for {support.shape[0]} atoms"
            )
        if not np.all(np.isfinite(support)):
            raise ValueError("support coordinates must be finite")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")
        support.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points, metadata=None) -> "DiscreteDistribution":
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        n = points.shape[0]
        if n == 0:
            raise ValueError("support must be non-empty")
        return cls(points, np.full(n, 1.0 / n), dict(metadata or {}))

    @property
    def size(self) -> int:
        return self.support.shape[0]

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def is_uniform(self, rtol: float = 1e-12) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.size, rtol=rtol, atol=0))


def _as_point(x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise ValueError("a point must be a 1-D coordinate vector")
    return x


def _check_pair(x, y):
    x, y = _as_point(x), _as_point(y)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return x, y


def cost(cost_fn, x, y) -> float:
    """Evaluate ``c(x, y)`` for a single pair of points."""
    x, y = _check_pair(x, y)
    return float(pairwise_cost(x[None, :], y[None, :], cost_fn)[0, 0])


def cost_grad_x(cost_fn, x, y) -> np.ndarray:
    """Gradient of ``c(x, y)`` with respect to ``x``.

    Non-differentiable points use the zero subgradient (``sign(0) = 0`` for L1,
    zero at ``x == y`` for the Euclidean distance). For every symmetric cost
    the gradient in ``y`` is ``cost_grad_x(cost_fn, y, x)``.
    """
    x, y = _check_pair(x, y)
    return pairwise_cost_grad_x(x[None, :], y[None, :], cost_fn)[0, 0]


def _check_sets(X, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y


def _norms_nonzero(X):
    n = np.linalg.norm(X, axis=1)
    if np.any(n == 0):
        raise ValueError("cosine cost is undefined for the zero vector")
    return n


def pairwise_cost(X, Y, cost_fn) -> np.ndarray:
    """Cost matrix between the rows of ``X`` (M, d) and ``Y`` (N, d)."""
    cost_fn = CostFunction(cost_fn)
    X, Y = _check_sets(X, Y)
    if cost_fn is CostFunction.L1:
        return np.abs(X[:, None, :] - Y[None, :, :]).sum(axis=2)
    if cost_fn is CostFunction.SQUARED_L2:
        diff = X[:, None, :] - Y[None, :, :]
        return 0.5 * np.einsum("ijk,ijk->ij", diff, diff)
    if cost_fn is CostFunction.EUCLIDEAN:
        diff = X[:, None, :] - Y[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    nx, ny = _norms_nonzero(X), _norms_nonzero(Y)
    sim = (X @ Y.T) / np.outer(nx, ny)
    return 1.0 - sim


def pairwise_cost_grad_x(X, Y, cost_fn) -> np.ndarray:
    """Gradients ``d c(x_i, y_j) / d x_i`` stacked as an (M, N, d) array."""
    cost_fn = CostFunction(cost_fn)
    X, Y = _check_sets(X, Y)
    diff = X[:, None, :] - Y[None, :, :]
    if cost_fn is CostFunction.L1:
        return np.sign(diff)
    if cost_fn is CostFunction.SQUARED_L2:
        return diff
    if cost_fn is CostFunction.EUCLIDEAN:
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        safe = np.where(dist > 0, dist, 1.0)
        return np.where(dist[..., None] > 0, diff / safe[..., None], 0.0)
    nx, ny = _norms_nonzero(X), _norms_nonzero(Y)
    # d/dx [ -<x,y>/(|x||y|) ] = -y/(|x||y|) + <x,y> x/(|x|^3 |y|)
    dots = X @ Y.T
    term_y = Y[None, :, :] / (nx[:, None, None] * ny[None, :, None])
    term_x = (dots / (nx[:, None] ** 3 * ny[None, :]))[..., None] * X[:, None, :]
    return term_x - term_y


def cost_matrix(cost_fn, a: DiscreteDistribution, b: DiscreteDistribution) -> np.ndarray:
    """Cost matrix between the supports of ``a`` (rows) and ``b`` (columns)."""
    return pairwise_cost(a.support, b.support, cost_fn)


def sample(d: DiscreteDistribution, n: int, rng_seed) -> np.ndarray:
    """Draw ``n`` atom indices i.i.d. from ``d`` by inverting the weight CDF.

    ``rng_seed`` may be an integer or an existing ``numpy.random.Generator``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(rng_seed)
    cdf = np.cumsum(d.weights)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return np.minimum(idx, d.size - 1)


def gaussian_grid(modes_per_side: int, spacing: float, sigma: float,
                  n_per_mode: int, rng_seed) -> DiscreteDistribution:
    """Empirical mixture of isotropic Gaussians centred on a square grid.

    The grid is centred at the origin; mode centres are stored in
    ``metadata["mode_centers"]`` together with ``sigma`` and ``spacing``.
    """
    if modes_per_side < 1:
        raise ValueError("modes_per_side must be at least 1")
    if n_per_mode < 1:
        raise ValueError("n_per_mode must be at least 1")
    offsets = (np.arange(modes_per_side) - (modes_per_side - 1) / 2.0) * spacing
    gx, gy = np.meshgrid(offsets, offsets, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    rng = np.random.default_rng(rng_seed)
    noise = rng.standard_normal((centers.shape[0], n_per_mode, 2)) * sigma
    points = (centers[:, None, :] + noise).reshape(-1, 2)
    meta = {"mode_centers": centers, "sigma": float(sigma), "spacing": float(spacing)}
    return DiscreteDistribution.uniform(points, meta)


def write_point_cloud(path, d: DiscreteDistribution, with_weights: bool | None = None):
    """Write a point cloud CSV (header row, one point per row).

    A trailing ``weight`` column is written when the weights are not uniform
    or when ``with_weights`` is true.
    """
    if with_weights is None:
        with_weights = not d.is_uniform()
    header = [f"x{k}" for k in range(d.dim)] + (["weight"] if with_weights else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for pt, wt in zip(d.support, d.weights):
            row = [repr(float(v)) for v in pt]
            if with_weights:
                row.append(repr(float(wt)))
            w.writerow(row)


def read_point_cloud(path) -> DiscreteDistribution:
    """Read a point cloud CSV written by :func:`write_point_cloud`.

    Raises ``ValueError`` on malformed content.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r and any(s.strip() for s in r)]
    if not body:
        raise ValueError(f"{path}: no data rows")
    try:
        data = np.array([[float(s) for s in r] for r in body])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows or header/column mismatch")
    if header[-1].lower() == "weight":
        if data.shape[1] < 2:
            raise ValueError(f"{path}: weight column without coordinates")
        weights = data[:, -1]
        total = weights.sum()
        if total <= 0:
            raise ValueError(f"{path}: weights must have positive total")
        return DiscreteDistribution(data[:, :-1], weights / total)
    return DiscreteDistribution.uniform(data)


def write_mode_centers(path, centers, sigma: float, spacing: float | None = None):
    doc = {"mode_centers": np.asarray(centers, dtype=float).tolist(), "sigma": float(sigma)}
    if spacing is not None:
        doc["spacing"] = float(spacing)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_mode_centers(path):
    doc = json.loads(Path(path).read_text())
    return np.asarray(doc["mode_centers"], dtype=float), float(doc["sigma"])
