"""Parametric generators with hand-written reverse-mode products.

Two families are provided: the linear map ``G(x) = Theta x`` and a fully
connected network with a configurable activation and an affine output
layer.  Parameters live in one flat vector; a layout of named segments maps
slices of it to weight matrices and bias vectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np

from .distributions import CostFunction, pairwise_cost_grad_x

__all__ = [
    "Activation",
    "LinearSpec",
    "MlpSpec",
    "LinearGeneratorSpec",
    "Segment",
    "GeneratorParams",
    "Zeros",
    "UniformScaled",
    "layout",
    "n_params",
    "forward",
    "vjp",
    "vjp_sum",
    "cost_pullback",
    "jacobian",
    "init_params",
    "save_params",
    "load_params",
    "spec_to_dict",
    "spec_from_dict",
]

PARAMS_FORMAT = "regot-generator-params v1"


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class LinearSpec:
    """``G(x) = Theta x`` with ``Theta`` of shape (d_out, n_in); no bias."""

    n_in: int
    d_out: int

    def __post_init__(self):
        if self.n_in < 1 or self.d_out < 1:
            raise ValueError("dimensions must be positive")


@dataclass(frozen=True)
class MlpSpec:
    n_in: int
    hidden_sizes: tuple[int, ...]
    d_out: int
    activation: Activation = Activation.TANH

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "activation", Activation(self.activation))
        if not self.hidden_sizes:
            raise ValueError("an MLP needs at least one hidden layer")
        if self.n_in < 1 or self.d_out < 1 or min(self.hidden_sizes) < 1:
            raise ValueError("dimensions must be positive")


GeneratorSpec = Union[LinearSpec, MlpSpec]


@dataclass(frozen=True)
class LinearGeneratorSpec:
    """Linear testbed: code dimension ``n``, data dimension ``d`` and the
    radii bounding the code and data supports."""

    n: int
    d: int
    r_x: float
    r_y: float

    def __post_init__(self):
        if self.r_x <= 0 or self.r_y <= 0:
            raise ValueError("radii must be positive")

    @property
    def spec(self) -> LinearSpec:
        return LinearSpec(self.n, self.d)


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def view(self, theta: np.ndarray) -> np.ndarray:
        return theta[self.offset:self.offset + self.size].reshape(self.shape)


def layout(spec: GeneratorSpec) -> tuple[Segment, ...]:
    """Named segments of the flat parameter vector, in storage order."""
    if isinstance(spec, LinearSpec):
        return (Segment("Theta", (spec.d_out, spec.n_in), 0),)
    segs = []
    offset = 0
    widths = (spec.n_in, *spec.hidden_sizes, spec.d_out)
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        for name, shape in ((f"W{k}", (fan_out, fan_in)), (f"b{k}", (fan_out,))):
            segs.append(Segment(name, shape, offset))
            offset += int(np.prod(shape))
    return tuple(segs)


def n_params(spec: GeneratorSpec) -> int:
    return sum(s.size for s in layout(spec))


@dataclass(frozen=True, eq=False)
class GeneratorParams:
    theta: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if sum(s.size for s in self.layout) != theta.size:
            raise ValueError("layout segment sizes do not add up to len(theta)")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def for_spec(cls, spec: GeneratorSpec, theta) -> "GeneratorParams":
        return cls(theta, layout(spec))

    def with_theta(self, theta) -> "GeneratorParams":
        return GeneratorParams(theta, self.layout)

    def segment(self, name: str) -> np.ndarray:
        for s in self.layout:
            if s.name == name:
                return s.view(self.theta)
        raise KeyError(name)


def _theta(params) -> np.ndarray:
    return params.theta if isinstance(params, GeneratorParams) else np.asarray(params, dtype=float)


def _as_batch(x, n_in):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != n_in:
        raise ValueError(f"expected inputs of dimension {n_in}, got shape {x.shape}")
    return X, single


def _act(kind, z):
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _act_grad(kind, z, a):
    if kind is Activation.TANH:
        return 1.0 - a * a
    if kind is Activation.RELU:
        return (z > 0).astype(float)  # zero at the kink
    return np.ones_like(z)


def _unpack(spec, theta):
    segs = layout(spec)
    if theta.size != sum(s.size for s in segs):
        raise ValueError(f"parameter vector has length {theta.size}, "
                         f"layout needs {sum(s.size for s in segs)}")
    return [s.view(theta) for s in segs]


def _forward_cache(spec, theta, X):
    views = _unpack(spec, theta)
    if isinstance(spec, LinearSpec):
        return X @ views[0].T, None
    Ws, bs = views[0::2], views[1::2]
    acts, pre = [X], []
    h = X
    for W, b in zip(Ws[:-1], bs[:-1]):
        z = h @ W.T + b
        h = _act(spec.activation, z)
        pre.append(z)
        acts.append(h)
    out = h @ Ws[-1].T + bs[-1]
    return out, (Ws, acts, pre)


def forward(spec: GeneratorSpec, params, x) -> np.ndarray:
    """Generator output for one code ``x`` (n_in,) or a batch (S, n_in)."""
    X, single = _as_batch(x, spec.n_in)
    out, _ = _forward_cache(spec, _theta(params), X)
    return out[0] if single else out


def vjp_sum(spec: GeneratorSpec, params, X, U) -> np.ndarray:
    """``sum_s U[s]^T J_theta(X[s])`` as a flat vector aligned with the layout."""
    theta = _theta(params)
    X, _ = _as_batch(X, spec.n_in)
    U = np.asarray(U, dtype=float).reshape(X.shape[0], spec.d_out)
    out, cache = _forward_cache(spec, theta, X)
    if isinstance(spec, LinearSpec):
        return (U.T @ X).ravel()
    Ws, acts, pre = cache
    grads = []
    delta = U
    for k in range(len(Ws) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ acts[k]).ravel())
        if k > 0:
            back = delta @ Ws[k]
            delta = back * _act_grad(spec.activation, pre[k - 1], acts[k])
    # collected as b_last, W_last, ..., b0, W0; storage order is W0, b0, ...
    return np.concatenate(grads[::-1])


def vjp(spec: GeneratorSpec, params, x, upstream) -> np.ndarray:
    """``upstream^T J_theta(x)`` for a single code ``x``."""
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float).reshape(-1)
    if x.ndim != 1:
        raise ValueError("vjp takes a single code; use vjp_sum for batches")
    if upstream.size != spec.d_out:
        raise ValueError(f"upstream has length {upstream.size}, output dimension is {spec.d_out}")
    return vjp_sum(spec, params, x[None, :], upstream[None, :])


def jacobian(spec: GeneratorSpec, params, x) -> np.ndarray:
    """``J_theta(x)`` as a (d_out, n_params) matrix, one vjp per output."""
    x = np.asarray(x, dtype=float).reshape(-1)
    X = np.repeat(x[None, :], spec.d_out, axis=0)
    rows = [vjp_sum(spec, params, X[k:k + 1], np.eye(spec.d_out)[k:k + 1])
            for k in range(spec.d_out)]
    return np.stack(rows)


def cost_pullback(spec: GeneratorSpec, params, x, y, cost_fn: CostFunction) -> np.ndarray:
    """``grad_theta c(G_theta(x), y)``."""
    z = forward(spec, params, x)
    y = np.asarray(y, dtype=float).reshape(-1)
    g = pairwise_cost_grad_x(z[None, :], y[None, :], cost_fn)[0, 0]
    return vjp(spec, params, x, g)


@dataclass(frozen=True)
class Zeros:
    pass


@dataclass(frozen=True)
class UniformScaled:
    """Weights ~ U(-scale/sqrt(fan_in), scale/sqrt(fan_in)); biases zero."""

    scale: float = 1.0


def init_params(spec: GeneratorSpec, scheme=UniformScaled(), rng_seed=0) -> GeneratorParams:
    segs = layout(spec)
    theta = np.zeros(sum(s.size for s in segs))
    if isinstance(scheme, Zeros):
        return GeneratorParams(theta, segs)
    rng = np.random.default_rng(rng_seed)
    for s in segs:
        if len(s.shape) == 2:
            bound = scheme.scale / math.sqrt(s.shape[1])
            theta[s.offset:s.offset + s.size] = rng.uniform(-bound, bound, s.size)
    return GeneratorParams(theta, segs)


def spec_to_dict(spec: GeneratorSpec) -> dict:
    if isinstance(spec, LinearSpec):
        return {"kind": "linear", "n_in": spec.n_in, "d_out": spec.d_out}
    return {"kind": "mlp", "n_in": spec.n_in, "hidden_sizes": list(spec.hidden_sizes),
            "d_out": spec.d_out, "activation": spec.activation.value}


def spec_from_dict(doc: dict) -> GeneratorSpec:
    if doc["kind"] == "linear":
        return LinearSpec(int(doc["n_in"]), int(doc["d_out"]))
    if doc["kind"] == "mlp":
        return MlpSpec(int(doc["n_in"]), tuple(doc["hidden_sizes"]), int(doc["d_out"]),
                       Activation(doc.get("activation", "tanh")))
    raise ValueError(f"unknown generator kind {doc['kind']!r}")


def save_params(path, spec: GeneratorSpec, params: GeneratorParams):
    """Write a one-line format header followed by a JSON document."""
    doc = {
        "spec": spec_to_dict(spec),
        "layout": [{"name": s.name, "shape": list(s.shape), "offset": s.offset}
                   for s in params.layout],
        "theta": [float(v) for v in params.theta],
    }
    Path(path).write_text(f"# {PARAMS_FORMAT}\n" + json.dumps(doc) + "\n")


def load_params(path) -> tuple[GeneratorSpec, GeneratorParams]:
    text = Path(path).read_text()
    header, _, body = text.partition("\n")
    if header.strip() != f"# {PARAMS_FORMAT}":
        raise ValueError(f"{path}: unrecognized params header {header!r}")
    doc = json.loads(body)
    spec = spec_from_dict(doc["spec"])
    params = GeneratorParams.for_spec(spec, doc["theta"])
    stored = tuple(Segment(d["name"], tuple(d["shape"]), int(d["offset"])) for d in doc["layout"])
    if stored != params.layout:
        raise ValueError(f"{path}: layout does not match the generator spec")
    return spec, params
