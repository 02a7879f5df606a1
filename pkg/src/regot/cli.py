"""Command-line entry point: ``regot {dist,train,probe,gen-data}``.

Exit codes: 0 success, 1 probe violations, 2 bad input or flags,
3 solver non-convergence, 130 interrupted.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from contextlib import nullcontext
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis
from .distributions import (
    CostFunction,
    DiscreteDistribution,
    gaussian_grid,
    read_mode_centers,
    read_point_cloud,
    write_mode_centers,
    write_point_cloud,
)
from .generators import (
    Activation,
    LinearGeneratorSpec,
    LinearSpec,
    MlpSpec,
    UniformScaled,
    forward,
    init_params,
    save_params,
)
from .regularized_ot import (
    Method,
    Regularizer,
    StopCriteria,
    reg_distance,
)
from .training import (
    Adam,
    Fixed,
    Objective,
    Oracle,
    Sgd,
    Thm42,
    TrainConfig,
    estimate_gradient_regot,
    estimate_gradient_sinkhorn,
    mode_coverage,
    objective_value,
    train,
    write_trajectory,
)

log = logging.getLogger("regot")

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_NONCONVERGED, EXIT_INTERRUPTED = 0, 1, 2, 3, 130

# Table 1 defaults for the 2-D Gaussian mixture; the grid geometry and code
# distribution are our choices (see README).
_GRID_BASE = {
    "objective": "regot",
    "cost_fn": "l1",
    "reg": {"kind": "l2", "lambda": 0.01},
    "batch_size": 128,
    "gen_iters": 10000,
    "disc_stop": {"max_iters": 20, "stat_band": 0.01, "check_every": 1, "step0": 0.001},
    "disc_method": None,
    "optimizer": {"kind": "adam", "lr": 0.003, "beta1": 0.5, "beta2": 0.9},
    "eval_every": 500,
    "eval_size": 256,
    "codes": {"kind": "gaussian", "dim": 4, "n": 2000},
    "generator": {"kind": "mlp", "hidden_sizes": [128, 128], "activation": "tanh",
                  "init_scale": 1.0},
    "ckpt_every": 1000,
}
PRESETS = {
    "gaussian-grid-25": {**_GRID_BASE, "data": {"kind": "gaussian-grid", "modes_per_side": 5,
                                                "spacing": 2.0, "sigma": 0.2, "n_per_mode": 100}},
    "gaussian-grid-9": {**_GRID_BASE, "data": {"kind": "gaussian-grid", "modes_per_side": 3,
                                               "spacing": 2.0, "sigma": 0.2, "n_per_mode": 100}},
}
QUICK_ITERS = 2000
CODES_SEED_OFFSET = 1000
ESTIMATE_ATOMS = 32

PROBE_NAMES = ("smoothness", "grad-scaling", "sandwich", "pseudo-distance",
               "sinkhorn-robustness", "large-lambda", "convergence-shape")


class UsageError(Exception):
    """Bad input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config handling

def load_schema() -> dict:
    text = resources.files("regot").joinpath("config_schema.json").read_text()
    return json.loads(text)


def validate_config(doc: dict):
    import jsonschema

    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config invalid at {where}: {exc.message}") from None


def apply_override(doc: dict, item: str):
    """``a.b.c=value``; the value is parsed as JSON, falling back to a string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise UsageError(f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def _stop_from_doc(d: dict | None) -> StopCriteria:
    base = TrainConfig().disc_stop
    return replace(base, **(d or {}))


def _optimizer_from_doc(d: dict | None):
    if d is None:
        return Adam()
    d = dict(d)
    kind = d.pop("kind")
    if kind == "adam":
        return Adam(**d)
    if d.get("schedule") == "thm42":
        return Sgd(Thm42())
    return Sgd(Fixed(d.get("step", 0.01)))


def train_config_from_doc(doc: dict) -> TrainConfig:
    """Map the ``TrainConfig`` part of a validated document to the dataclass."""
    kw = {}
    names = {f.name for f in fields(TrainConfig)}
    for k, v in doc.items():
        if k not in names:
            continue
        if k == "reg":
            v = Regularizer(v["kind"], v["lambda"])
        elif k == "disc_stop":
            v = _stop_from_doc(v)
        elif k == "optimizer":
            v = _optimizer_from_doc(v)
        kw[k] = v
    try:
        return TrainConfig(**kw)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _build_data(doc, seed):
    d = doc.get("data")
    if d is None:
        raise UsageError("config needs a data block")
    if d["kind"] == "gaussian-grid":
        data = gaussian_grid(d["modes_per_side"], d["spacing"], d["sigma"], d["n_per_mode"],
                             d.get("seed", seed))
        md = data.metadata
        return data, np.asarray(md["mode_centers"]), float(md["sigma"])
    try:
        data = read_point_cloud(d["path"])
        centers = sigma = None
        if d.get("mode_centers"):
            centers, sigma = read_mode_centers(d["mode_centers"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read data: {exc}") from None
    return data, centers, sigma


def _build_codes(doc, seed):
    c = doc.get("codes", {"kind": "gaussian", "dim": 4, "n": 2000})
    if c["kind"] == "gaussian":
        rng = np.random.default_rng(c.get("seed", seed + CODES_SEED_OFFSET))
        return DiscreteDistribution.uniform(rng.standard_normal((c["n"], c["dim"])))
    try:
        return read_point_cloud(c["path"])
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read codes: {exc}") from None


def _build_generator(doc, n_in, d_out):
    g = doc.get("generator", {"kind": "mlp", "hidden_sizes": [128, 128]})
    if g["kind"] == "linear":
        spec = LinearSpec(n_in, d_out)
    else:
        spec = MlpSpec(n_in, tuple(g["hidden_sizes"]), d_out,
                       Activation(g.get("activation", "tanh")))
    return spec, UniformScaled(g.get("init_scale", 1.0))


def resolve_preset(name: str, quick: bool) -> dict:
    doc = copy.deepcopy(PRESETS[name])
    if quick:
        doc["gen_iters"] = QUICK_ITERS
    return doc


# ---------------------------------------------------------------------------
# step-size constants for the two-regime schedule

def _subset(d: DiscreteDistribution, k: int) -> DiscreteDistribution:
    idx = np.unique(np.linspace(0, d.size - 1, min(k, d.size)).round().astype(int))
    return DiscreteDistribution(d.support[idx], d.weights[idx] / d.weights[idx].sum())


def estimate_thm42_constants(spec, theta0, codes, data, config: TrainConfig, seed: int,
                             draws: int = 16, radius: float = 0.1):
    """Delta from the initial loss, L from sampled constants around theta0,
    sigma from the spread of minibatch gradients at theta0.

    Constants are computed on evenly spaced subsets of both supports.
    """
    theta0 = np.asarray(theta0, dtype=float)
    Delta = max(objective_value(spec, theta0, codes, data, config), 1e-12)
    q, p = _subset(codes, ESTIMATE_ATOMS), _subset(data, ESTIMATE_ATOMS)
    const = analysis.estimate_constants(spec, analysis.ThetaBox(theta0, radius), q, p,
                                        config.cost_fn, config.reg, n_samples=8, seed=seed)
    rng = np.random.default_rng(seed)
    S = config.batch_size
    gs = []
    for _ in range(draws):
        X = codes.support[rng.choice(codes.size, S, p=codes.weights)]
        Y = data.support[rng.choice(data.size, S, p=data.weights)]
        if config.objective is Objective.REGOT:
            gs.append(estimate_gradient_regot(spec, theta0, X, Y, config).g)
        else:
            Xb = codes.support[rng.choice(codes.size, S, p=codes.weights)]
            Xh = codes.support[rng.choice(codes.size, S, p=codes.weights)]
            gs.append(estimate_gradient_sinkhorn(spec, theta0, X, Y, Xb, Xh, config).g)
    G = np.array(gs)
    sigma = float(np.sqrt(np.mean(((G - G.mean(axis=0)) ** 2).sum(axis=1))))
    return float(Delta), float(const.L_bound), sigma


# ---------------------------------------------------------------------------
# verbs

def _emit(obj, quiet=False):
    if not quiet:
        print(json.dumps(obj, indent=2, sort_keys=True, default=_default))


def _default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def cmd_dist(args) -> int:
    try:
        a = read_point_cloud(args.x)
        b = read_point_cloud(args.y)
    except (OSError, ValueError) as exc:
        raise UsageError(f"malformed input: {exc}") from None
    if a.dim != b.dim:
        raise UsageError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if args.gap <= 0 or args.max_iters < 1:
        raise UsageError("--gap must be positive and --max-iters at least 1")
    if args.lam <= 0:
        raise UsageError("--lambda must be positive")
    reg = Regularizer(args.reg, args.lam)
    stop = StopCriteria(gap=args.gap, max_iters=args.max_iters, check_every=1)
    method = Method(args.method) if args.method else None
    pairs = [(a, b)] if args.loss != "sinkhorn" else [(a, b), (a, a), (b, b)]
    reps = [reg_distance(x, y, args.cost, reg, stop=stop, method=method) for x, y in pairs]
    if args.loss == "regot":
        value = reps[0].dual_value
    elif args.loss == "debiased":
        value = reps[0].debiased_distance
    else:
        v = [r.debiased_distance for r in reps]
        value = 2.0 * v[0] - v[1] - v[2]
    converged = all(r.converged for r in reps)
    out = {
        "loss": args.loss,
        "value": value,
        "epsilon_certificate": max(r.epsilon_certificate for r in reps),
        "iterations": sum(r.iterations for r in reps),
        "termination_statistic": max(r.termination_statistic for r in reps),
        "converged": converged,
        "cost": CostFunction(args.cost).value,
        "reg": reg.kind.value,
        "lambda": reg.lam,
        "method": reps[0].method,
    }
    print(json.dumps(out, indent=2, sort_keys=True, default=_default))
    if not converged:
        log.error("solver did not reach --gap %g within --max-iters %d", args.gap, args.max_iters)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _load_train_doc(args) -> tuple[dict, str]:
    if args.config and args.preset:
        raise UsageError("give either a preset name or --config, not both")
    if args.preset:
        return resolve_preset(args.preset, args.quick), args.preset
    if not args.config:
        raise UsageError("train needs a preset name or --config")
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    if args.quick:
        doc["gen_iters"] = min(doc.get("gen_iters", QUICK_ITERS), QUICK_ITERS)
    return doc, Path(args.config).stem


def cmd_train(args) -> int:
    doc, stem = _load_train_doc(args)
    for item in args.override or ():
        apply_override(doc, item)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.optimizer == "sgd-thm42":
        doc["optimizer"] = {"kind": "sgd", "schedule": "thm42"}
    elif args.optimizer == "adam":
        doc.setdefault("optimizer", {"kind": "adam"})
    validate_config(doc)
    seed = int(doc.get("seed", 0))
    out_dir = Path(args.out or doc.get("output_dir") or Path("runs") / stem)

    data, centers, sigma = _build_data(doc, seed)
    codes = _build_codes(doc, seed)
    spec, scheme = _build_generator(doc, codes.dim, data.dim)
    params0 = init_params(spec, scheme, seed)
    thm42 = doc.get("optimizer", {}).get("schedule") == "thm42"
    if thm42 and any(doc.get(k) is None for k in ("delta_estimate", "L_estimate",
                                                  "sigma_estimate")):
        base = train_config_from_doc({**doc, "optimizer": {"kind": "adam"}})
        D, L, s = estimate_thm42_constants(spec, params0.theta, codes, data, base, seed)
        doc.setdefault("delta_estimate", D)
        doc.setdefault("L_estimate", L)
        doc.setdefault("sigma_estimate", s)
        for k in ("delta_estimate", "L_estimate", "sigma_estimate"):
            if doc[k] is None:
                doc[k] = {"delta_estimate": D, "L_estimate": L, "sigma_estimate": s}[k]
        log.info("two-regime step constants: Delta=%.4g L=%.4g sigma=%.4g", D, L, s)
    config = train_config_from_doc(doc)

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory: {exc}") from None
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    theta0_path = ckpt_dir / "params_000000.txt"
    save_params(theta0_path, spec, params0)

    ckpt_every = int(doc.get("ckpt_every", 1000))
    records, state = [], {"params": params0}

    def on_step(t, params, rec):
        records.append(rec)
        state["params"] = params
        if ckpt_every and (t + 1) % ckpt_every == 0:
            save_params(ckpt_dir / f"params_{t + 1:06d}.txt", spec, params)
        if not args.quiet and config.eval_every and (t + 1) % config.eval_every == 0:
            log.info("iter %d  loss %.4f  full %.4f  eps %.2e", t + 1, rec.loss_estimate,
                     rec.full_loss, rec.epsilon_used)

    interrupted = False
    try:
        train(spec, params0, codes, data, config, callback=on_step)
    except KeyboardInterrupt:
        interrupted = True
        log.warning("interrupted after %d iterations; flushing outputs", len(records))

    final = state["params"]
    write_trajectory(out_dir / "trajectory.csv", records)
    save_params(out_dir / "params_final.txt", spec, final)
    samples = forward(spec, final, codes.support)
    write_point_cloud(out_dir / "samples.csv", DiscreteDistribution.uniform(samples))
    summary = {
        "iterations": len(records),
        "interrupted": interrupted,
        "theta0_checkpoint": str(theta0_path.relative_to(out_dir)),
        "final_params": "params_final.txt",
        "n_samples": int(samples.shape[0]),
        "final_loss": objective_value(spec, final, codes, data, config),
        "config": doc,
    }
    if centers is not None:
        covered, spurious = mode_coverage(samples, centers, sigma)
        summary.update(modes=int(len(centers)), mode_coverage=int(covered),
                       spurious_fraction=float(spurious))
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=_default) + "\n")
    if not args.quiet:
        brief = {k: summary[k] for k in ("iterations", "modes", "mode_coverage",
                                         "spurious_fraction", "final_loss") if k in summary}
        print(json.dumps(brief, sort_keys=True))
    return EXIT_INTERRUPTED if interrupted else EXIT_OK


def run_probe(name: str, seed: int) -> analysis.ProbeReport:
    """Run one named probe on its default testbed."""
    if name in ("smoothness", "grad-scaling"):
        tb = analysis.LinearTestbed.default(seed)
        reg = Regularizer("kl", 0.5)
        if name == "smoothness":
            rep = analysis.plan_stability_probe(tb.spec, tb.q, tb.p, CostFunction.SQUARED_L2,
                                                reg, seed=seed, linspec=tb.linspec)
        else:
            rep = analysis.gradient_error_scaling_probe(tb.spec, tb.theta, tb.q, tb.p,
                                                        CostFunction.SQUARED_L2, reg, seed=seed)
    elif name == "sandwich":
        rep = analysis.sandwich_probe(seed=seed)
    elif name == "pseudo-distance":
        rep = analysis.pseudo_distance_probe(seed=seed)
    elif name == "sinkhorn-robustness":
        tb = analysis.ConvergenceTestbed.default(seed)
        rep = analysis.sinkhorn_robustness_probe(tb.spec, np.array([1.5]), tb.q, seed=seed)
    elif name == "large-lambda":
        rep = analysis.large_lambda_linear_probe(LinearGeneratorSpec(1, 1, 1.0, 1.0), seed=seed)
    elif name == "convergence-shape":
        rep = analysis.convergence_shape_probe(seed=seed)
    else:
        raise UsageError(f"unknown probe {name!r}")
    return replace(rep, name=name)


def cmd_probe(args) -> int:
    names = PROBE_NAMES if args.name == "all" else (args.name,)
    out_dir = Path(args.out or "probes")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory: {exc}") from None
    seed = 0 if args.seed is None else args.seed
    failed = 0
    for name in names:
        rep = run_probe(name, seed)
        analysis.write_report(rep, out_dir)
        failed += not rep.passed
        if not args.quiet:
            status = "PASS" if rep.passed else "FAIL"
            print(f"{status} {name}: {rep.violations}/{rep.trials} violations, "
                  f"worst margin {rep.worst_margin:.3g}")
    return EXIT_VIOLATION if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    if args.modes_per_side < 1 or args.n_per_mode < 1 or args.sigma < 0 or args.spacing < 0:
        raise UsageError("--modes-per-side and --n-per-mode must be positive; "
                         "--sigma and --spacing nonnegative")
    seed = 0 if args.seed is None else args.seed
    data = gaussian_grid(args.modes_per_side, args.spacing, args.sigma, args.n_per_mode, seed)
    out_dir = Path(args.out or ".")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_point_cloud(out_dir / "data.csv", data)
        write_mode_centers(out_dir / "mode_centers.json", data.metadata["mode_centers"],
                           args.sigma, args.spacing)
    except OSError as exc:
        raise UsageError(f"cannot write output: {exc}") from None
    if not args.quiet:
        print(json.dumps({"rows": data.size, "modes": args.modes_per_side ** 2,
                          "out": str(out_dir)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # the flags are accepted before and after the verb; only explicit values land
    # in the namespace, defaults are filled in by main()
    p = argparse.ArgumentParser(add_help=False)
    d = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=d, help="random seed")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--threads", type=int, default=d, help="cap BLAS threads")
    p.add_argument("--quiet", action="store_true", default=d, help="suppress progress output")
    return p


def build_parser() -> argparse.ArgumentParser:
    glob = _global_flags(True)
    parser = argparse.ArgumentParser(prog="regot", parents=[glob],
                                     description="Regularized optimal transport toolkit.")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="{dist,train,probe,gen-data}")

    d = sub.add_parser("dist", parents=[glob], help="distance between two point clouds")
    d.add_argument("x", help="point-cloud CSV on the rows")
    d.add_argument("y", help="point-cloud CSV on the columns")
    d.add_argument("--cost", choices=[c.value for c in CostFunction], default="l1")
    d.add_argument("--reg", choices=["kl", "l2"], default="kl")
    d.add_argument("--lambda", dest="lam", type=float, default=1.0)
    d.add_argument("--loss", choices=["regot", "debiased", "sinkhorn"], default="regot")
    d.add_argument("--gap", type=float, default=1e-9)
    d.add_argument("--max-iters", type=int, default=1000)
    d.add_argument("--method", choices=[m.value for m in Method], default=None)
    d.set_defaults(func=cmd_dist)

    t = sub.add_parser("train", parents=[glob], help="train a generator")
    t.add_argument("preset", nargs="?", choices=sorted(PRESETS), help="built-in experiment")
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted config key and JSON value; repeatable")
    t.add_argument("--quick", action="store_true", help=f"cap gen_iters at {QUICK_ITERS}")
    t.add_argument("--optimizer", choices=["adam", "sgd-thm42"], default=None)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", parents=[glob], help="run numerical probes")
    pr.add_argument("--name", required=True, choices=[*PROBE_NAMES, "all"])
    pr.set_defaults(func=cmd_probe)

    g = sub.add_parser("gen-data", parents=[glob], help="write a Gaussian-grid data set")
    g.add_argument("--modes-per-side", type=int, default=5)
    g.add_argument("--spacing", type=float, default=2.0)
    g.add_argument("--sigma", type=float, default=0.2)
    g.add_argument("--n-per-mode", type=int, default=100)
    g.set_defaults(func=cmd_gen_data)
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl is not installed; --threads ignored")
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for k, v in (("seed", None), ("out", None), ("threads", None), ("quiet", False)):
        if not hasattr(args, k):
            setattr(args, k, v)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"regot {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
