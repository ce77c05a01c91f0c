"""Command-line front end: JSON run configs, simulation, certification, export.

Subcommands:

* ``run``     simulate one config, write CSV/JSON/SVG/report outputs
* ``verify``  run the certification suite over every builtin problem
* ``compare`` run two configs on a shared grid and print their sup gap

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import certify, engine, problems, variants
from .engine import IntegratorConfig, IntegrationError, NoiseModel, SolverState
from .filters import FilterSpec

__all__ = ["ConfigError", "RunConfig", "parse_config", "run", "main"]


class ConfigError(ValueError):
    """Invalid run configuration; the message carries a JSON-pointer path."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


CASES = ("case1", "case2", "case3", "aug-lagrangian", "richert-cortes")

_TOP_KEYS = {"problem", "filters", "integrator", "noise", "initial", "outputs"}
_PROBLEM_KEYS = {"builtin", "theta", "Q", "Phi", "phi", "A", "b"}
_FILTER_KEYS = {"case", "direct", "m", "h", "g"}
_SPEC_KEYS = {"poles", "residues", "feedthrough"}
_INTEGRATOR_KEYS = {"method", "step", "horizon", "record_every"}
_NOISE_KEYS = {"sigma", "cutoff", "seed"}
_INITIAL_KEYS = {"xi", "zeta", "rho"}
_OUTPUT_KEYS = {"csv", "json", "svg", "svg_signals", "report", "report_tol"}


@dataclass
class RunConfig:
    problem: problems.ConvexProblem
    problem_name: Optional[str]
    direct_variant: Optional[str]
    m_specs: list
    h_specs: list
    g_specs: list
    integrator: IntegratorConfig
    noise: Optional[NoiseModel]
    initial: Optional[dict]
    outputs: dict


def _require_keys(obj: dict, allowed: set, pointer: str):
    if not isinstance(obj, dict):
        raise ConfigError(pointer, f"expected an object, got {type(obj).__name__}")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(pointer, f"unknown key(s): {', '.join(sorted(unknown))}")


def _number(obj, pointer, positive=False, nonneg=False) -> float:
    if not isinstance(obj, (int, float)) or isinstance(obj, bool):
        raise ConfigError(pointer, "expected a number")
    val = float(obj)
    if positive and val <= 0:
        raise ConfigError(pointer, "must be positive")
    if nonneg and val < 0:
        raise ConfigError(pointer, "must be nonnegative")
    return val


def _vector(obj, pointer) -> np.ndarray:
    if not isinstance(obj, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in obj):
        raise ConfigError(pointer, "expected an array of numbers")
    return np.asarray(obj, dtype=float)


def _matrix(obj, pointer) -> np.ndarray:
    if not isinstance(obj, list) or not all(isinstance(row, list) for row in obj):
        raise ConfigError(pointer, "expected an array of arrays")
    widths = {len(row) for row in obj}
    if len(widths) > 1:
        raise ConfigError(pointer, "rows have inconsistent lengths")
    return np.asarray(obj, dtype=float) if obj else np.zeros((0, 0))


def _parse_problem(obj, pointer):
    _require_keys(obj, _PROBLEM_KEYS, pointer)
    if "builtin" in obj:
        if len(obj) != 1:
            raise ConfigError(pointer, "builtin problems take no extra keys")
        name = obj["builtin"]
        if name not in problems.BUILTIN_NAMES:
            raise ConfigError(
                pointer + "/builtin", f"unknown builtin {name!r}; choose from {problems.BUILTIN_NAMES}"
            )
        return problems.builtin_problem(name), name
    if "theta" not in obj:
        raise ConfigError(pointer, "problem required: give 'builtin' or inline data with 'theta'")
    theta = _vector(obj["theta"], pointer + "/theta")
    kwargs = {}
    for key, parser in (("Q", _matrix), ("Phi", _matrix), ("A", _matrix)):
        if key in obj:
            kwargs[key] = parser(obj[key], f"{pointer}/{key}")
    for key in ("phi", "b"):
        if key in obj:
            kwargs[key] = _vector(obj[key], f"{pointer}/{key}")
    try:
        return problems.make_quadratic(theta, **kwargs), None
    except (ValueError, problems.DimensionMismatch) as exc:
        raise ConfigError(pointer, str(exc)) from exc


def _parse_spec(obj, pointer, kind) -> FilterSpec:
    _require_keys(obj, _SPEC_KEYS, pointer)
    for key in ("poles", "residues"):
        if key not in obj:
            raise ConfigError(pointer, f"missing key {key!r}")
    spec = FilterSpec(
        poles=tuple(_vector(obj["poles"], pointer + "/poles")),
        residues=tuple(_vector(obj["residues"], pointer + "/residues")),
        feedthrough=_number(obj.get("feedthrough", 0.0), pointer + "/feedthrough", nonneg=True),
        kind=kind,
    )
    from .filters import validate

    violations = validate(spec)
    if violations:
        raise ConfigError(pointer, "; ".join(violations))
    return spec


def _case_sections(case: str, problem, pointer):
    n, r, m = problem.n, problem.r, problem.m
    integ = FilterSpec.integrator
    if case == "case1":
        ms = [FilterSpec.pi("primal")] * n
        gs = [integ("dual_ineq")] * m
    elif case in ("case2", "case3"):
        ms = [FilterSpec(poles=(0.0, 25.0), residues=(1.0, 19.0), kind="primal")] * n
        if case == "case2":
            gs = [integ("dual_ineq")] * m
        else:
            gs = [FilterSpec(poles=(0.0, 0.05), residues=(1.0, 4.0), kind="dual_ineq")] * m
    elif case == "aug-lagrangian":
        ms, hs, gs = variants.as_generalized("aug_lagrangian", problem)
        return list(ms), list(hs), list(gs)
    elif case == "richert-cortes":
        if r != 0:
            raise ConfigError(pointer, "richert-cortes requires a problem without equality constraints")
        ms, hs, gs = variants.as_generalized("lp_richert_cortes", problem)
        return list(ms), list(hs), list(gs)
    else:
        raise ConfigError(pointer, f"unknown case {case!r}; choose from {CASES}")
    hs = [integ("dual_eq")] * r
    return ms, hs, gs


def _parse_filters(obj, problem, pointer):
    _require_keys(obj, _FILTER_KEYS, pointer)
    if "direct" in obj:
        if len(obj) != 1:
            raise ConfigError(pointer, "'direct' takes no other filter keys")
        name = obj["direct"]
        mapping = {"aug-lagrangian": "aug_lagrangian", "richert-cortes": "lp_richert_cortes"}
        if name not in mapping:
            raise ConfigError(pointer + "/direct", f"unknown direct variant {name!r}")
        variant = mapping[name]
        try:
            ms, hs, gs = variants.as_generalized(variant, problem)
        except problems.DimensionMismatch as exc:
            raise ConfigError(pointer + "/direct", str(exc)) from exc
        return variant, list(ms), list(hs), list(gs)
    if "case" in obj:
        if len(obj) != 1:
            raise ConfigError(pointer, "'case' takes no other filter keys")
        ms, hs, gs = _case_sections(obj["case"], problem, pointer + "/case")
        return None, ms, hs, gs
    specs = {}
    for key, kind, count in (("m", "primal", problem.n), ("h", "dual_eq", problem.r), ("g", "dual_ineq", problem.m)):
        entries = obj.get(key, [])
        if not isinstance(entries, list):
            raise ConfigError(f"{pointer}/{key}", "expected an array of filter sections")
        parsed = [_parse_spec(e, f"{pointer}/{key}/{i}", kind) for i, e in enumerate(entries)]
        if len(parsed) != count:
            raise ConfigError(f"{pointer}/{key}", f"{len(parsed)} section(s) for a dimension of {count}")
        specs[key] = parsed
    return None, specs["m"], specs["h"], specs["g"]


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON run configuration.

    Defaults: rk4, step 1e-3, horizon 100, record_every 10.  Unknown keys
    are rejected; error messages carry JSON-pointer paths.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"not valid JSON: {exc}") from exc
    _require_keys(doc, _TOP_KEYS, "")
    if "problem" not in doc:
        raise ConfigError("", "problem required")
    if "filters" not in doc:
        raise ConfigError("", "filters required")

    problem, name = _parse_problem(doc["problem"], "/problem")
    variant, ms, hs, gs = _parse_filters(doc["filters"], problem, "/filters")

    integ = doc.get("integrator", {})
    _require_keys(integ, _INTEGRATOR_KEYS, "/integrator")
    method = integ.get("method", "rk4")
    if method not in ("euler", "rk4"):
        raise ConfigError("/integrator/method", f"unknown method {method!r}")
    record_every = integ.get("record_every", 10)
    if isinstance(record_every, bool) or not isinstance(record_every, int) or record_every < 1:
        raise ConfigError("/integrator/record_every", "expected a positive integer")
    config = IntegratorConfig(
        method=method,
        step=_number(integ.get("step", 1e-3), "/integrator/step", positive=True),
        horizon=_number(integ.get("horizon", 100.0), "/integrator/horizon", positive=True),
        record_every=record_every,
    )

    noise = None
    if "noise" in doc:
        nobj = doc["noise"]
        _require_keys(nobj, _NOISE_KEYS, "/noise")
        for key in _NOISE_KEYS:
            if key not in nobj:
                raise ConfigError("/noise", f"missing key {key!r}")
        seed = nobj["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("/noise/seed", "expected an integer")
        noise = NoiseModel(
            sigma=_number(nobj["sigma"], "/noise/sigma", nonneg=True),
            cutoff=_number(nobj["cutoff"], "/noise/cutoff", positive=True),
            seed=seed,
        )

    initial = None
    if "initial" in doc:
        iobj = doc["initial"]
        _require_keys(iobj, _INITIAL_KEYS, "/initial")
        initial = {key: _vector(iobj[key], f"/initial/{key}") for key in iobj}

    outputs = doc.get("outputs", {})
    _require_keys(outputs, _OUTPUT_KEYS, "/outputs")
    if "svg_signals" in outputs and (
        not isinstance(outputs["svg_signals"], list)
        or not all(isinstance(s, str) for s in outputs["svg_signals"])
    ):
        raise ConfigError("/outputs/svg_signals", "expected an array of column names")
    if "report_tol" in outputs:
        _number(outputs["report_tol"], "/outputs/report_tol", positive=True)

    return RunConfig(
        problem=problem,
        problem_name=name,
        direct_variant=variant,
        m_specs=ms,
        h_specs=hs,
        g_specs=gs,
        integrator=config,
        noise=noise,
        initial=initial,
        outputs=dict(outputs),
    )


# ---------------------------------------------------------------------------
# execution

def _initial_state(system, config: RunConfig) -> SolverState:
    state = system.zero_state()
    if not config.initial:
        return state
    blocks = {"xi": system.nbar, "zeta": system.rbar, "rho": system.mbar}
    values = {}
    for key, dim in blocks.items():
        vec = config.initial.get(key)
        if vec is None:
            values[key] = np.zeros(dim)
        elif vec.shape != (dim,):
            raise ConfigError(f"/initial/{key}", f"length {vec.shape[0]}, expected {dim}")
        else:
            values[key] = vec
    return SolverState(values["xi"], values["zeta"], values["rho"])


def _simulate(config: RunConfig, seed_override=None):
    noise = config.noise
    if seed_override is not None and noise is not None:
        noise = NoiseModel(sigma=noise.sigma, cutoff=noise.cutoff, seed=seed_override)
    if config.direct_variant is not None:
        dim = variants.direct_state_dim(config.direct_variant, config.problem)
        init = np.zeros(dim)
        if config.initial:
            raise ConfigError("/initial", "state overrides are not supported for direct variants")
        if noise is not None:
            raise ConfigError("/noise", "noise injection is not supported for direct variants")
        return variants.integrate_direct(config.direct_variant, config.problem, init, config.integrator), None
    system = engine.assemble(config.problem, config.m_specs, config.h_specs, config.g_specs)
    trajectory = engine.integrate(system, _initial_state(system, config), config.integrator, noise)
    return trajectory, system


def _write_report(trajectory, system, config: RunConfig, path):
    tol = float(config.outputs.get("report_tol", 1e-2))
    report = {
        "convergence": certify.convergence_report(trajectory, config.problem, tol).as_dict(),
        "report_tol": tol,
        "meta": trajectory.meta,
    }
    if system is not None and config.problem_name is not None:
        ref = certify.ReferencePoint(config.problem, problems.builtin_reference(config.problem_name))
        certify.attach_storage(trajectory, system, ref)
        report["lyapunov_max_increase"] = certify.lyapunov_monotone(trajectory)
        report["passivity_audit"] = certify.passivity_audit(trajectory, ref).as_dict()
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return report


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_svg(trajectory, path, signals=None, width=640, height=400):
    """Render selected columns as a self-contained SVG line plot."""
    columns = getattr(trajectory, "columns", None)
    if columns is None:  # direct trajectories: synthesize x columns
        columns = ["t"] + [f"x_{i + 1}" for i in range(trajectory.x.shape[1])]
        data = np.column_stack([trajectory.times, trajectory.x])
    else:
        data = trajectory.row_matrix()
    if signals is None:
        signals = [c for c in columns if c.startswith("x_")]
    missing = [s for s in signals if s not in columns]
    if missing:
        raise ValueError(f"unknown signal column(s): {', '.join(missing)}")

    t = data[:, 0]
    series = {s: data[:, columns.index(s)] for s in signals}
    all_vals = np.concatenate([v for v in series.values()]) if series else np.zeros(1)
    y_lo, y_hi = float(all_vals.min()), float(all_vals.max())
    if y_hi - y_lo < 1e-12:
        y_hi = y_lo + 1.0
    t_lo, t_hi = float(t[0]), float(t[-1])
    if t_hi - t_lo < 1e-12:
        t_hi = t_lo + 1.0
    margin = 50.0
    sx = (width - 2 * margin) / (t_hi - t_lo)
    sy = (height - 2 * margin) / (y_hi - y_lo)

    def px(tv):
        return margin + (tv - t_lo) * sx

    def py(yv):
        return height - margin - (yv - y_lo) * sy

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 20}" font-size="11">t = {t_lo:g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 20}" font-size="11" '
        f'text-anchor="end">t = {t_hi:g}</text>',
        f'<text x="{margin - 6}" y="{height - margin}" font-size="11" '
        f'text-anchor="end">{y_lo:.4g}</text>',
        f'<text x="{margin - 6}" y="{margin + 4}" font-size="11" text-anchor="end">{y_hi:.4g}</text>',
    ]
    for idx, (name, values) in enumerate(series.items()):
        color = _SVG_COLORS[idx % len(_SVG_COLORS)]
        pts = " ".join(f"{px(tv):.2f},{py(yv):.2f}" for tv, yv in zip(t, values))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * idx + 10}" font-size="11" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def run(config: RunConfig, out_dir=None, seed_override=None, quiet=False) -> int:
    """Execute a parsed config and write its outputs.  Returns the exit code."""
    import os

    def resolve(path):
        return os.path.join(out_dir, path) if out_dir and not os.path.isabs(path) else path

    try:
        trajectory, system = _simulate(config, seed_override)
    except IntegrationError as exc:
        print(f"pdflow: numerical failure: {exc} (reason: {exc.reason})", file=sys.stderr)
        return 3
    except engine.LoopDivergence as exc:
        print(f"pdflow: numerical failure: {exc}", file=sys.stderr)
        return 3

    outputs = config.outputs
    try:
        if "csv" in outputs:
            if config.direct_variant is not None:
                raise ConfigError("/outputs/csv", "CSV export requires the filter engine form")
            engine.trajectory_to_csv(trajectory, resolve(outputs["csv"]))
        if "json" in outputs:
            if config.direct_variant is not None:
                raise ConfigError("/outputs/json", "JSON export requires the filter engine form")
            engine.trajectory_to_json(trajectory, resolve(outputs["json"]))
        if "svg" in outputs:
            write_svg(trajectory, resolve(outputs["svg"]), outputs.get("svg_signals"))
        report = None
        if "report" in outputs:
            report = _write_report(trajectory, system, config, resolve(outputs["report"]))
    except OSError as exc:
        print(f"pdflow: I/O failure: {exc}", file=sys.stderr)
        return 3

    if not quiet:
        final_x = trajectory.x[-1]
        line = f"pdflow: done, t = {trajectory.times[-1]:g}, x = {np.array2string(final_x, precision=6)}"
        if report is not None:
            line += f", converged = {report['convergence']['converged']}"
        print(line)
    return 0


# ---------------------------------------------------------------------------
# verify and compare

_VERIFY_SETUPS = {
    "toy": "aug-lagrangian",
    "lp_example": "case2",
    "lp_strict": "aug-lagrangian",
    "distributed_demo": "aug-lagrangian",
}


def _verify_one(name: str, step: float, horizon: float, lines: list) -> bool:
    problem = problems.builtin_problem(name)
    ref = certify.ReferencePoint(problem, problems.builtin_reference(name))
    ok = True

    def check(label, passed, detail=""):
        nonlocal ok
        ok = ok and passed
        lines.append(f"{'ok  ' if passed else 'FAIL'} {name:17s} {label:24s} {detail}")

    worst = problems.monotone_gradient_check(
        problem, 50, (np.full(problem.n, -3.0), np.full(problem.n, 3.0)), seed=7
    )
    check("monotone gradients", worst >= -1e-9, f"worst={worst:.2e}")

    ms, hs, gs = _case_sections(_VERIFY_SETUPS[name], problem, "")
    system = engine.assemble(problem, ms, hs, gs)
    config = IntegratorConfig(method="rk4", step=step, horizon=horizon, record_every=1)
    trajectory = engine.integrate(system, system.zero_state(), config)
    certify.attach_storage(trajectory, system, ref)

    conv = certify.convergence_report(trajectory, problem, tol=1e-2)
    check("convergence", conv.converged, f"settle={conv.settle_time}")

    vmax = certify.lyapunov_monotone(trajectory)
    bound = 10.0 * step * (1.0 + float(trajectory.storage.V.max()))
    check("lyapunov decay", vmax <= bound, f"max_increase={vmax:.2e} bound={bound:.2e}")

    audit = certify.passivity_audit(trajectory, ref)
    check(
        "passivity margins",
        audit.ok,
        f"worst={max(audit.primal, audit.dual_eq, audit.dual_ineq):.2e} tol={audit.tol:.1e}",
    )

    rho_min = float(trajectory.rho.min()) if trajectory.rho.size else 0.0
    check("orthant invariance", rho_min >= 0.0, f"min rho={rho_min:.2e}")
    return ok


def _cmd_verify(args) -> int:
    lines = []
    all_ok = True
    for name in problems.BUILTIN_NAMES:
        all_ok = _verify_one(name, args.step, args.horizon, lines) and all_ok
    print("\n".join(lines))
    print("verify:", "all checks passed" if all_ok else "FAILURES detected")
    return 0 if all_ok else 3


def _load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _cmd_compare(args) -> int:
    config_a = _load_config(args.config_a)
    config_b = _load_config(args.config_b)
    try:
        traj_a, _ = _simulate(config_a, args.seed)
        traj_b, _ = _simulate(config_b, args.seed)
    except IntegrationError as exc:
        print(f"pdflow: numerical failure: {exc}", file=sys.stderr)
        return 3
    signals = args.signals.split(",") if args.signals else ["x", "mu", "lambda"]
    try:
        gap = variants.trajectory_divergence(traj_a, traj_b, signals)
    except ValueError as exc:
        raise ConfigError("", str(exc)) from exc
    print(f"sup gap over {{{','.join(signals)}}}: {gap:.6e}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pdflow",
        description="Simulate and certify generalized primal-dual dynamics for convex programs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one JSON config")
    p_run.add_argument("config_pos", nargs="?", metavar="CONFIG", help="path to the JSON config")
    p_run.add_argument("--config", dest="config_flag", help="path to the JSON config")
    p_run.add_argument("--out-dir", default=None, help="directory for relative output paths")
    p_run.add_argument("--seed", type=int, default=None, help="override the noise seed")
    p_run.add_argument("--quiet", action="store_true", help="suppress the summary line")

    p_verify = sub.add_parser("verify", help="run the certification suite on builtin problems")
    p_verify.add_argument("--step", type=float, default=1e-3)
    p_verify.add_argument("--horizon", type=float, default=100.0)

    p_cmp = sub.add_parser("compare", help="run two configs and print their trajectory gap")
    p_cmp.add_argument("config_a")
    p_cmp.add_argument("config_b")
    p_cmp.add_argument("--signals", default=None, help="comma-separated subset of x,mu,lambda")
    p_cmp.add_argument("--seed", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            path = args.config_pos or args.config_flag
            if not path:
                print("pdflow: config error: no config path given", file=sys.stderr)
                return 2
            config = _load_config(path)
            return run(config, out_dir=args.out_dir, seed_override=args.seed, quiet=args.quiet)
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "compare":
            return _cmd_compare(args)
    except ConfigError as exc:
        print(f"pdflow: config error: {exc}", file=sys.stderr)
        return 2
    except (problems.DimensionMismatch, ValueError) as exc:
        print(f"pdflow: config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
