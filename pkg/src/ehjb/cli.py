"""Command-line orchestration.

Subcommands: ``check`` runs the hypothesis checks, ``solve`` the full
truncate / vanishing-discount / verify pipeline, ``control`` the ergodic
control consistency suite, ``forward`` the factor-driver pipeline and
``simulate`` plain path simulation.  Every run writes a ``manifest.json``
(config hash, seed, overrides, versions); identical manifests reproduce
artifacts byte for byte.

Exit codes: 0 pass, 1 hypothesis or verification failure, 2 usage or
parse error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, load_problem
from .conditions import assemble_condition_report, check_forward_condition, compute_M
from .drivers import (
    HamiltonianDriver,
    build_control_driver,
    build_forward_driver,
    build_risk_sensitive_driver,
    forward_driver_x_gradient,
)
from .model import finite_diff_gradient
from .simulate import (
    FeedbackControl,
    check_exponential_ergodicity,
    ergodic_cost_mc,
    ergodic_lambda_check,
    risk_sensitive_cost_mc,
    simulate_paths,
    weak_strong_compare,
)
from .solver import SolveError, SolverOptions, gradient_bound_check, truncate_driver, vanishing_discount


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_manifest(outdir, args, extra=None):
    with open(args.config, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "command": args.command,
        "config_sha256": digest,
        "seed": args.seed,
        "overrides": {
            "spacing": args.spacing,
            "rho0": args.rho0,
            "min_rho": args.min_rho,
            "tol": args.tol,
            "cap": args.cap,
            "force": args.force,
        },
        "versions": {
            "ehjb": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    _write_json(os.path.join(outdir, "manifest.json"), manifest)


def _solver_options(args, cap_mode="auto", cap_value=None):
    kwargs = {"cap_mode": cap_mode, "cap_value": cap_value}
    if args.spacing is not None:
        kwargs["spacing"] = args.spacing
    if args.rho0 is not None:
        kwargs["rho0"] = args.rho0
    if args.min_rho is not None:
        kwargs["min_rho"] = args.min_rho
    if args.tol is not None:
        kwargs["fixed_point_tol"] = args.tol
    return SolverOptions(**kwargs)


def _resolve_cap(args, caps, delta_hat):
    """Truncation radius per the --cap flag: auto (M / delta), off, or a value."""
    if args.cap == "off":
        return None, "off"
    if args.cap == "auto":
        cap = max(caps.M / delta_hat, 1.0) if delta_hat > 0 else 1.0
        return cap, "auto"
    try:
        val = float(args.cap)
    except ValueError:
        raise ConfigError(f"--cap must be auto, off, or a number; got {args.cap!r}")
    if val <= 0:
        raise ConfigError("--cap value must be positive")
    return val, "manual"


def _grid_csv(path, gf):
    """Node coordinates and values, one node per row, deterministic formatting."""
    grid_axis = gf.axis
    d = gf.box.dim
    with open(path, "w") as fh:
        if gf.kind == "scalar":
            header = ",".join([f"x{i + 1}" for i in range(d)] + ["u"])
        else:
            header = ",".join([f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)])
        fh.write(header + "\n")
        if d == 1:
            for i, x in enumerate(grid_axis):
                row = gf.values[i] if gf.kind == "scalar" else gf.values[i]
                vals = [row] if gf.kind == "scalar" else list(row)
                fh.write(",".join(f"{t:.17g}" for t in [x] + vals) + "\n")
        else:
            for i, x in enumerate(grid_axis):
                for j, y in enumerate(grid_axis):
                    vals = [gf.values[i, j]] if gf.kind == "scalar" else list(gf.values[i, j])
                    fh.write(",".join(f"{t:.17g}" for t in [x, y] + vals) + "\n")


def run_check(args):
    problem = load_problem(args.config)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args)
    report = assemble_condition_report(problem.spec, seed=args.seed)
    _write_json(os.path.join(args.out, "check_report.json"), report.to_dict())
    print(f"dissipativity: delta_hat = {report.delta_hat:.6g} ({'ok' if report.delta_hat > 0 else 'FAIL'})")
    print(f"gradient caps: M = {report.M:.6g}, M_prime = {report.M_prime:.6g}")
    print(f"monotone dx_g: {'ok' if report.monotone_dxg.holds else 'FAIL'} (worst {report.monotone_dxg.worst:.3g})")
    print(f"overall: {'ok' if report.overall else 'FAIL'}")
    return 0 if report.overall else 1


def run_solve(args):
    problem = load_problem(args.config)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args)
    spec = problem.spec
    report_cond = assemble_condition_report(spec, seed=args.seed)
    _write_json(os.path.join(args.out, "check_report.json"), report_cond.to_dict())
    if not report_cond.overall and not args.force:
        print("hypothesis checks failed; rerun with --force to solve anyway", file=sys.stderr)
        return 1
    delta_hat = spec.delta if spec.delta is not None else report_cond.delta_hat
    caps = compute_M(spec.driver, spec.box, seed=args.seed)
    cap, cap_mode = _resolve_cap(args, caps, delta_hat)
    opts = _solver_options(args, cap_mode=cap_mode, cap_value=cap)
    tdriver = truncate_driver(spec.driver, cap)
    try:
        report = vanishing_discount(spec, tdriver, opts)
    except SolveError as err:
        print(f"solver failed: {err}", file=sys.stderr)
        return 1
    from .solver import gradient_system_residual

    report.gradient_system_residual = gradient_system_residual(spec, spec.driver, report)
    report.gradient_bound = gradient_bound_check(report, caps.M, delta_hat)
    _grid_csv(os.path.join(args.out, "u.csv"), report.u)
    _grid_csv(os.path.join(args.out, "v.csv"), report.v)
    payload = report.to_dict()
    payload["cap"] = cap
    payload["cap_mode"] = cap_mode
    payload["M"] = caps.M
    payload["delta_hat"] = delta_hat
    _write_json(os.path.join(args.out, "report.json"), payload)
    ok = report.gradient_bound.verdict and report.pde_residual <= args.residual_tol
    print(f"lambda = {report.lam:.8g}")
    print(f"pde residual = {report.pde_residual:.3e} (tol {args.residual_tol:g})")
    print(
        f"gradient bound: sup|v| = {report.gradient_bound.sup_v:.4g} vs "
        f"{report.gradient_bound.bound:.4g} -> {'ok' if report.gradient_bound.verdict else 'FAIL'}"
    )
    return 0 if ok else 1


def _control_setup(args, problem):
    spec = problem.spec
    cost = problem.cost
    if cost is None:
        raise ConfigError("the control pipeline needs a [cost] section")
    driver = build_control_driver(cost)
    from .model import ProblemSpec

    return ProblemSpec(b=spec.b, driver=driver, box=spec.box, delta=spec.delta, x0=spec.x0), cost


def _solve_and_feedback(args, spec, cost, driver):
    """Solve for (u, v, lambda) and assemble the optimal feedback a_hat(x, v(x))."""
    dis_delta = spec.delta
    if dis_delta is None:
        from .conditions import check_dissipativity

        dis_delta = check_dissipativity(spec.b, spec.box, seed=args.seed).delta_hat
    caps = compute_M(driver, spec.box, n_samples=1024, seed=args.seed)
    cap, cap_mode = _resolve_cap(args, caps, dis_delta)
    opts = _solver_options(args, cap_mode=cap_mode, cap_value=cap)
    report = vanishing_discount(spec, truncate_driver(driver, cap), opts)
    ham = HamiltonianDriver(cost=cost)

    def alpha_map(x):
        v = report.v.interpolate(x)
        return ham.a_hat(x, v)

    grid_v = report.v.values.reshape(-1, spec.dim)
    grid_x = _grid_points(report.v)
    a_grid = ham.a_hat(grid_x, grid_v)
    sup_a = float(np.max(np.linalg.norm(a_grid, axis=-1)))
    feedback = FeedbackControl(fn=alpha_map, bound=sup_a * (1.0 + 1e-6) + 1e-9)
    return report, feedback, sup_a, caps, dis_delta


def _grid_points(gf):
    axis = gf.axis
    if gf.box.dim == 1:
        return axis[:, None]
    mesh = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def run_control(args):
    problem = load_problem(args.config)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args)
    spec, cost = _control_setup(args, problem)
    report, feedback, sup_a, caps, delta_hat = _solve_and_feedback(args, spec, cost, spec.driver)

    T, dt, n_paths = args.horizon, args.dt, args.n_paths
    j_star = ergodic_cost_mc(cost, spec.b, feedback, spec.x0, T, dt, n_paths, args.seed)
    rows = [("lambda", report.lam, 0.0), ("J(alpha*)", j_star.value, j_star.std_error)]
    gap = abs(j_star.value - report.lam)
    ok = gap <= max(5e-2, 3.0 * j_star.std_error)

    perturbations = [
        ("alpha* + 0.3 sin", lambda x: feedback.fn(x) + 0.3 * np.sin(x)),
        ("alpha* - 0.3 cos", lambda x: feedback.fn(x) - 0.3 * np.cos(x)),
        ("0.5 alpha*", lambda x: 0.5 * feedback.fn(x)),
    ]
    for name, fn in perturbations:
        pert = FeedbackControl(fn=fn, bound=feedback.bound + 0.3)
        est = ergodic_cost_mc(cost, spec.b, pert, spec.x0, T, dt, n_paths, args.seed + 1)
        rows.append((name, est.value, est.std_error))
        joint = np.hypot(est.std_error, j_star.std_error)
        ok = ok and est.value >= j_star.value - 2.0 * joint

    ws = weak_strong_compare(cost, spec.b, feedback, spec.x0, min(T, 5.0), dt, n_paths, args.seed + 2)
    ok = ok and ws.diff <= 3.0 * ws.joint_std_error + 1e-12

    rs_row = None
    if problem.delta_rs:
        rs_driver = build_risk_sensitive_driver(cost, problem.delta_rs)
        from .model import ProblemSpec

        rs_spec = ProblemSpec(b=spec.b, driver=rs_driver, box=spec.box, delta=spec.delta, x0=spec.x0)
        rs_report, rs_feedback, _, _, _ = _solve_and_feedback(args, rs_spec, cost, rs_driver)
        j_rs = risk_sensitive_cost_mc(
            cost, problem.delta_rs, spec.b, rs_feedback, spec.x0, T / 4, dt, 4 * n_paths, args.seed + 3
        )
        rs_row = ("J_rs(alpha*)", j_rs.value, j_rs.std_error, rs_report.lam)
        ok = ok and abs(j_rs.value - rs_report.lam) <= max(1e-1, 3.0 * j_rs.std_error)

    print(f"{'quantity':<18}{'value':>12}{'std err':>12}")
    for name, value, se in rows:
        print(f"{name:<18}{value:>12.6f}{se:>12.6f}")
    print(f"weak/strong diff = {ws.diff:.3e} (joint SE {ws.joint_std_error:.3e}, ESS {ws.ess:.0f})")
    if rs_row:
        print(f"{rs_row[0]:<18}{rs_row[1]:>12.6f}{rs_row[2]:>12.6f}  lambda_rs {rs_row[3]:.6f}")
    print(f"sup |alpha*| on grid = {sup_a:.4g}")

    payload = {
        "lambda": report.lam,
        "costs": [{"name": n, "value": v, "std_error": s} for n, v, s in rows],
        "weak_strong": ws.to_dict(),
        "sup_alpha": sup_a,
        "risk_sensitive": None
        if rs_row is None
        else {"value": rs_row[1], "std_error": rs_row[2], "lambda_rs": rs_row[3]},
    }
    _write_json(os.path.join(args.out, "costs.json"), payload)
    return 0 if ok else 1


def run_forward(args):
    problem = load_problem(args.config)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args)
    if problem.forward is None:
        raise ConfigError("the forward pipeline needs a [forward] section")
    fwd = problem.forward
    spec = problem.spec
    cond = check_forward_condition(
        fwd.theta, fwd.pi, fwd.delta_cap, spec.box, z_radius=2.0, seed=args.seed
    )
    payload = {"condition": cond.to_dict()}
    if not cond.holds and not args.force:
        _write_json(os.path.join(args.out, "forward_report.json"), payload)
        print(f"monotonicity condition fails (worst {cond.worst:.3e}); solve skipped", file=sys.stderr)
        return 1

    driver = build_forward_driver(fwd.theta, fwd.pi, fwd.delta_cap)
    from .model import ProblemSpec

    fspec = ProblemSpec(b=spec.b, driver=driver, box=spec.box, delta=spec.delta, x0=spec.x0)
    delta_hat = spec.delta
    if delta_hat is None:
        from .conditions import check_dissipativity

        delta_hat = check_dissipativity(spec.b, spec.box, seed=args.seed).delta_hat
    caps = compute_M(driver, spec.box, n_samples=1024, seed=args.seed)
    cap, cap_mode = _resolve_cap(args, caps, delta_hat)
    opts = _solver_options(args, cap_mode=cap_mode, cap_value=cap)
    report = vanishing_discount(fspec, truncate_driver(driver, cap), opts)

    fd_err = forward_gradient_fd_error(fwd, spec.box, n_probes=200, seed=args.seed)
    payload.update(
        {
            "lambda": report.lam,
            "pde_residual": report.pde_residual,
            "x_gradient_fd_relative_error": fd_err,
        }
    )
    _write_json(os.path.join(args.out, "forward_report.json"), payload)
    print(f"condition: {'ok' if cond.holds else 'FAIL (forced)'}")
    print(f"lambda = {report.lam:.8g}")
    print(f"x-gradient formula vs finite differences: rel err {fd_err:.3e}")
    return 0 if fd_err <= 1e-5 else 1


def forward_gradient_fd_error(fwd, box, n_probes=200, seed=0, kink_margin=1e-2):
    """Worst relative error of the closed-form x-gradient against central FD.

    Probes whose shifted argument lands within ``kink_margin`` of the
    constraint boundary are resampled: the squared distance is only C^1
    there, so a second-order difference quotient is not a valid oracle.
    """
    rng = np.random.default_rng(seed)
    driver = build_forward_driver(fwd.theta, fwd.pi, fwd.delta_cap)
    collected = 0
    worst = 0.0
    attempts = 0
    while collected < n_probes and attempts < 50 * n_probes:
        attempts += 1
        x = rng.uniform(-box.half_width, box.half_width, size=box.dim)
        z = rng.uniform(-3, 3, size=box.dim)
        y = (fwd.theta(x[None, :])[0] + z) / fwd.delta_cap
        if _near_boundary(fwd.pi, y, kink_margin):
            continue
        formula = forward_driver_x_gradient(fwd.theta, fwd.pi, fwd.delta_cap, x[None, :], z[None, :])[0]
        fd = finite_diff_gradient(lambda p: driver.g(p, np.broadcast_to(z, p.shape)), x)
        scale = max(1.0, float(np.linalg.norm(formula)))
        worst = max(worst, float(np.linalg.norm(formula - fd)) / scale)
        collected += 1
    return worst


def _near_boundary(pi, y, margin):
    if pi.kind == "whole_space":
        return False
    if pi.kind == "ball":
        return abs(np.linalg.norm(y - pi.center) - pi.radius) < margin
    if pi.kind == "box":
        return bool(np.any(np.abs(y - pi.lo) < margin) or np.any(np.abs(y - pi.hi) < margin))
    if pi.kind == "halfspace":
        gap = float(np.dot(pi.normal, y) - pi.offset) / np.linalg.norm(pi.normal)
        return abs(gap) < margin
    return False


def run_simulate(args):
    problem = load_problem(args.config)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args)
    spec = problem.spec
    ens = simulate_paths(spec.b, None, spec.x0, args.horizon, args.dt, args.n_paths, args.seed)
    final = ens.states[:, -1, :]
    delta_hat = spec.delta
    if delta_hat is None:
        from .conditions import check_dissipativity

        delta_hat = check_dissipativity(spec.b, spec.box, seed=args.seed).delta_hat
    pairs = [(spec.x0 + 1.0, spec.x0 - 1.0), (spec.x0 + 2.0, spec.x0)]
    ergo = check_exponential_ergodicity(
        spec.b, max(delta_hat, 1e-12), pairs, min(args.horizon, 10.0), args.dt, args.seed + 1
    )
    payload = {
        "n_paths": ens.n_paths,
        "n_steps": ens.n_steps,
        "dt": ens.dt,
        "blowups": ens.blowups,
        "final_mean": final.mean(axis=0).tolist(),
        "final_var": final.var(axis=0, ddof=1).tolist() if ens.n_paths > 1 else None,
        "exponential_ergodicity": ergo,
    }
    _write_json(os.path.join(args.out, "paths_summary.json"), payload)
    if args.dump_paths:
        _dump_paths_csv(args.dump_paths, ens)
    print(f"simulated {ens.n_paths} paths x {ens.n_steps} steps (blowups: {ens.blowups})")
    print(f"coupled contraction: {'ok' if ergo['holds'] else 'FAIL'} (worst ratio {ergo['worst_ratio']:.3f})")
    return 0 if ergo["holds"] and ens.blowups == 0 else 1


def _dump_paths_csv(path, ens):
    with open(path, "w") as fh:
        fh.write("path,step," + ",".join(f"x{i + 1}" for i in range(ens.dim)) + "\n")
        for p in range(ens.n_paths):
            for k in range(ens.n_steps + 1):
                coords = ",".join(f"{c:.17g}" for c in ens.states[p, k])
                fh.write(f"{p},{k},{coords}\n")


def build_parser():
    parser = argparse.ArgumentParser(prog="ehjb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("check", run_check),
        ("solve", run_solve),
        ("control", run_control),
        ("forward", run_forward),
        ("simulate", run_simulate),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default="ehjb_out")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--spacing", type=float, default=None)
        p.add_argument("--rho0", type=float, default=None)
        p.add_argument("--min-rho", dest="min_rho", type=float, default=None)
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--force", action="store_true")
        p.add_argument("--cap", default="auto", help="auto, off, or a positive number")
        p.add_argument("--residual-tol", dest="residual_tol", type=float, default=5e-3)
        p.add_argument("--horizon", type=float, default=200.0)
        p.add_argument("--dt", type=float, default=1e-2)
        p.add_argument("--n-paths", dest="n_paths", type=int, default=64)
        p.add_argument("--dump-paths", dest="dump_paths", default=None)
        p.set_defaults(handler=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = os.environ.get("EHJB_THREADS")
    if threads is not None:
        # the pipelines are serial; the variable caps library-level threading
        os.environ.setdefault("OMP_NUM_THREADS", threads)
    try:
        return args.handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except SolveError as err:
        print(f"solver error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
