"""Problem specification files.

A problem file is INI-style text.  ``[problem]`` declares the dimension,
box half width, anchor point and optionally the dissipativity constant;
``[drift]``, ``[g]`` and ``[h]`` give catalog expressions (``[g]``/``[h]``
default to zero when omitted); the optional ``[cost]`` section enables the
control pipelines and ``[forward]`` the factor-driver pipeline.  Unknown
sections or keys are rejected by name.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import expressions as ex
from .model import Box, ConvexSet, DriverSplit, ProblemSpec, RunningCost, VectorField


class ConfigError(ValueError):
    pass


_KNOWN = {
    "problem": {"dim", "box_half_width", "x0", "delta"},
    "drift": {"expr"},
    "g": {"expr"},
    "h": {"expr"},
    "cost": {"expr", "convexity_modulus", "kappa", "delta_rs"},
    "forward": {
        "theta",
        "pi",
        "pi_center",
        "pi_radius",
        "pi_lo",
        "pi_hi",
        "pi_normal",
        "pi_offset",
        "delta_cap",
    },
}


@dataclass
class ForwardSection:
    theta: VectorField
    pi: ConvexSet
    delta_cap: float


@dataclass
class ParsedProblem:
    spec: ProblemSpec
    cost: Optional[RunningCost] = None
    delta_rs: Optional[float] = None
    forward: Optional[ForwardSection] = None


def _vector_field(exprs, dim, scalar_too=False):
    env = ex.build_env_index([("x", dim)])
    comps = [ex.compile_numpy(node, env) for node in exprs]

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        args = [x[..., i] for i in range(dim)]
        return np.stack([np.broadcast_to(c(*args), x.shape[:-1]) for c in comps], axis=-1)

    fast = None
    if scalar_too and dim == 1:
        fast = ex.compile_scalar(exprs[0], env)
    return VectorField(dim=dim, eval=evaluate, eval_scalar=fast)


def _scalar_xz(node, dim):
    env = ex.build_env_index([("x", dim), ("z", dim)])
    fn = ex.compile_numpy(node, env)

    def evaluate(x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        args = [x[..., i] for i in range(dim)] + [z[..., i] for i in range(dim)]
        return np.broadcast_to(fn(*args), x.shape[:-1]).astype(float)

    return evaluate


def _scalar_xa(node, dim):
    env = ex.build_env_index([("x", dim), ("a", dim)])
    fn = ex.compile_numpy(node, env)

    def evaluate(x, a):
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        args = [x[..., i] for i in range(dim)] + [a[..., i] for i in range(dim)]
        return np.broadcast_to(fn(*args), x.shape[:-1]).astype(float)

    return evaluate


def _parse_floats(raw, dim, what):
    try:
        vals = [float(p) for p in raw.split(",")]
    except ValueError as err:
        raise ConfigError(f"{what}: expected {dim} comma-separated numbers, got {raw!r}") from err
    if len(vals) == 1 and dim > 1:
        vals = vals * dim
    if len(vals) != dim:
        raise ConfigError(f"{what}: expected {dim} components, got {len(vals)}")
    return np.asarray(vals, dtype=float)


def _compile(section, key, raw, variables, want_components=None):
    try:
        nodes = ex.parse_list(raw, variables)
    except ex.ExpressionError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from err
    if want_components is not None and len(nodes) != want_components:
        raise ConfigError(
            f"[{section}] {key}: expected {want_components} components, got {len(nodes)}"
        )
    return nodes


def load_problem(path):
    """Parse a problem file into model objects."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigError(f"cannot read problem file {path}: {err}") from err
    except configparser.Error as err:
        raise ConfigError(f"parse error in {path}: {err}") from err

    for section in parser.sections():
        if section not in _KNOWN:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    if "problem" not in parser:
        raise ConfigError("missing required section [problem]")
    prob = parser["problem"]
    try:
        dim = prob.getint("dim")
        half = prob.getfloat("box_half_width")
    except (ValueError, TypeError) as err:
        raise ConfigError(f"[problem]: {err}") from err
    if dim is None or half is None:
        raise ConfigError("[problem] requires dim and box_half_width")
    if dim not in (1, 2):
        raise ConfigError("[problem] dim must be 1 or 2")
    box = Box(half_width=half, dim=dim)
    x0 = _parse_floats(prob.get("x0", "0"), dim, "[problem] x0")
    delta = prob.getfloat("delta", fallback=None)

    if "drift" not in parser or "expr" not in parser["drift"]:
        raise ConfigError("missing [drift] expr")
    x_vars = set(ex.build_env_index([("x", dim)]))
    xz_vars = set(ex.build_env_index([("x", dim), ("z", dim)]))
    b = _vector_field(
        _compile("drift", "expr", parser["drift"]["expr"], x_vars, dim), dim, scalar_too=True
    )

    def scalar_or_zero(section):
        if section in parser and "expr" in parser[section]:
            node = _compile(section, "expr", parser[section]["expr"], xz_vars, 1)[0]
            return _scalar_xz(node, dim)
        return lambda x, z: np.zeros(np.shape(x)[:-1])

    driver = DriverSplit(g=scalar_or_zero("g"), h=scalar_or_zero("h"))
    spec = ProblemSpec(b=b, driver=driver, box=box, delta=delta, x0=x0)

    cost = None
    delta_rs = None
    if "cost" in parser:
        sec = parser["cost"]
        if "expr" not in sec or "convexity_modulus" not in sec or "kappa" not in sec:
            raise ConfigError("[cost] requires expr, convexity_modulus, and kappa")
        xa_vars = set(ex.build_env_index([("x", dim), ("a", dim)]))
        r_node = _compile("cost", "expr", sec["expr"], xa_vars, 1)[0]
        kap_node = _compile("cost", "kappa", sec["kappa"], {"s"}, 1)[0]
        kap_fn = ex.compile_numpy(kap_node, {"s": 0})
        mu = sec.getfloat("convexity_modulus")
        if mu is None or mu <= 0:
            raise ConfigError("[cost] convexity_modulus must be a positive number")
        cost = RunningCost(
            r=_scalar_xa(r_node, dim),
            convexity_modulus=mu,
            kappa=lambda s: np.asarray(kap_fn(np.asarray(s, dtype=float)), dtype=float),
        )
        _spot_check_cost(cost, box)
        delta_rs = sec.getfloat("delta_rs", fallback=None)

    forward = None
    if "forward" in parser:
        forward = _load_forward(parser["forward"], dim, x_vars)

    return ParsedProblem(spec=spec, cost=cost, delta_rs=delta_rs, forward=forward)


def _load_forward(sec, dim, x_vars):
    if "theta" not in sec or "pi" not in sec or "delta_cap" not in sec:
        raise ConfigError("[forward] requires theta, pi, and delta_cap")
    theta = _vector_field(_compile("forward", "theta", sec["theta"], x_vars, dim), dim)
    kind = sec["pi"].strip()
    if kind == "whole_space":
        pi = ConvexSet.whole_space(dim)
    elif kind == "ball":
        center = _parse_floats(sec.get("pi_center", "0"), dim, "[forward] pi_center")
        radius = sec.getfloat("pi_radius", fallback=None)
        if radius is None:
            raise ConfigError("[forward] ball needs pi_radius")
        pi = ConvexSet.ball(center, radius)
    elif kind == "box":
        lo = _parse_floats(sec.get("pi_lo", ""), dim, "[forward] pi_lo")
        hi = _parse_floats(sec.get("pi_hi", ""), dim, "[forward] pi_hi")
        pi = ConvexSet.box(lo, hi)
    elif kind == "halfspace":
        normal = _parse_floats(sec.get("pi_normal", ""), dim, "[forward] pi_normal")
        offset = sec.getfloat("pi_offset", fallback=None)
        if offset is None:
            raise ConfigError("[forward] halfspace needs pi_offset")
        pi = ConvexSet.halfspace(normal, offset)
    else:
        raise ConfigError(f"[forward] unknown pi kind {kind!r}")
    delta_cap = sec.getfloat("delta_cap")
    if delta_cap is None or delta_cap <= 0:
        raise ConfigError("[forward] delta_cap must be positive")
    return ForwardSection(theta=theta, pi=pi, delta_cap=delta_cap)


def _spot_check_cost(cost, box, n_probes=100, seed=0):
    """Probe the declared growth envelope and convexity modulus."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-box.half_width, box.half_width, size=(n_probes, box.dim))
    a = rng.uniform(-3.0, 3.0, size=(n_probes, box.dim))
    rvals = np.asarray(cost.r(x, a), dtype=float)
    if not np.all(np.isfinite(rvals)):
        raise ConfigError("[cost] expr produced non-finite values on probes")
    if cost.kappa is not None:
        cap = np.asarray(cost.kappa(np.linalg.norm(a, axis=-1)), dtype=float)
        bad = np.abs(rvals) > cap + 1e-9
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ConfigError(
                f"[cost] kappa envelope violated at x={x[i]}, a={a[i]}: "
                f"|r|={abs(rvals[i]):.4g} > kappa={cap[i]:.4g}"
            )
    hess = np.asarray(cost.hess_a(x, a), dtype=float).reshape(n_probes, box.dim, box.dim)
    sym = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    if box.dim == 1:
        mins = sym[:, 0, 0]
    else:
        tr = 0.5 * (sym[:, 0, 0] + sym[:, 1, 1])
        rad = np.sqrt((0.5 * (sym[:, 0, 0] - sym[:, 1, 1])) ** 2 + sym[:, 0, 1] ** 2)
        mins = tr - rad
    if np.any(mins < cost.convexity_modulus - 1e-6):
        i = int(np.argmin(mins))
        raise ConfigError(
            f"[cost] action Hessian falls below the declared convexity modulus "
            f"at x={x[i]}, a={a[i]} (min eigenvalue {mins[i]:.4g})"
        )
