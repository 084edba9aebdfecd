"""Shared domain types: fields, driver splits, grids, problems, reports.

Conventions used throughout the package:

* points live in ``R^d`` with ``d in {1, 2}`` for anything grid-backed
  (pure path simulation works in any dimension);
* every callable field is vectorized: it accepts arrays of shape
  ``(..., d)`` and returns ``(..., d)`` (vector fields) or ``(...)``
  (scalar fields);
* all objects are immutable after construction and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class DriverOverflowError(ArithmeticError):
    """A driver evaluated to a non-finite value."""


def default_fd_step(x):
    """Finite-difference step 1e-4 * (1 + |x|), balancing truncation and roundoff."""
    x = np.asarray(x, dtype=float)
    return 1e-4 * (1.0 + np.linalg.norm(x, axis=-1))


def _as_points(x):
    """Coerce to a (n, d) batch; report whether the input was a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x.reshape(-1, x.shape[-1]), False


def finite_diff_gradient(fn, x, h_step=None):
    """Central-difference gradient of a scalar field.

    ``fn`` maps ``(..., d)`` to ``(...)``; accuracy is O(h^2) for C^3
    fields and exact for quadratics.  Works on single points or batches.
    """
    pts, single = _as_points(x)
    n, d = pts.shape
    if h_step is None:
        h = default_fd_step(pts)
    else:
        h = np.broadcast_to(np.asarray(h_step, dtype=float), (n,)).copy()
    grad = np.empty((n, d))
    for i in range(d):
        step = np.zeros((n, d))
        step[:, i] = h
        grad[:, i] = (fn(pts + step) - fn(pts - step)) / (2.0 * h)
    return grad[0] if single else grad.reshape(np.shape(x))


def _fd_jacobian(fn, x, h_step=None):
    """Central-difference Jacobian J[i, j] = d fn_i / d x_j of a vector field."""
    pts, single = _as_points(x)
    n, d = pts.shape
    h = default_fd_step(pts) if h_step is None else np.broadcast_to(h_step, (n,)).astype(float)
    jac = np.empty((n, d, d))
    for j in range(d):
        step = np.zeros((n, d))
        step[:, j] = h
        jac[:, :, j] = (fn(pts + step) - fn(pts - step)) / (2.0 * h)[:, None]
    return jac[0] if single else jac


@dataclass(frozen=True)
class VectorField:
    """A map R^d -> R^d with an optional analytic Jacobian.

    ``eval`` must be vectorized over leading axes.  ``eval_scalar`` is an
    optional float->float fast path used by single-path simulation in one
    dimension.
    """

    dim: int
    eval: Callable
    jacobian: Optional[Callable] = None
    eval_scalar: Optional[Callable] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")

    def __call__(self, x):
        return self.eval(x)

    def jac(self, x):
        if self.jacobian is not None:
            return self.jacobian(x)
        return _fd_jacobian(self.eval, x)


@dataclass(frozen=True)
class DriverSplit:
    """Driver f(x, z) = g(x, z) + h(x, z) with optional analytic partials.

    Missing partials fall back to central finite differences, so only the
    values of g and h are ever required.
    """

    g: Callable
    h: Callable
    dx_g: Optional[Callable] = None
    dx_h: Optional[Callable] = None
    dz_f: Optional[Callable] = None

    def f(self, x, z):
        return self.g(x, z) + self.h(x, z)

    def dxg(self, x, z):
        if self.dx_g is not None:
            return self.dx_g(x, z)
        z = np.asarray(z, dtype=float)
        return finite_diff_gradient(lambda p: self.g(p, np.broadcast_to(z, p.shape)), x)

    def dxh(self, x, z):
        if self.dx_h is not None:
            return self.dx_h(x, z)
        z = np.asarray(z, dtype=float)
        return finite_diff_gradient(lambda p: self.h(p, np.broadcast_to(z, p.shape)), x)

    def dxf(self, x, z):
        return np.asarray(self.dxg(x, z)) + np.asarray(self.dxh(x, z))

    def dzf(self, x, z):
        if self.dz_f is not None:
            return self.dz_f(x, z)
        x = np.asarray(x, dtype=float)
        return finite_diff_gradient(lambda q: self.f(np.broadcast_to(x, q.shape), q), z)


def zero_driver(dim):
    """Driver with g = h = 0."""
    zero = lambda x, z: np.zeros(np.shape(x)[:-1])
    dzero = lambda x, z: np.zeros(np.shape(x))
    return DriverSplit(g=zero, h=zero, dx_g=dzero, dx_h=dzero, dz_f=dzero)


def eval_driver(driver, x, z):
    """Evaluate f(x, z) = g + h at one point, rejecting non-finite output."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    out = float(driver.g(x, z) + driver.h(x, z))
    if not np.isfinite(out):
        raise DriverOverflowError(f"driver overflow at ({x}, {z})")
    return out


@dataclass(frozen=True)
class Box:
    """Axis-aligned cube [-L, L]^d."""

    half_width: float
    dim: int

    def __post_init__(self):
        if self.half_width <= 0:
            raise ValueError("box half width must be positive")
        if self.dim < 1:
            raise ValueError("box dimension must be positive")

    @property
    def lo(self):
        return -self.half_width * np.ones(self.dim)

    @property
    def hi(self):
        return self.half_width * np.ones(self.dim)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return bool(np.all(np.abs(x) <= self.half_width + 1e-12))


@dataclass(frozen=True)
class ConvexSet:
    """Closed convex set of one of four closed-form kinds.

    Kinds: ``whole_space``; ``ball`` (center, radius); ``box`` (lo, hi,
    componentwise); ``halfspace`` {x : normal . x <= offset}.
    """

    kind: str
    dim: int
    center: Optional[np.ndarray] = None
    radius: Optional[float] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    offset: Optional[float] = None

    @staticmethod
    def whole_space(dim):
        return ConvexSet(kind="whole_space", dim=dim)

    @staticmethod
    def ball(center, radius):
        center = np.asarray(center, dtype=float)
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        return ConvexSet(kind="ball", dim=center.size, center=center, radius=float(radius))

    @staticmethod
    def box(lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box requires lo <= hi componentwise")
        return ConvexSet(kind="box", dim=lo.size, lo=lo, hi=hi)

    @staticmethod
    def halfspace(normal, offset):
        normal = np.asarray(normal, dtype=float)
        if np.linalg.norm(normal) == 0:
            raise ValueError("halfspace normal must be nonzero")
        return ConvexSet(kind="halfspace", dim=normal.size, normal=normal, offset=float(offset))


@dataclass(frozen=True)
class RunningCost:
    """Running cost r(x, a), uniformly convex in the action.

    ``convexity_modulus`` is the declared mu with hess_a r >= mu * I;
    optional analytic derivatives fall back to finite differences.
    ``kappa`` is the declared growth envelope: |r(x, a)| <= kappa(|a|).
    """

    r: Callable
    convexity_modulus: float
    da_r: Optional[Callable] = None
    da2_r: Optional[Callable] = None
    dxda_r: Optional[Callable] = None
    kappa: Optional[Callable] = None

    def __post_init__(self):
        if self.convexity_modulus <= 0:
            raise ValueError("convexity_modulus must be positive")

    def grad_a(self, x, a):
        if self.da_r is not None:
            return self.da_r(x, a)
        x = np.asarray(x, dtype=float)
        return finite_diff_gradient(lambda q: self.r(np.broadcast_to(x, q.shape), q), a)

    def hess_a(self, x, a):
        """Hessian in a; finite differences of grad_a when not analytic."""
        if self.da2_r is not None:
            return self.da2_r(x, a)
        x = np.asarray(x, dtype=float)
        return _fd_jacobian(
            lambda q: np.asarray(self.grad_a(np.broadcast_to(x, q.shape), q)), a
        )

    def mixed_xa(self, x, a):
        """Matrix d^2 r / dx_i da_j, shape (..., d, d)."""
        if self.dxda_r is not None:
            return self.dxda_r(x, a)
        a = np.asarray(a, dtype=float)
        jac = _fd_jacobian(
            lambda p: np.asarray(self.grad_a(p, np.broadcast_to(a, p.shape))), x
        )
        # jac[i, j] = d/dx_j (da_i r); we want rows in x, columns in a.
        return np.swapaxes(jac, -1, -2)


@dataclass(frozen=True)
class ProblemSpec:
    """Data of one ergodic problem: drift, split driver, domain, anchor."""

    b: VectorField
    driver: DriverSplit
    box: Box
    delta: Optional[float] = None
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.box.dim not in (1, 2):
            raise ValueError("grid-backed problems support d in {1, 2}")
        if self.b.dim != self.box.dim:
            raise ValueError("drift dimension does not match the box")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("declared dissipativity constant must be positive")
        if self.x0 is None:
            object.__setattr__(self, "x0", np.zeros(self.box.dim))
        else:
            x0 = np.asarray(self.x0, dtype=float).reshape(self.box.dim)
            if not self.box.contains(x0):
                raise ValueError("anchor point x0 must lie inside the box")
            object.__setattr__(self, "x0", x0)

    @property
    def dim(self):
        return self.box.dim


class GridFunction:
    """Scalar or vector field sampled on a uniform tensor grid over a box.

    values shape: ``(n,)`` / ``(n, n)`` for scalars, with a trailing
    length-d axis for vector fields.
    """

    def __init__(self, box, spacing, values, kind):
        if kind not in ("scalar", "vector"):
            raise ValueError("kind must be 'scalar' or 'vector'")
        if spacing <= 0:
            raise ValueError("spacing must be positive")
        values = np.asarray(values, dtype=float)
        n = grid_points_per_axis(box, spacing)
        expected = (n,) * box.dim if kind == "scalar" else (n,) * box.dim + (box.dim,)
        if values.shape != expected:
            raise ValueError(
                f"values shape {values.shape} does not match grid shape {expected}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        self.box = box
        self.spacing = 2.0 * box.half_width / (n - 1)
        self.values = values
        self.kind = kind
        self.values.flags.writeable = False

    @property
    def axis(self):
        n = self.values.shape[0]
        return np.linspace(-self.box.half_width, self.box.half_width, n)

    def interpolate(self, points):
        """Multilinear interpolation; points outside the box are clamped."""
        pts, single = _as_points(points)
        vals = _multilinear(self.axis, self.values, self.kind, pts)
        if single:
            return vals[0]
        return vals.reshape(np.shape(points)[:-1] + vals.shape[1:])

    def clip_fraction(self, points):
        """Fraction of query points falling outside the box."""
        pts, _ = _as_points(points)
        L = self.box.half_width
        outside = np.any(np.abs(pts) > L * (1 + 1e-12), axis=-1)
        return float(np.mean(outside))


def grid_points_per_axis(box, spacing):
    n = int(round(2.0 * box.half_width / spacing)) + 1
    if n < 3:
        raise ValueError("spacing too coarse for the box")
    return n


def _multilinear(axis, values, kind, pts):
    n = axis.size
    h = axis[1] - axis[0]
    d = pts.shape[1]
    t = (pts - axis[0]) / h
    t = np.clip(t, 0.0, n - 1.0)
    i0 = np.minimum(t.astype(int), n - 2)
    frac = t - i0
    if d == 1:
        lo = values[i0[:, 0]]
        hi = values[i0[:, 0] + 1]
        w = frac[:, 0] if kind == "scalar" else frac[:, 0][:, None]
        return lo * (1 - w) + hi * w
    if d == 2:
        i, j = i0[:, 0], i0[:, 1]
        fx, fy = frac[:, 0], frac[:, 1]
        if kind == "vector":
            fx = fx[:, None]
            fy = fy[:, None]
        v00 = values[i, j]
        v10 = values[i + 1, j]
        v01 = values[i, j + 1]
        v11 = values[i + 1, j + 1]
        return (
            v00 * (1 - fx) * (1 - fy)
            + v10 * fx * (1 - fy)
            + v01 * (1 - fx) * fy
            + v11 * fx * fy
        )
    raise ValueError("interpolation supports d in {1, 2}")


@dataclass
class PathEnsemble:
    """Euler-Maruyama trajectories with retained Brownian increments.

    ``states`` has shape (n_paths, n_steps + 1, d), ``brownian_increments``
    (n_paths, n_steps, d).  ``alive`` marks paths that never blew up.
    """

    states: np.ndarray
    brownian_increments: np.ndarray
    dt: float
    seed: int
    alive: np.ndarray = None
    blowups: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.states.shape[1] != self.brownian_increments.shape[1] + 1:
            raise ValueError("states must hold one more step than the increments")
        if self.alive is None:
            self.alive = np.ones(self.states.shape[0], dtype=bool)

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def n_steps(self):
        return self.brownian_increments.shape[1]

    @property
    def dim(self):
        return self.states.shape[2]

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps + 1)


@dataclass
class GradientBound:
    bound: float
    sup_v: float
    verdict: bool

    def to_dict(self):
        return {"bound": self.bound, "sup_v": self.sup_v, "verdict": self.verdict}


@dataclass
class SolveReport:
    """Markovian solution (u, v, lambda) and its verification summary."""

    u: GridFunction
    v: GridFunction
    lam: float
    discount_trace: list
    pde_residual: Optional[float] = None
    gradient_system_residual: Optional[float] = None
    gradient_bound: Optional[GradientBound] = None
    lambda_grid_avg: Optional[float] = None
    iterations: Optional[list] = None

    def to_dict(self):
        out = {
            "lambda": self.lam,
            "discount_trace": [[r, l] for r, l in self.discount_trace],
            "pde_residual": self.pde_residual,
            "gradient_system_residual": self.gradient_system_residual,
            "lambda_grid_avg": self.lambda_grid_avg,
            "gradient_bound": self.gradient_bound.to_dict() if self.gradient_bound else None,
        }
        return out


@dataclass
class CheckOutcome:
    """Verdict of one sampled hypothesis check, with the worst witness."""

    holds: bool
    worst: float
    witness: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "holds": self.holds,
            "worst": self.worst,
            "witness": {k: _jsonify(v) for k, v in self.witness.items()},
        }


@dataclass
class ConditionReport:
    """Per-hypothesis verdicts and estimated structural constants."""

    delta_hat: float
    lipschitz_b: float
    M: float
    M_prime: float
    monotone_dxg: CheckOutcome
    weak_monotone: CheckOutcome
    h_lipschitz_in_x: float
    dissipativity: CheckOutcome
    g0_sup: float
    h0_sup: float
    overall: bool

    def to_dict(self):
        return {
            "delta_hat": self.delta_hat,
            "lipschitz_b": self.lipschitz_b,
            "M": self.M,
            "M_prime": self.M_prime,
            "monotone_dxg": self.monotone_dxg.to_dict(),
            "weak_monotone": self.weak_monotone.to_dict(),
            "h_lipschitz_in_x": self.h_lipschitz_in_x,
            "dissipativity": self.dissipativity.to_dict(),
            "g0_sup": self.g0_sup,
            "h0_sup": self.h0_sup,
            "overall": self.overall,
        }


def _jsonify(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v
