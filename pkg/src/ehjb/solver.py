"""Grid solver for the ergodic semilinear equation via vanishing discount.

The whole-space problem is truncated to a box with reflecting (zero
Neumann) boundary.  For each discount rate rho we solve

    rho u - (1/2) Lap u - b . grad u = f~(x, grad u)

by a frozen-nonlinearity fixed point: the gradient inside the driver is
frozen at the previous iterate, the resulting linear system is solved by
a sparse direct factorization, and the update is damped.  Solutions are
carried as (offset, fluctuation) pairs, with the source mean handled
analytically, so the 1/rho-sized constant mode never pollutes the shape
of u or the reading of lambda = rho u(x0).  The discount is then driven
down a geometric schedule with warm starts until the lambda readings are
Cauchy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .model import Box, GradientBound, GridFunction, SolveReport, grid_points_per_axis


class SolveError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class SolverOptions:
    spacing: float = 0.05
    rho0: float = 1.0
    rho_factor: float = 0.5
    min_rho: float = 1e-5
    fixed_point_tol: float = 1e-5
    fixed_point_max_iter: int = 200
    damping: float = 0.5
    boundary: str = "reflecting"
    cap_mode: str = "auto"
    cap_value: Optional[float] = None
    # stop threshold for consecutive lambda readings; defaults to
    # fixed_point_tol, but the two floors differ, so it can be overridden
    lambda_tol: Optional[float] = None

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if not (self.rho0 > self.min_rho > 0):
            raise ValueError("need rho0 > min_rho > 0")
        if not (0.0 < self.rho_factor < 1.0):
            raise ValueError("rho factor must lie in (0, 1)")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")
        if self.boundary != "reflecting":
            raise ValueError("only the reflecting boundary is implemented")
        if self.cap_mode not in ("auto", "manual", "off"):
            raise ValueError("cap_mode must be auto, manual, or off")


# ---------------------------------------------------------------------------
# truncation

def cap_profile(r, cap):
    """Monotone C^1 radial profile: identity below cap, constant cap + 1
    beyond cap + 2, a cubic blend with matched values and slopes between."""
    r = np.asarray(r, dtype=float)
    t = np.clip(r - cap, 0.0, 2.0)
    blended = cap + t - 0.25 * t * t
    return np.where(r <= cap, r, blended)


@dataclass(frozen=True)
class TruncatedDriver:
    """Driver composed with the smooth radial cap pi(z) = profile(|z|) z / |z|.

    ``cap=None`` means no truncation (pi is the identity).
    """

    base: object
    cap: Optional[float] = None

    def pi(self, z):
        if self.cap is None:
            return np.asarray(z, dtype=float)
        z = np.asarray(z, dtype=float)
        r = np.linalg.norm(z, axis=-1, keepdims=True)
        scale = np.where(r > 0, cap_profile(r, self.cap) / np.maximum(r, 1e-300), 1.0)
        return z * scale

    def f(self, x, z):
        return self.base.f(x, self.pi(z))


def truncate_driver(driver, cap):
    if cap is not None and cap <= 0:
        raise ValueError("cap must be positive")
    return TruncatedDriver(base=driver, cap=cap)


# ---------------------------------------------------------------------------
# grid and discrete operators

class Grid:
    """Uniform tensor grid over [-L, L]^d with mirrored-ghost differences."""

    def __init__(self, box, spacing):
        self.box = box
        self.n = grid_points_per_axis(box, spacing)
        self.h = 2.0 * box.half_width / (self.n - 1)
        self.shape = (self.n,) * box.dim
        self.dim = box.dim
        self.axis = np.linspace(-box.half_width, box.half_width, self.n)
        if box.dim == 1:
            self.points = self.axis[:, None]
        else:
            mesh = np.meshgrid(self.axis, self.axis, indexing="ij")
            self.points = np.stack([m.ravel() for m in mesh], axis=-1)
        self.size = self.points.shape[0]

    def flat_index(self, x):
        """Flat index of the node nearest to x."""
        x = np.asarray(x, dtype=float).reshape(self.dim)
        idx = np.clip(np.round((x + self.box.half_width) / self.h).astype(int), 0, self.n - 1)
        flat = 0
        for k in range(self.dim):
            flat = flat * self.n + idx[k]
        return int(flat)

    def gradient(self, values_flat):
        """Central differences with mirrored ghosts (zero normal slope)."""
        u = values_flat.reshape(self.shape)
        out = np.zeros(self.shape + (self.dim,))
        for k in range(self.dim):
            um = np.moveaxis(u, k, 0)
            gk = np.zeros_like(um)
            gk[1:-1] = (um[2:] - um[:-2]) / (2.0 * self.h)
            gview = np.moveaxis(out[..., k], k, 0)
            gview[...] = gk
        return out.reshape(self.size, self.dim)

    def gradient_one_sided(self, values_flat):
        """Central in the interior, one-sided second order at the boundary."""
        u = values_flat.reshape(self.shape)
        out = np.zeros(self.shape + (self.dim,))
        h = self.h
        for k in range(self.dim):
            um = np.moveaxis(u, k, 0)
            gk = np.empty_like(um)
            gk[1:-1] = (um[2:] - um[:-2]) / (2.0 * h)
            gk[0] = (-3.0 * um[0] + 4.0 * um[1] - um[2]) / (2.0 * h)
            gk[-1] = (3.0 * um[-1] - 4.0 * um[-2] + um[-3]) / (2.0 * h)
            gview = np.moveaxis(out[..., k], k, 0)
            gview[...] = gk
        return out.reshape(self.size, self.dim)

    def interior_mask(self, layer=1):
        mask = np.ones(self.shape, dtype=bool)
        for k in range(self.dim):
            mview = np.moveaxis(mask, k, 0)
            mview[:layer] = False
            mview[-layer:] = False
        return mask.ravel()

    def laplacian(self, values_flat):
        """Standard second-difference Laplacian with mirrored ghosts."""
        u = values_flat.reshape(self.shape)
        out = np.zeros(self.shape)
        h2 = self.h * self.h
        for k in range(self.dim):
            um = np.moveaxis(u, k, 0)
            lk = np.empty_like(um)
            lk[1:-1] = (um[2:] - 2.0 * um[1:-1] + um[:-2]) / h2
            lk[0] = (2.0 * um[1] - 2.0 * um[0]) / h2
            lk[-1] = (2.0 * um[-2] - 2.0 * um[-1]) / h2
            out += np.moveaxis(lk, 0, k)
        return out.ravel()


def _advection_stencils(grid, bvals):
    """Per-node, per-axis advection coefficients for -b . grad.

    Central differencing wherever the cell Peclet number allows it while
    keeping the off-diagonal entries nonpositive (so the matrix stays an
    M-matrix and the discrete comparison principle holds); first-order
    upwind elsewhere.  Advection is dropped on boundary faces, where the
    mirrored ghost makes the normal derivative vanish.
    """
    h = grid.h
    rows, cols, vals = [], [], []
    idx = np.arange(grid.size).reshape(grid.shape)
    for k in range(grid.dim):
        c = bvals[:, k].reshape(grid.shape)
        im = np.moveaxis(idx, k, 0)
        cm = np.moveaxis(c, k, 0)
        center = im[1:-1].ravel()
        plus = im[2:].ravel()
        minus = im[:-2].ravel()
        coeff = cm[1:-1].ravel()
        central_ok = np.abs(coeff) <= (1.0 / h) * (1.0 - 1e-12)
        # central: -c (u_{+1} - u_{-1}) / (2h)
        cc = np.where(central_ok, coeff, 0.0)
        rows += [center, center]
        cols += [plus, minus]
        vals += [-cc / (2.0 * h), cc / (2.0 * h)]
        # upwind fallback where the central stencil would lose the M-matrix
        up = ~central_ok
        if np.any(up):
            cu = coeff[up]
            pos = cu > 0
            r_up, p_up, m_up = center[up], plus[up], minus[up]
            rows += [r_up[pos], r_up[pos]]
            cols += [p_up[pos], r_up[pos]]
            vals += [-cu[pos] / h, cu[pos] / h]
            neg = ~pos
            rows += [r_up[neg], r_up[neg]]
            cols += [m_up[neg], r_up[neg]]
            vals += [cu[neg] / h, -cu[neg] / h]
    return rows, cols, vals


def assemble_operator(grid, b):
    """Sparse K = -(1/2) Lap - b . grad with reflecting boundary."""
    h2 = grid.h * grid.h
    a = 0.5 / h2
    rows, cols, vals = [], [], []
    idx = np.arange(grid.size).reshape(grid.shape)
    for k in range(grid.dim):
        im = np.moveaxis(idx, k, 0)
        center = im[1:-1].ravel()
        plus = im[2:].ravel()
        minus = im[:-2].ravel()
        rows += [center, center, center]
        cols += [center, plus, minus]
        vals += [np.full(center.size, 2 * a), np.full(center.size, -a), np.full(center.size, -a)]
        lo, lo_in = im[0].ravel(), im[1].ravel()
        hi, hi_in = im[-1].ravel(), im[-2].ravel()
        rows += [lo, lo, hi, hi]
        cols += [lo, lo_in, hi, hi_in]
        vals += [
            np.full(lo.size, 2 * a),
            np.full(lo.size, -2 * a),
            np.full(hi.size, 2 * a),
            np.full(hi.size, -2 * a),
        ]
    bvals = np.asarray(b(grid.points), dtype=float).reshape(grid.size, grid.dim)
    ar, ac, av = _advection_stencils(grid, bvals)
    rows += ar
    cols += ac
    vals += av
    rows = np.concatenate([np.asarray(r) for r in rows])
    cols = np.concatenate([np.asarray(c) for c in cols])
    vals = np.concatenate([np.asarray(v, dtype=float) for v in vals])
    return sp.coo_matrix((vals, (rows, cols)), shape=(grid.size, grid.size)).tocsc()


# ---------------------------------------------------------------------------
# discounted solves

@dataclass
class _Parts:
    """One discounted solution, split as u = offset + fluctuation."""

    offset: float
    w: np.ndarray


def _fixed_point(grid, lu, tdriver, rho, opts, w0, history):
    """Frozen-gradient iteration of the discounted equation.

    Returns converged parts; raises SolveError with the residual history
    when the iteration cap is hit.
    """
    w = np.zeros(grid.size) if w0 is None else w0.copy()
    m = 0.0
    omega = opts.damping
    s_prev = None
    sbar_prev = None
    solved_prev = None
    updates = []
    rises = 0
    for it in range(opts.fixed_point_max_iter):
        grad = grid.gradient(w)
        s = np.asarray(tdriver.f(grid.points, grad), dtype=float)
        if not np.all(np.isfinite(s)):
            raise SolveError(f"non-finite driver values at rho={rho:g}", history)
        sbar = float(np.mean(s))
        if s_prev is not None and np.max(np.abs(s - s_prev)) <= 1e-14 * (1.0 + np.max(np.abs(s))):
            # frozen source is stationary: the last undamped solve is exact
            m, w = solved_prev
            history.append((rho, it, 0.0))
            return _Parts(offset=m, w=w)
        w_new = lu.solve(s - sbar)
        m_new = sbar / rho
        dw = w_new - w
        dm = m_new - m
        # the 1/rho-sized offset and the shape converge on different scales;
        # measuring them separately keeps the shape tolerance rho-independent
        update_w = float(np.max(np.abs(dw)))
        if it == 0 and w0 is None:
            w, m = w_new, m_new
        else:
            w = w + omega * dw
            m = m + omega * dm
        updates.append(update_w)
        history.append((rho, it, update_w))
        if len(updates) >= 3 and updates[-1] > updates[-2] > updates[-3]:
            rises += 1
            if rises >= 1:
                omega = max(0.05, 0.5 * omega)
                rises = 0
        shape_settled = update_w <= opts.fixed_point_tol * (1.0 + float(np.max(np.abs(w))))
        mean_settled = sbar_prev is not None and abs(sbar - sbar_prev) <= 0.1 * opts.fixed_point_tol * (
            1.0 + abs(sbar)
        )
        if shape_settled and mean_settled:
            return _Parts(offset=m, w=w)
        s_prev = s
        sbar_prev = sbar
        solved_prev = (m_new, w_new)
    raise SolveError(
        f"fixed point did not converge at rho={rho:g} "
        f"within {opts.fixed_point_max_iter} iterations",
        history,
    )


def solve_discounted(spec, tdriver, rho, opts, warm_start=None):
    """Solve the discounted equation on the grid; returns u as a GridFunction."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    grid = Grid(spec.box, opts.spacing)
    K = assemble_operator(grid, spec.b)
    lu = splu((rho * sp.identity(grid.size, format="csc") + K).tocsc())
    parts = _fixed_point(grid, lu, tdriver, rho, opts, warm_start, history=[])
    values = (parts.offset + parts.w).reshape(grid.shape)
    return GridFunction(spec.box, grid.h, values, kind="scalar")


def _rho_schedule(opts):
    rho = opts.rho0
    out = []
    while rho >= opts.min_rho * (1.0 - 1e-12):
        out.append(rho)
        rho *= opts.rho_factor
    return out


def vanishing_discount(spec, tdriver, opts):
    """Drive the discount down a geometric schedule and read off (u, v, lambda).

    Each solve warm-starts from the previous fluctuation; the loop stops
    once consecutive lambda readings differ by less than the fixed-point
    tolerance.  Exhausting the schedule without that happening is an error
    carrying the full trace.
    """
    grid = Grid(spec.box, opts.spacing)
    K = assemble_operator(grid, spec.b)
    idx0 = grid.flat_index(spec.x0)
    history = []
    trace = []
    w = None
    lam = None
    converged = False
    parts = None
    lam_tol = opts.fixed_point_tol if opts.lambda_tol is None else opts.lambda_tol
    for rho in _rho_schedule(opts):
        lu = splu((rho * sp.identity(grid.size, format="csc") + K).tocsc())
        parts = _fixed_point(grid, lu, tdriver, rho, opts, w, history)
        w = parts.w
        lam_new = rho * parts.offset + rho * parts.w[idx0]
        trace.append((rho, lam_new))
        if lam is not None and abs(lam_new - lam) < lam_tol:
            lam = lam_new
            converged = True
            break
        lam = lam_new
    if not converged:
        raise SolveError(
            "discount schedule exhausted without lambda convergence; "
            f"trace={[(f'{r:.2e}', f'{l:.6f}') for r, l in trace]}",
            history,
        )
    u_flat = parts.w - parts.w[idx0]
    u = GridFunction(spec.box, grid.h, u_flat.reshape(grid.shape), kind="scalar")
    v = GridFunction(
        spec.box, grid.h, grid.gradient(u_flat).reshape(grid.shape + (grid.dim,)), kind="vector"
    )
    rho_last = trace[-1][0]
    lam_avg = rho_last * parts.offset + rho_last * float(np.mean(parts.w))
    report = SolveReport(
        u=u,
        v=v,
        lam=lam,
        discount_trace=trace,
        lambda_grid_avg=lam_avg,
        iterations=history,
    )
    report.pde_residual = ergodic_residual(spec, tdriver.base, report)
    return report


# ---------------------------------------------------------------------------
# verification operators

def ergodic_residual(spec, driver, report, layer=3):
    """Sup over interior nodes of |(1/2) Lap u + b . grad u + f(x, v) - lambda|.

    Uses the solver's own discrete operators, so for an exact discrete
    solution the residual reduces to the vanishing-discount remainder.
    Nodes within ``layer`` spacings of the boundary are excluded.
    """
    grid = Grid(report.u.box, report.u.spacing)
    K = assemble_operator(grid, spec.b)
    u = report.u.values.ravel()
    v = report.v.values.reshape(grid.size, grid.dim)
    fvals = np.asarray(driver.f(grid.points, v), dtype=float)
    res = -(K @ u) + fvals - report.lam
    mask = grid.interior_mask(layer)
    return float(np.max(np.abs(res[mask])))


def gradient_bound_check(report, M, delta, slack=5e-2, layer=3):
    """Compare sup |v| on the interior against the dissipativity cap M / delta."""
    grid = Grid(report.v.box, report.v.spacing)
    mask = grid.interior_mask(layer)
    v = report.v.values.reshape(grid.size, grid.dim)
    sup_v = float(np.max(np.linalg.norm(v[mask], axis=-1)))
    bound = M / delta
    return GradientBound(bound=bound, sup_v=sup_v, verdict=sup_v <= bound * (1.0 + slack) + 1e-6)


def gradient_system_residual(spec, driver, report, layer=3):
    """Residual of the differentiated equation satisfied by v.

    Component i reads (1/2) Lap v_i + (d_i b) . v + b . grad v_i
    + dx_i f(x, v) + dz f(x, v) . grad v_i = 0; we evaluate it with
    central differences on the stored v and return the interior sup.
    """
    grid = Grid(report.v.box, report.v.spacing)
    v = report.v.values.reshape(grid.size, grid.dim)
    jac_b = np.asarray(spec.b.jac(grid.points), dtype=float).reshape(grid.size, grid.dim, grid.dim)
    dxf = np.asarray(driver.dxf(grid.points, v), dtype=float).reshape(grid.size, grid.dim)
    dzf = np.asarray(driver.dzf(grid.points, v), dtype=float).reshape(grid.size, grid.dim)
    bvals = np.asarray(spec.b(grid.points), dtype=float).reshape(grid.size, grid.dim)
    mask = grid.interior_mask(layer)
    worst = 0.0
    for i in range(grid.dim):
        vi = v[:, i]
        lap = grid.laplacian(vi)
        grad_vi = grid.gradient_one_sided(vi)
        dib_dot_v = np.sum(jac_b[:, :, i] * v, axis=-1)
        res = (
            0.5 * lap
            + dib_dot_v
            + np.sum(bvals * grad_vi, axis=-1)
            + dxf[:, i]
            + np.sum(dzf * grad_vi, axis=-1)
        )
        worst = max(worst, float(np.max(np.abs(res[mask]))))
    return worst
