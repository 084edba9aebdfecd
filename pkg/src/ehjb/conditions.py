"""Sampling-based verification of the structural hypotheses.

Every check here is a falsifier, not a proof: we evaluate the hypothesis
on a union of low-discrepancy points and a deterministic lattice, report
the worst value found, and return the minimizing/maximizing sample as a
witness.  Reduction order is fixed so repeated runs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .model import CheckOutcome, ConditionReport
from .drivers import project_convex

TOL_MONO = 1e-8


# ---------------------------------------------------------------------------
# probe generation

def sobol_points(n, dim, lo, hi, seed):
    """Scrambled Sobol points scaled into the box [lo, hi]^dim."""
    m = max(1, int(math.ceil(math.log2(max(2, n)))))
    sampler = qmc.Sobol(d=dim, scramble=True, seed=seed)
    unit = sampler.random_base2(m)[:n]
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return lo + unit * (hi - lo)


def _binary_spacing(target):
    """Largest power of two not exceeding the target spacing."""
    return 2.0 ** math.floor(math.log2(target))


def nested_lattice(half_width, dim, per_axis_target):
    """Deterministic lattice of multiples of a fixed binary spacing.

    The spacing depends only on ``per_axis_target`` (reference width 12),
    never on the box, so lattices over nested boxes are themselves nested;
    0 is always a lattice point and +-half_width is hit whenever it is a
    multiple of the spacing.
    """
    step = _binary_spacing(12.0 / max(4, per_axis_target))
    kmax = int(math.floor(half_width / step + 1e-9))
    axis = step * np.arange(-kmax, kmax + 1)
    if axis[-1] < half_width - 1e-12:
        axis = np.concatenate([[-half_width], axis, [half_width]])
    if dim == 1:
        return axis[:, None]
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def box_probes(box, n_samples, seed):
    """Quasi-random points plus a coarse lattice, lattice first."""
    per_axis = max(5, int(round(n_samples ** (1.0 / box.dim) / 4)))
    lat = nested_lattice(box.half_width, box.dim, per_axis)
    sob = sobol_points(n_samples, box.dim, box.lo, box.hi, seed)
    return np.concatenate([lat, sob], axis=0)


def ball_probes(radius, dim, n_samples, seed, include_sphere=True):
    """Points of the closed ball |z| <= radius, including boundary points."""
    cube = sobol_points(n_samples, dim, -radius * np.ones(dim), radius * np.ones(dim), seed)
    norms = np.linalg.norm(cube, axis=-1)
    inside = cube[norms <= radius]
    pieces = [np.zeros((1, dim)), inside]
    if include_sphere:
        if dim == 1:
            pieces.append(np.array([[-radius], [radius]]))
        else:
            ang = 2.0 * np.pi * np.arange(64) / 64
            pieces.append(radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1))
    lat = nested_lattice(radius, dim, 17)
    lat = lat[np.linalg.norm(lat, axis=-1) <= radius + 1e-12]
    pieces.append(lat)
    return np.concatenate(pieces, axis=0)


def _min_eig_sym(mats):
    """Smallest eigenvalue of symmetric (..., d, d) matrices, closed form for d <= 2."""
    d = mats.shape[-1]
    if d == 1:
        return mats[..., 0, 0]
    if d == 2:
        a = mats[..., 0, 0]
        b = mats[..., 0, 1]
        c = mats[..., 1, 1]
        mean = 0.5 * (a + c)
        rad = np.sqrt((0.5 * (a - c)) ** 2 + b**2)
        return mean - rad
    return np.linalg.eigvalsh(mats)[..., 0]


# ---------------------------------------------------------------------------
# individual checks

@dataclass
class DissipativityResult:
    holds: bool
    delta_hat: float
    witness: dict
    pairwise_delta: float
    jacobian_delta: float

    def outcome(self):
        return CheckOutcome(holds=self.holds, worst=-self.delta_hat, witness=self.witness)


def check_dissipativity(b, box, n_samples=2048, seed=0):
    """Estimate the contraction constant of the drift.

    delta_hat is the min over (i) pairwise quotients
    -(b(x) - b(xbar)) . (x - xbar) / |x - xbar|^2 on far and local pairs
    and (ii) the smallest eigenvalue of -sym(Db) at probe points; the
    field is dissipative when delta_hat > 0.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pts = box_probes(box, n_samples, seed)
    rng = np.random.default_rng(seed)

    # far pairs: each probe against a rolled copy; degenerate pairs dropped
    xbar = np.roll(pts, 1, axis=0)
    # local pairs: small random offsets probe the differential form
    unit = rng.standard_normal(pts.shape)
    unit /= np.maximum(np.linalg.norm(unit, axis=-1, keepdims=True), 1e-300)
    x_all = np.concatenate([pts, pts], axis=0)
    xbar_all = np.concatenate([xbar, pts + 1e-3 * unit], axis=0)

    diff = x_all - xbar_all
    dist2 = np.sum(diff**2, axis=-1)
    keep = dist2 > 1e-24
    x_all, xbar_all, diff, dist2 = x_all[keep], xbar_all[keep], diff[keep], dist2[keep]
    quot = -np.sum((b(x_all) - b(xbar_all)) * diff, axis=-1) / dist2
    i_pair = int(np.argmin(quot))
    pairwise = float(quot[i_pair])

    jac = b.jac(pts)
    sym = -0.5 * (jac + np.swapaxes(jac, -1, -2))
    eigs = _min_eig_sym(sym)
    i_jac = int(np.argmin(eigs))
    jacobian = float(eigs[i_jac])

    if pairwise <= jacobian:
        delta_hat = pairwise
        witness = {"x": x_all[i_pair], "xbar": xbar_all[i_pair], "kind": "pair"}
    else:
        delta_hat = jacobian
        witness = {"x": pts[i_jac], "kind": "jacobian"}
    return DissipativityResult(
        holds=delta_hat > 0.0,
        delta_hat=delta_hat,
        witness=witness,
        pairwise_delta=pairwise,
        jacobian_delta=jacobian,
    )


def estimate_lipschitz_b(b, box, n_samples=2048, seed=0):
    """Sampled lower estimate of the Lipschitz constant of the drift."""
    pts = box_probes(box, n_samples, seed)
    xbar = np.roll(pts, 1, axis=0)
    diff = pts - xbar
    dist = np.linalg.norm(diff, axis=-1)
    keep = dist > 1e-12
    ratios = np.linalg.norm(b(pts[keep]) - b(xbar[keep]), axis=-1) / dist[keep]
    jac = b.jac(pts)
    if box.dim == 1:
        op = np.abs(jac[..., 0, 0])
    else:
        op = np.linalg.svd(jac, compute_uv=False)[..., 0]
    return float(max(np.max(ratios), np.max(op)))


def _triples(box, z_radius, n_samples, seed):
    """Sampled (x, z, zbar) triples covering far and nearby z pairs."""
    xs = box_probes(box, n_samples, seed)
    d = box.dim
    zs = ball_probes(z_radius, d, n_samples, seed + 1)
    zbars = ball_probes(z_radius, d, n_samples, seed + 2)
    n = max(len(xs), len(zs), len(zbars))
    x = xs[np.arange(n) % len(xs)]
    z = zs[np.arange(n) % len(zs)]
    zbar = zbars[(np.arange(n) * 7 + 3) % len(zbars)]
    # nearby-z copies catch violations of the differential form
    rng = np.random.default_rng(seed + 3)
    bump = 1e-2 * rng.standard_normal(z.shape)
    x = np.concatenate([x, x], axis=0)
    z = np.concatenate([z, z], axis=0)
    zbar = np.concatenate([zbar, z[: len(bump)] + bump], axis=0)
    return x, z, zbar


def check_monotone_dxg(driver, box, z_radius, n_samples=2048, seed=0, tol=TOL_MONO):
    """Test (dx_g(x, z) - dx_g(x, zbar)) . (z - zbar) <= 0 on sampled triples."""
    if z_radius <= 0:
        raise ValueError("z_radius must be positive")
    x, z, zbar = _triples(box, z_radius, n_samples, seed)
    vals = np.sum((np.asarray(driver.dxg(x, z)) - np.asarray(driver.dxg(x, zbar))) * (z - zbar), axis=-1)
    i = int(np.argmax(vals))
    worst = float(vals[i])
    return CheckOutcome(
        holds=worst <= tol,
        worst=worst,
        witness={"x": x[i], "z": z[i], "zbar": zbar[i]},
    )


def check_weak_monotone_dxg(driver, box, z_radius, n_samples=2048, seed=0, tol=TOL_MONO):
    """Weaker form: (dx_g(x, z) - dx_g(x, 0)) . z <= 0."""
    if z_radius <= 0:
        raise ValueError("z_radius must be positive")
    x, z, _ = _triples(box, z_radius, n_samples, seed)
    zero = np.zeros_like(z)
    vals = np.sum((np.asarray(driver.dxg(x, z)) - np.asarray(driver.dxg(x, zero))) * z, axis=-1)
    i = int(np.argmax(vals))
    worst = float(vals[i])
    return CheckOutcome(holds=worst <= tol, worst=worst, witness={"x": x[i], "z": z[i]})


@dataclass
class GradientCaps:
    M: float
    M_prime: float
    g_sup: float
    g0_sup: float
    h_sup: float


def compute_M(driver, box, n_samples=4096, seed=0, h_z_radius=3.0):
    """Lower estimates of the driver gradient caps M and M'.

    M   = sup_{x, |z| <= 1} |dx_g| + sup_{x, z} |dx_h|,
    M'  = sup_x |dx_g(x, 0)|      + sup_{x, z} |dx_h|.

    Both suprema are taken over a dense nested binary lattice restricted
    to the declared box (so enlarging the box can only grow the result)
    and are reported as lower bounds of the whole-space values.
    """
    d = box.dim
    per_axis = max(9, int(round(n_samples ** (1.0 / d))))
    xs = nested_lattice(box.half_width, d, per_axis)

    if d == 1:
        z_unit = (2.0**-4 * np.arange(-16, 17))[:, None]
    else:
        z_unit = nested_lattice(1.0, d, 9)
        z_unit = z_unit[np.linalg.norm(z_unit, axis=-1) <= 1 + 1e-12]
        ang = 2.0 * np.pi * np.arange(64) / 64
        z_unit = np.concatenate([z_unit, np.stack([np.cos(ang), np.sin(ang)], axis=-1)])

    g_sup = 0.0
    for z in z_unit:
        zb = np.broadcast_to(z, xs.shape)
        g_sup = max(g_sup, float(np.max(np.linalg.norm(np.asarray(driver.dxg(xs, zb)), axis=-1))))
    g0 = np.asarray(driver.dxg(xs, np.zeros_like(xs)))
    g0_sup = float(np.max(np.linalg.norm(g0, axis=-1)))

    z_h = ball_probes(h_z_radius, d, min(n_samples, 256), seed, include_sphere=True)
    h_sup = 0.0
    for z in z_h:
        zb = np.broadcast_to(z, xs.shape)
        h_sup = max(h_sup, float(np.max(np.linalg.norm(np.asarray(driver.dxh(xs, zb)), axis=-1))))
    caps = GradientCaps(
        M=g_sup + h_sup, M_prime=g0_sup + h_sup, g_sup=g_sup, g0_sup=g0_sup, h_sup=h_sup
    )
    if not np.isfinite(caps.M):
        raise ArithmeticError("non-finite driver partials while estimating gradient caps")
    return caps


class SingularHessianError(ArithmeticError):
    def __init__(self, x, a):
        super().__init__(f"singular action Hessian at (x={x}, a={a})")
        self.witness = (x, a)


def check_control_condition(cost, box, a_radius, n_samples=1024, seed=0, tol=TOL_MONO):
    """Sign condition on mixed_xa(r) . hess_a(r)^{-1} at sampled (x, a).

    worst is the smallest eigenvalue of the symmetric part of the product
    matrix over the samples, i.e. the exact infimum of the quadratic form
    over unit z at each sampled point.
    """
    xs = box_probes(box, n_samples, seed)
    actions = ball_probes(a_radius, box.dim, n_samples, seed + 11)
    n = max(len(xs), len(actions))
    x = xs[np.arange(n) % len(xs)]
    a = actions[(np.arange(n) * 5 + 1) % len(actions)]
    mixed = np.asarray(cost.mixed_xa(x, a), dtype=float).reshape(n, box.dim, box.dim)
    hess = np.asarray(cost.hess_a(x, a), dtype=float).reshape(n, box.dim, box.dim)
    dets = np.linalg.det(hess)
    bad = np.abs(dets) < 1e-12
    if np.any(bad):
        i = int(np.argmax(bad))
        raise SingularHessianError(x[i], a[i])
    prod = mixed @ np.linalg.inv(hess)
    sym = 0.5 * (prod + np.swapaxes(prod, -1, -2))
    eigs = _min_eig_sym(sym)
    i = int(np.argmin(eigs))
    worst = float(eigs[i])
    return CheckOutcome(holds=worst >= -tol, worst=worst, witness={"x": x[i], "a": a[i]})


def check_forward_condition(theta, pi, delta_cap, box, z_radius, n_samples=2048, seed=0, tol=TOL_MONO):
    """Monotonicity of the projected market-price-of-risk map.

    Tests (P((theta+z)/delta) - P((theta+zbar)/delta)) . Dtheta . (z - zbar) >= 0
    over sampled triples; failing triples are returned as witnesses.
    """
    if delta_cap <= 0:
        raise ValueError("delta_cap must be positive")
    x, z, zbar = _triples(box, z_radius, n_samples, seed)
    th = theta(x)
    p = project_convex(pi, (th + z) / delta_cap)
    pbar = project_convex(pi, (th + zbar) / delta_cap)
    jac = theta.jac(x)
    # row vector (p - pbar) times Dtheta times column (z - zbar)
    vals = np.einsum("ni,nij,nj->n", p - pbar, jac, z - zbar)
    i = int(np.argmin(vals))
    worst = float(vals[i])
    return CheckOutcome(
        holds=worst >= -tol,
        worst=worst,
        witness={"x": x[i], "z": z[i], "zbar": zbar[i]},
    )


def assemble_condition_report(spec, n_samples=2048, seed=0, tol=TOL_MONO):
    """Run all applicable checks on a problem and aggregate the verdicts."""
    dis = check_dissipativity(spec.b, spec.box, n_samples=n_samples, seed=seed)
    caps = compute_M(spec.driver, spec.box, n_samples=max(n_samples, 2048), seed=seed)
    delta_for_radius = dis.delta_hat if dis.delta_hat > 0 else 1.0
    z_radius = max(1.0, 2.0 * caps.M / delta_for_radius) if caps.M > 0 else 1.0
    mono = check_monotone_dxg(spec.driver, spec.box, z_radius, n_samples=n_samples, seed=seed, tol=tol)
    weak = check_weak_monotone_dxg(spec.driver, spec.box, z_radius, n_samples=n_samples, seed=seed, tol=tol)

    pts = box_probes(spec.box, n_samples, seed)
    zeros = np.zeros_like(pts)
    g0_sup = float(np.max(np.abs(spec.driver.g(pts, zeros))))
    h0_sup = float(np.max(np.abs(spec.driver.h(pts, zeros))))

    overall = bool(dis.holds and mono.holds and np.isfinite(g0_sup) and np.isfinite(h0_sup))
    return ConditionReport(
        delta_hat=dis.delta_hat,
        lipschitz_b=estimate_lipschitz_b(spec.b, spec.box, n_samples=n_samples, seed=seed),
        M=caps.M,
        M_prime=caps.M_prime,
        monotone_dxg=mono,
        weak_monotone=weak,
        h_lipschitz_in_x=caps.h_sup,
        dissipativity=dis.outcome(),
        g0_sup=g0_sup,
        h0_sup=h0_sup,
        overall=overall,
    )
