"""Driver constructors: control Hamiltonian, risk-sensitive, forward-factor.

The control Hamiltonian is the infimum over actions of a . z + r(x, a),
computed by damped Newton iteration; the risk-sensitive variant adds a
quadratic term in z, and the forward-factor driver is built from a market
price of risk field and a closed convex constraint set via its projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConvexSet, DriverSplit, RunningCost, VectorField, finite_diff_gradient


class MinimizationError(RuntimeError):
    """Newton iteration failed to reach the gradient tolerance."""

    def __init__(self, a_last, grad_norm, iters):
        super().__init__(
            f"action minimization stalled after {iters} iterations "
            f"(gradient norm {grad_norm:.3e})"
        )
        self.a_last = a_last
        self.grad_norm = grad_norm
        self.iters = iters


def _solve_newton_step(hess, grad):
    """Solve H p = -grad for batches, closed form for d <= 2."""
    d = grad.shape[-1]
    if d == 1:
        return -grad / hess[..., 0, 0][..., None]
    if d == 2:
        a = hess[..., 0, 0]
        b = hess[..., 0, 1]
        c = hess[..., 1, 0]
        e = hess[..., 1, 1]
        det = a * e - b * c
        p0 = -(e * grad[..., 0] - b * grad[..., 1]) / det
        p1 = -(-c * grad[..., 0] + a * grad[..., 1]) / det
        return np.stack([p0, p1], axis=-1)
    return -np.linalg.solve(hess, grad[..., None])[..., 0]


def _minimize_batch(cost, x, z, tol, max_iter):
    """Damped Newton on a -> a . z + r(x, a), vectorized over points.

    Uniform convexity makes the minimizer unique; Armijo backtracking from
    a = 0 keeps the iteration globally convergent.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    n, d = x.shape
    a = np.zeros_like(z)

    def phi(act):
        return np.sum(act * z, axis=-1) + cost.r(x, act)

    val = phi(a)
    iters = np.zeros(n, dtype=int)
    for it in range(max_iter):
        grad = z + np.asarray(cost.grad_a(x, a))
        gn = np.linalg.norm(grad, axis=-1)
        active = gn > tol
        if not np.any(active):
            break
        hess = np.asarray(cost.hess_a(x, a), dtype=float).reshape(n, d, d)
        step = _solve_newton_step(hess, grad)
        t = np.where(active, 1.0, 0.0)
        slope = np.sum(grad * step, axis=-1)
        # the noise term keeps backtracking from rejecting steps whose
        # predicted decrease sits below evaluation roundoff
        noise = 1e-12 * (1.0 + np.abs(val))
        for _ in range(40):
            cand = a + t[..., None] * step
            cval = phi(cand)
            ok = (cval <= val + 1e-4 * t * slope + noise) | ~active
            if np.all(ok):
                break
            t = np.where(ok, t, 0.5 * t)
        a = a + t[..., None] * step
        val = phi(a)
        iters = iters + active.astype(int)
    else:
        grad = z + np.asarray(cost.grad_a(x, a))
        gn = np.linalg.norm(grad, axis=-1)
        if np.any(gn > tol):
            i = int(np.argmax(gn))
            raise MinimizationError(a[i], float(gn[i]), max_iter)
    return a, val, iters


def minimize_h(cost, x, z, newton_tol=1e-10, newton_max_iter=100):
    """Minimize a . z + r(x, a) over actions at a single point.

    Returns ``(a_hat, H, iters)`` where H is the attained infimum and the
    first-order condition |z + grad_a r(x, a_hat)| <= newton_tol holds.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    z = np.asarray(z, dtype=float).reshape(1, -1)
    a, val, iters = _minimize_batch(cost, x, z, newton_tol, newton_max_iter)
    return a[0], float(val[0]), int(iters[0])


@dataclass(frozen=True)
class HamiltonianDriver:
    """Control Hamiltonian H(x, z) = inf_a (a . z + r(x, a))."""

    cost: RunningCost
    newton_tol: float = 1e-10
    newton_max_iter: int = 100
    a_hat_cache_policy: str = "none"

    def hamiltonian(self, x, z):
        pts, z = _flat_args(x, z)
        _, val, _ = _minimize_batch(self.cost, pts, z, self.newton_tol, self.newton_max_iter)
        return val.reshape(np.shape(x)[:-1])

    def a_hat(self, x, z):
        pts, zf = _flat_args(x, z)
        a, _, _ = _minimize_batch(self.cost, pts, zf, self.newton_tol, self.newton_max_iter)
        return a.reshape(np.shape(z))


def _flat_args(x, z):
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    d = x.shape[-1]
    return x.reshape(-1, d), np.broadcast_to(z, x.shape).reshape(-1, d)


def build_control_driver(cost, newton_tol=1e-10, newton_max_iter=100):
    """Driver split with g = Hamiltonian, h = 0.

    Partials are left to the finite-difference fallback so the solver path
    never depends on analytic cost derivatives; the envelope identity
    dz H = a_hat is kept as a test, not an implementation shortcut.
    """
    ham = HamiltonianDriver(cost=cost, newton_tol=newton_tol, newton_max_iter=newton_max_iter)
    zero = lambda x, z: np.zeros(np.shape(x)[:-1])
    dzero = lambda x, z: np.zeros(np.shape(x))
    return DriverSplit(g=ham.hamiltonian, h=zero, dx_h=dzero)


def build_risk_sensitive_driver(cost, delta_rs, newton_tol=1e-10, newton_max_iter=100):
    """Control driver plus (delta_rs / 2) |z|^2 in the g component.

    The added term does not depend on x, so the x-partial is wired to the
    verbatim x-partial of the plain control driver; the two drivers agree
    bitwise there by construction.
    """
    if delta_rs < 0:
        raise ValueError("delta_rs must be nonnegative")
    base = build_control_driver(cost, newton_tol=newton_tol, newton_max_iter=newton_max_iter)

    def g(x, z):
        z = np.asarray(z, dtype=float)
        return base.g(x, z) + 0.5 * delta_rs * np.sum(z * z, axis=-1)

    def dz_f(x, z):
        z = np.asarray(z, dtype=float)
        return np.asarray(base.dzf(x, z)) + delta_rs * z

    return DriverSplit(g=g, h=base.h, dx_g=base.dxg, dx_h=base.dx_h, dz_f=dz_f)


def hamiltonian_mixed_partial(cost, x, a):
    """The d x d matrix -mixed_xa(r) . hess_a(r)^{-1} at (x, a).

    Equals the mixed partial dz dx of the Hamiltonian evaluated at the
    optimal action, which is what the monotonicity checks see.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    a = np.asarray(a, dtype=float).reshape(1, -1)
    d = x.shape[-1]
    mixed = np.asarray(cost.mixed_xa(x, a), dtype=float).reshape(d, d)
    hess = np.asarray(cost.hess_a(x, a), dtype=float).reshape(d, d)
    if abs(np.linalg.det(hess)) < 1e-12:
        raise ArithmeticError(f"singular action Hessian at (x={x[0]}, a={a[0]})")
    return -mixed @ np.linalg.inv(hess)


# ---------------------------------------------------------------------------
# convex projections and the forward-factor driver

def project_convex(pi, x):
    """Euclidean projection onto a closed convex set, closed form per kind."""
    x = np.asarray(x, dtype=float)
    if pi.kind == "whole_space":
        return x.copy()
    if pi.kind == "box":
        return np.clip(x, pi.lo, pi.hi)
    if pi.kind == "ball":
        rel = x - pi.center
        norm = np.linalg.norm(rel, axis=-1, keepdims=True)
        scale = np.where(norm > pi.radius, pi.radius / np.maximum(norm, 1e-300), 1.0)
        return pi.center + rel * scale
    if pi.kind == "halfspace":
        nn = float(np.dot(pi.normal, pi.normal))
        excess = np.maximum(np.sum(x * pi.normal, axis=-1, keepdims=True) - pi.offset, 0.0)
        return x - (excess / nn) * pi.normal
    raise ValueError(f"unknown convex set kind {pi.kind!r}")


@dataclass(frozen=True)
class ForwardDriver:
    """Driver from the factor-form construction with constraint set Pi."""

    theta: VectorField
    pi: ConvexSet
    delta_cap: float

    def __post_init__(self):
        if self.delta_cap <= 0:
            raise ValueError("delta_cap must be positive")

    def value(self, x, z):
        z = np.asarray(z, dtype=float)
        th = self.theta(x)
        y = (th + z) / self.delta_cap
        gap = y - project_convex(self.pi, y)
        dist2 = np.sum(gap * gap, axis=-1)
        return (
            0.5 * self.delta_cap**2 * dist2
            - np.sum(z * th, axis=-1)
            + 0.5 * np.sum(th * th, axis=-1)
        )

    def x_gradient(self, x, z):
        z = np.asarray(z, dtype=float)
        th = self.theta(x)
        y = (th + z) / self.delta_cap
        p = project_convex(self.pi, y)
        jac = self.theta.jac(x)
        # transpose of the row formula: Dtheta^T (2 theta - delta * P(y))
        return np.einsum("...ji,...j->...i", jac, 2.0 * th - self.delta_cap * p)

    def z_gradient(self, x, z):
        z = np.asarray(z, dtype=float)
        th = self.theta(x)
        y = (th + z) / self.delta_cap
        gap = y - project_convex(self.pi, y)
        return self.delta_cap * gap - th


def build_forward_driver(theta, pi, delta_cap):
    """Driver split with the whole forward driver as g and h = 0."""
    fwd = ForwardDriver(theta=theta, pi=pi, delta_cap=delta_cap)
    zero = lambda x, z: np.zeros(np.shape(x)[:-1])
    dzero = lambda x, z: np.zeros(np.shape(x))
    return DriverSplit(g=fwd.value, h=zero, dx_g=fwd.x_gradient, dx_h=dzero, dz_f=fwd.z_gradient)


def forward_driver_x_gradient(theta, pi, delta_cap, x, z):
    """x-gradient of the forward driver at one point (closed form)."""
    return ForwardDriver(theta=theta, pi=pi, delta_cap=delta_cap).x_gradient(x, z)
