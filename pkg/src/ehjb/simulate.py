"""Monte-Carlo verification layer: paths, costs, reweighting, identities.

Paths are stepped with Euler-Maruyama.  Each path draws its Brownian
increments from its own counter-based stream keyed by (seed, path index),
so ensembles are reproducible regardless of how the path loop is
scheduled, and reductions are taken in fixed order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import PathEnsemble


@dataclass(frozen=True)
class FeedbackControl:
    """Bounded feedback map x -> alpha(x); the bound is checked at runtime."""

    fn: Callable
    bound: float

    def __call__(self, x):
        out = np.asarray(self.fn(x), dtype=float)
        worst = float(np.max(np.linalg.norm(out, axis=-1))) if out.size else 0.0
        if worst > self.bound * (1.0 + 1e-9) + 1e-12:
            raise ValueError(f"feedback exceeded its declared bound: {worst} > {self.bound}")
        return out


@dataclass
class CostEstimate:
    value: float
    std_error: float
    T: float
    n_paths: int
    dt: float
    excluded: int = 0

    def to_dict(self):
        return {
            "value": self.value,
            "std_error": self.std_error,
            "T": self.T,
            "n_paths": self.n_paths,
            "dt": self.dt,
            "excluded": self.excluded,
        }


def path_increments(seed, path_index, n_steps, dim, dt):
    """Brownian increments for one path from its dedicated Philox stream."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(path_index)))))
    return math.sqrt(dt) * gen.standard_normal((n_steps, dim))


def ensemble_increments(seed, n_paths, n_steps, dim, dt):
    out = np.empty((n_paths, n_steps, dim))
    for p in range(n_paths):
        out[p] = path_increments(seed, p, n_steps, dim, dt)
    return out


def _drift_fn(b, feedback):
    if feedback is None:
        return lambda x: np.asarray(b(x), dtype=float)
    return lambda x: np.asarray(b(x), dtype=float) + feedback(x)


def simulate_paths(b, feedback, x0, T, dt, n_paths, seed):
    """Euler-Maruyama ensemble for dX = (b(X) + alpha(X)) dt + dW.

    Deterministic in ``seed``.  A path that leaves the finite range is
    frozen where it blew up, marked dead, and counted.
    """
    if dt <= 0 or T < dt:
        raise ValueError("need dt > 0 and T >= dt")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    n_steps = int(round(T / dt))

    if n_paths == 1 and d == 1 and feedback is None and getattr(b, "eval_scalar", None) is not None:
        return _simulate_single_scalar(b, float(x0[0]), n_steps, dt, seed)

    dW = ensemble_increments(seed, n_paths, n_steps, d, dt)
    states = np.empty((n_paths, n_steps + 1, d))
    states[:, 0, :] = x0
    drift = _drift_fn(b, feedback)
    alive = np.ones(n_paths, dtype=bool)
    x = np.broadcast_to(x0, (n_paths, d)).copy()
    for k in range(n_steps):
        x = x + drift(x) * dt + dW[:, k, :]
        finite = np.all(np.isfinite(x), axis=-1)
        newly_dead = alive & ~finite
        if np.any(newly_dead):
            x[newly_dead] = states[newly_dead, k, :]
            alive &= finite
        states[:, k + 1, :] = x
    ens = PathEnsemble(states=states, brownian_increments=dW, dt=dt, seed=seed, alive=alive)
    ens.blowups = int(np.sum(~alive))
    return ens


def _simulate_single_scalar(b, x0, n_steps, dt, seed):
    """Float fast path for long single trajectories in one dimension."""
    dW = path_increments(seed, 0, n_steps, 1, dt)[:, 0]
    states = np.empty(n_steps + 1)
    states[0] = x0
    x = x0
    beval = b.eval_scalar
    blown = False
    for k in range(n_steps):
        x = x + beval(x) * dt + dW[k]
        if not math.isfinite(x):
            x = states[k]
            blown = True
        states[k + 1] = x
    ens = PathEnsemble(
        states=states[None, :, None],
        brownian_increments=dW[None, :, None],
        dt=dt,
        seed=seed,
        alive=np.array([not blown]),
    )
    ens.blowups = int(blown)
    return ens


def simulate_with_increments(b, feedback, x0, dt, increments):
    """Euler-Maruyama driven by caller-supplied increments (for refinement tests)."""
    n_paths, n_steps, d = increments.shape
    states = np.empty((n_paths, n_steps + 1, d))
    states[:, 0, :] = x0
    drift = _drift_fn(b, feedback)
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths, d)).copy()
    for k in range(n_steps):
        x = x + drift(x) * dt + increments[:, k, :]
        states[:, k + 1, :] = x
    return states


def coarsen_increments(increments, factor):
    """Sum consecutive groups of increments: the same Brownian path at a coarser dt."""
    n_paths, n_steps, d = increments.shape
    if n_steps % factor:
        raise ValueError("factor must divide the number of steps")
    return increments.reshape(n_paths, n_steps // factor, factor, d).sum(axis=2)


def check_exponential_ergodicity(b, delta_hat, pairs, T, dt, seed):
    """Shared-noise coupling test of the squared contraction bound.

    For each pair of starts, both trajectories see the same increments and
    |X_t - Xbar_t|^2 is compared against exp(-2 delta_hat t) |x - xbar|^2
    with multiplicative Euler slack 1 + 10 dt.
    """
    worst = 0.0
    n_steps = int(round(T / dt))
    times = dt * np.arange(n_steps + 1)
    decay = np.exp(-2.0 * delta_hat * times)
    for j, (x, xbar) in enumerate(pairs):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
        dW = path_increments(seed, j, n_steps, x.size, dt)
        states = simulate_with_increments(b, None, np.stack([x, xbar]), dt, np.stack([dW, dW]))
        gap2 = np.sum((states[0] - states[1]) ** 2, axis=-1)
        ratio = gap2 / (decay * float(np.sum((x - xbar) ** 2)))
        worst = max(worst, float(np.max(ratio)))
    tol = 1.0 + 10.0 * dt
    return {"holds": worst <= tol, "worst_ratio": worst}


# ---------------------------------------------------------------------------
# BSDE identity and ergodic averages

@dataclass
class BsdeResidualResult:
    residual: float
    clip_fraction: float
    warn: bool


def bsde_residual(report, spec, driver, path, increments, dt, t_grid=None):
    """Pathwise defect of the solution identity along one trajectory.

    With Y = u(X) and Z = v(X), checks
    Y_t = Y_T + int_t^T f(X, Z) ds - lambda (T - t) - int_t^T Z . dW
    at the requested times; integrals are left-endpoint sums matching the
    Euler chain.  Excursions outside the grid are clamped and counted.
    """
    states = np.asarray(path, dtype=float)
    if states.ndim == 2:
        states = states
    else:
        states = states.reshape(states.shape[-2], states.shape[-1])
    n_steps = increments.shape[0]
    u_path = report.u.interpolate(states)
    v_path = report.v.interpolate(states)
    clip = report.u.clip_fraction(states)
    f_path = np.asarray(driver.f(states, v_path), dtype=float)
    zdw = np.sum(v_path[:-1] * increments, axis=-1)

    # suffix sums: integral and stochastic integral from step k to the end
    f_cum = np.concatenate([[0.0], np.cumsum(f_path[:-1] * dt)])
    z_cum = np.concatenate([[0.0], np.cumsum(zdw)])
    if t_grid is None:
        t_grid = np.linspace(0, n_steps, 21).astype(int)[:-1]
    t_grid = np.asarray(t_grid, dtype=int)
    uT = u_path[-1]
    T = n_steps * dt
    resid = np.abs(
        u_path[t_grid]
        - uT
        - (f_cum[-1] - f_cum[t_grid])
        + report.lam * (T - t_grid * dt)
        + (z_cum[-1] - z_cum[t_grid])
    )
    return BsdeResidualResult(
        residual=float(np.max(resid)), clip_fraction=clip, warn=clip > 0.01
    )


def ergodic_lambda_check(report, spec, driver, T, dt, seed):
    """Long-run time average of f(X, v(X)) along one trajectory vs lambda.

    The first tenth of the horizon is discarded as burn-in; the standard
    error comes from batch means over 20 blocks.
    """
    ens = simulate_paths(spec.b, None, spec.x0, T, dt, 1, seed)
    states = ens.states[0]
    burn = states.shape[0] // 10
    xs = states[burn:]
    v = report.v.interpolate(xs)
    fvals = np.asarray(driver.f(xs, v), dtype=float)
    blocks = np.array_split(fvals, 20)
    means = np.array([blk.mean() for blk in blocks])
    lam_mc = float(fvals.mean())
    se = float(means.std(ddof=1) / math.sqrt(len(means)))
    return {"lambda_mc": lam_mc, "std_error": se, "lambda_solver": report.lam}


def ergodic_cost_mc(cost, b, feedback, x0, T, dt, n_paths, seed):
    """Ensemble estimate of the long-run average cost under a feedback.

    Each path contributes its time average of r(X, alpha(X)) after a 10%
    burn-in; value and standard error are taken across paths, with
    blown-up paths excluded and counted.
    """
    ens = simulate_paths(b, feedback, x0, T, dt, n_paths, seed)
    states = ens.states[:, :-1, :]
    burn = states.shape[1] // 10
    xs = states[:, burn:, :]
    flat = xs.reshape(-1, xs.shape[-1])
    acts = feedback(flat).reshape(xs.shape)
    rvals = np.asarray(cost.r(xs, acts), dtype=float)
    per_path = rvals.mean(axis=1)
    keep = ens.alive
    vals = per_path[keep]
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return CostEstimate(
        value=float(vals.mean()),
        std_error=se,
        T=T,
        n_paths=n_paths,
        dt=dt,
        excluded=int(np.sum(~keep)),
    )


def risk_sensitive_cost_mc(cost, delta_rs, b, feedback, x0, T, dt, n_paths, seed):
    """Exponential-functional cost (1 / (delta T)) log E exp(delta int r).

    Computed in shifted log space to avoid overflow; the standard error is
    a jackknife over paths (leave-one-out log-mean-exp).
    """
    if delta_rs <= 0:
        raise ValueError("delta_rs must be positive")
    ens = simulate_paths(b, feedback, x0, T, dt, n_paths, seed)
    states = ens.states[:, :-1, :]
    flat = states.reshape(-1, states.shape[-1])
    acts = feedback(flat).reshape(states.shape)
    rvals = np.asarray(cost.r(states, acts), dtype=float)
    keep = ens.alive
    expo = delta_rs * rvals[keep].sum(axis=1) * dt
    n = expo.size
    shift = float(np.max(expo))
    terms = np.exp(expo - shift)
    total = float(np.sum(terms))
    lse = shift + math.log(total / n)
    value = lse / (delta_rs * T)
    # leave-one-out estimates for the jackknife
    loo = shift + np.log(np.maximum(total - terms, 1e-300) / (n - 1))
    loo_vals = loo / (delta_rs * T)
    se = float(math.sqrt((n - 1) / n * np.sum((loo_vals - loo_vals.mean()) ** 2)))
    return CostEstimate(
        value=value, std_error=se, T=T, n_paths=n_paths, dt=dt, excluded=int(np.sum(~keep))
    )


# ---------------------------------------------------------------------------
# change of measure

@dataclass
class GirsanovWeights:
    weights: np.ndarray
    log_weights: np.ndarray


def girsanov_weights(alpha_path, increments, dt):
    """Per-path stochastic exponential exp(sum a . dW - 0.5 sum |a|^2 dt).

    Log weights are always returned alongside, so downstream code can stay
    in log space when the plain weights overflow.
    """
    alpha_path = np.asarray(alpha_path, dtype=float)
    increments = np.asarray(increments, dtype=float)
    if alpha_path.shape != increments.shape:
        raise ValueError("alpha_path and increments must have matching shapes")
    logw = np.sum(alpha_path * increments, axis=(1, 2)) - 0.5 * dt * np.sum(
        alpha_path**2, axis=(1, 2)
    )
    with np.errstate(over="ignore"):
        w = np.exp(logw)
    return GirsanovWeights(weights=w, log_weights=logw)


@dataclass
class WeakStrongReport:
    j_weak: float
    j_strong: float
    diff: float
    joint_std_error: float
    ess: float
    warn: bool

    def to_dict(self):
        return {
            "j_weak": self.j_weak,
            "j_strong": self.j_strong,
            "diff": self.diff,
            "joint_std_error": self.joint_std_error,
            "ess": self.ess,
            "warn": self.warn,
        }


def weak_strong_compare(cost, b, feedback, x0, T, dt, n_paths, seed):
    """Cost of a feedback computed two ways: reweighting vs direct simulation.

    The weak estimate reweights uncontrolled paths of the base diffusion by
    the stochastic exponential of the feedback along those paths; the
    strong estimate simulates the controlled dynamics.  Both use the same
    increments (paired seeds), so with alpha = 0 the two sides coincide
    exactly and the reported standard error is that of the paired
    per-path difference.  No burn-in: this is a fixed-horizon identity.
    """
    unc = simulate_paths(b, None, x0, T, dt, n_paths, seed)
    con = simulate_paths(b, feedback, x0, T, dt, n_paths, seed)

    xs_u = unc.states[:, :-1, :]
    flat_u = xs_u.reshape(-1, xs_u.shape[-1])
    acts_u = feedback(flat_u).reshape(xs_u.shape)
    r_u = np.asarray(cost.r(xs_u, acts_u), dtype=float).mean(axis=1)
    gw = girsanov_weights(acts_u, unc.brownian_increments, dt)

    xs_c = con.states[:, :-1, :]
    flat_c = xs_c.reshape(-1, xs_c.shape[-1])
    acts_c = feedback(flat_c).reshape(xs_c.shape)
    r_c = np.asarray(cost.r(xs_c, acts_c), dtype=float).mean(axis=1)

    weak_terms = gw.weights * r_u
    j_weak = float(weak_terms.mean())
    j_strong = float(r_c.mean())
    paired = weak_terms - r_c
    se = float(paired.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    wsum = float(np.sum(gw.weights))
    ess = wsum**2 / float(np.sum(gw.weights**2)) if wsum > 0 else 0.0
    return WeakStrongReport(
        j_weak=j_weak,
        j_strong=j_strong,
        diff=abs(j_weak - j_strong),
        joint_std_error=se,
        ess=ess,
        warn=ess < 0.05 * n_paths,
    )
