"""Box-constrained maximisation for M-steps.

A projected limited-memory BFGS with backtracking (Armijo) line search.
Iterates never leave the box, nor the optional localisation ball, and the
objective never decreases between accepted iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

__all__ = ["OptConfig", "OptResult", "maximize", "project", "projected_gradient"]


@dataclass
class OptConfig:
    """Settings for :func:`maximize`.

    Parameters
    ----------
    bounds : array of shape (d, 2)
        Lower and upper bound per coordinate.
    max_iters, grad_tol, step_tol : stopping rules.
    restarts : int
        Extra deterministic Latin-hypercube jittered starts.
    localization : (center, radius), optional
        Keeps every iterate inside the ball ``||theta - center|| <= radius``.
    scale : array, optional
        Typical magnitude per coordinate; the solver works in ``theta / scale``.
    """

    bounds: np.ndarray
    max_iters: int = 200
    grad_tol: float = 1e-6
    step_tol: float = 1e-12
    ftol: float = 1e-13
    restarts: int = 0
    jitter: float = 0.1
    seed: int = 0
    memory: int = 10
    localization: Optional[tuple] = None
    scale: Optional[np.ndarray] = None

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2:
            raise ValueError("bounds must have shape (d, 2)")
        if np.any(b[:, 0] >= b[:, 1]):
            bad = int(np.flatnonzero(b[:, 0] >= b[:, 1])[0])
            raise ValueError(f"bounds require lo < hi (coordinate {bad})")
        if not (self.grad_tol > 0 and self.step_tol > 0):
            raise ValueError("tolerances must be positive")
        self.bounds = b
        if self.localization is not None:
            c, r = self.localization
            c = np.asarray(c, dtype=float)
            if np.any(c < b[:, 0]) or np.any(c > b[:, 1]) or not r > 0:
                raise ValueError("localization centre must lie in the box and radius be positive")
            self.localization = (c, float(r))


@dataclass
class OptResult:
    theta_hat: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    projected_grad_norm: float
    n_evals: int = 0
    message: str = ""
    path: list = field(default_factory=list)


def project(theta, bounds, localization=None):
    """Clip to the box, then pull radially toward the localisation centre."""
    x = np.clip(theta, bounds[:, 0], bounds[:, 1])
    if localization is not None:
        c, r = localization
        d = np.linalg.norm(x - c)
        if d > r:
            x = c + (x - c) * (r / d)
            x = np.clip(x, bounds[:, 0], bounds[:, 1])
    return x


def projected_gradient(theta, grad, bounds):
    """``P(theta + grad) - theta``: zero exactly at a box-constrained stationary point."""
    return np.clip(theta + grad, bounds[:, 0], bounds[:, 1]) - theta


def _solve(fun, x0, cfg, scale):
    lo, hi = cfg.bounds[:, 0] / scale, cfg.bounds[:, 1] / scale
    ub = np.column_stack([lo, hi])
    loc = None
    if cfg.localization is not None:
        c, r = cfg.localization
        if np.allclose(scale, scale[0]):
            loc = (c / scale, r / scale[0])
    n_evals = 0

    def f(u):
        nonlocal n_evals
        n_evals += 1
        v, g = fun(u * scale)
        return float(v), np.asarray(g, dtype=float) * scale

    def proj(u):
        if loc is not None or cfg.localization is None:
            return project(u, ub, loc)
        return project(u * scale, cfg.bounds, cfg.localization) / scale

    u = proj(np.asarray(x0, dtype=float) / scale)
    val, g = f(u)
    if not np.isfinite(val) or not np.all(np.isfinite(g)):
        raise FloatingPointError("objective is not finite at the initial point")
    S, Y = [], []
    path = [val]
    converged = False
    msg = "max_iters reached"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        pg = projected_gradient(u, g, ub)
        if np.linalg.norm(pg) < cfg.grad_tol:
            converged, msg = True, "projected gradient below tolerance"
            it -= 1
            break
        at_lo = (u <= lo) & (g < 0)
        at_hi = (u >= hi) & (g > 0)
        free = ~(at_lo | at_hi)
        d = _two_loop(np.where(free, g, 0.0), S, Y)
        d = np.where(free, d, 0.0)
        if not np.dot(d, g) > 0:
            S, Y = [], []
            d = np.where(free, g, 0.0)
        step = 1.0 if S else min(1.0, 1.0 / max(np.linalg.norm(d), 1e-12))
        accepted = False
        for _ in range(60):
            un = proj(u + step * d)
            if np.array_equal(un, u):
                break
            vn, gn = f(un)
            if np.isfinite(vn) and np.all(np.isfinite(gn)) and vn >= val + 1e-4 * np.dot(g, un - u):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if S:
                S, Y = [], []
                continue
            converged = np.linalg.norm(pg) < np.sqrt(cfg.grad_tol)
            msg = "line search failed"
            break
        s = un - u
        y = g - gn  # gradient difference of the minimised function -f
        if np.dot(s, y) > 1e-12 * np.dot(s, s):
            S.append(s)
            Y.append(y)
            if len(S) > cfg.memory:
                S.pop(0)
                Y.pop(0)
        small_step = np.linalg.norm(s) <= cfg.step_tol * (1.0 + np.linalg.norm(u))
        small_f = abs(vn - val) <= cfg.ftol * (1.0 + abs(val))
        u, val, g = un, vn, gn
        path.append(val)
        if small_step or small_f:
            pgn = np.linalg.norm(projected_gradient(u, g, ub))
            converged = pgn < max(cfg.grad_tol, 1e-3)
            msg = "step below tolerance" if small_step else "objective change below tolerance"
            break
    # report the projected gradient in the caller's coordinates
    pgn = float(np.linalg.norm(projected_gradient(u * scale, g / scale, cfg.bounds)))
    return OptResult(u * scale, val, converged, it, pgn, n_evals, msg, path)


def _two_loop(g, S, Y):
    """L-BFGS ascent direction for the gradient ``g`` of the maximised function."""
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if S:
        q *= np.dot(S[-1], Y[-1]) / np.dot(Y[-1], Y[-1])
    for (s, y), a in zip(zip(S, Y), reversed(alphas)):
        rho = 1.0 / np.dot(y, s)
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def maximize(objective: Callable, cfg: OptConfig, init) -> OptResult:
    """Maximise ``objective(theta) -> (value, gradient)`` over the box.

    Deterministic for identical inputs.  With ``cfg.restarts > 0`` extra
    starts are drawn from a seeded Latin hypercube around ``init`` and the
    best result is returned.
    """
    init = np.asarray(init, dtype=float)
    if init.shape != (cfg.bounds.shape[0],):
        raise ValueError("init has the wrong dimension")
    if np.any(init < cfg.bounds[:, 0]) or np.any(init > cfg.bounds[:, 1]):
        raise ValueError("init must lie within the bounds")
    scale = np.ones_like(init) if cfg.scale is None else np.asarray(cfg.scale, dtype=float)
    best = _solve(objective, init, cfg, scale)
    if cfg.restarts > 0:
        width = cfg.bounds[:, 1] - cfg.bounds[:, 0]
        width = np.where(np.isfinite(width), width, np.maximum(np.abs(init), 1.0))
        lhs = qmc.LatinHypercube(d=init.size, seed=cfg.seed).random(cfg.restarts)
        base_val = best.loglik
        improved = False
        for row in lhs:
            start = project(init + (row - 0.5) * cfg.jitter * width, cfg.bounds, cfg.localization)
            try:
                res = _solve(objective, start, cfg, scale)
            except FloatingPointError:
                continue
            if res.loglik > best.loglik:
                improved = improved or res.loglik > base_val
                best = res
        if not improved and not best.converged:
            best.message = "no restart improved on the initial solve; " + best.message
    return best
