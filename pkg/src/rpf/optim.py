"""Unconstrained minimizers used for model fitting.

L-BFGS with a strong-Wolfe line search is the primary routine; Adam is the
fallback when the line search cannot make progress. Both work on flat
parameter vectors and call fun_grad(x) -> (value, gradient).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import line_search

from .errors import LineSearchFailure, NonFiniteLoss


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    n_iter: int
    converged: bool
    status: str


def _check_finite(f, it):
    if not np.isfinite(f):
        raise NonFiniteLoss(f"objective became {f} at iteration {it}")


def minimize_lbfgs(fun_grad, x0, max_iter=1000, history=10, grad_tol=1e-10,
                   step0=1.0, callback=None) -> OptimResult:
    """Two-loop-recursion L-BFGS with a strong-Wolfe line search.

    callback(it, f, x) runs after every accepted step; returning True stops
    the iteration ("stopped" status). Raises LineSearchFailure when neither
    the quasi-Newton direction nor steepest descent admits a Wolfe step.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    _check_finite(f, 0)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    status = "max_iter"
    it = 0

    def direction(g):
        if not s_hist:
            return -g
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = r * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
        z = gamma * q
        for (s, y, r), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = r * np.dot(y, z)
            z += (a - b) * s
        return -z

    def wolfe(xk, d, fk, gk, amax):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            alpha, _, _, f_new, _, _ = line_search(
                lambda z: fun_grad(z)[0],
                lambda z: fun_grad(z)[1],
                xk, d, gfk=gk, old_fval=fk, c1=1e-4, c2=0.9,
                maxiter=40, amax=amax,
            )
        return alpha, f_new

    while it < max_iter:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= grad_tol:
            status = "grad_tol"
            break
        it += 1
        d = direction(g)
        if np.dot(d, g) >= 0:  # not a descent direction; drop the memory
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
        amax = step0 * 1e6 if it == 1 else 1e6
        alpha, f_new = wolfe(x, d, f, g, amax)
        if alpha is None and s_hist:
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            alpha, f_new = wolfe(x, d, f, g, amax)
        if alpha is None:
            raise LineSearchFailure(
                f"no Wolfe step at iteration {it}", best=(x, f)
            )
        x_new = x + alpha * d
        f_new, g_new = fun_grad(x_new)
        _check_finite(f_new, it)
        s = x_new - x
        yv = g_new - g
        sy = float(np.dot(s, yv))
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(yv)) + 1e-300:
            s_hist.append(s); y_hist.append(yv); rho_hist.append(1.0 / sy)
            if len(s_hist) > history:
                s_hist.pop(0); y_hist.pop(0); rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        if callback is not None and callback(it, f, x):
            status = "stopped"
            break
    return OptimResult(x=x, fun=f, n_iter=it,
                       converged=status in ("grad_tol", "stopped"), status=status)


def minimize_adam(fun_grad, x0, lr=1e-3, max_iter=1000, grad_tol=1e-10,
                  beta1=0.9, beta2=0.999, eps=1e-8, callback=None) -> OptimResult:
    """Plain full-batch Adam."""
    x = np.asarray(x0, dtype=float).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    f, g = fun_grad(x)
    _check_finite(f, 0)
    status = "max_iter"
    it = 0
    while it < max_iter:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= grad_tol:
            status = "grad_tol"
            break
        it += 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1**it)
        vh = v / (1 - beta2**it)
        x = x - lr * mh / (np.sqrt(vh) + eps)
        f, g = fun_grad(x)
        _check_finite(f, it)
        if callback is not None and callback(it, f, x):
            status = "stopped"
            break
    return OptimResult(x=x, fun=f, n_iter=it,
                       converged=status in ("grad_tol", "stopped"), status=status)
