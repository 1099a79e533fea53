"""Large-deviations cost of moving with velocity y at state x.

L(x, y) is the Legendre transform of p -> sum_j beta_j(x) (e^{<p,h_j>} - 1).
Equivalently it is the minimum of the relative-entropy-like functional

    l~(mu, x) = sum_j { beta_j(x) - mu_j + mu_j log(mu_j / beta_j(x)) }

over jump intensities mu >= 0 with sum_j mu_j h_j = y and mu_j > 0 only where
beta_j(x) > 0.  The SIS case has a closed form; the general case is solved as
a constrained minimization (and, vectorized for the dynamic program, through
the stationarity conditions of its dual).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad
from scipy.optimize import linprog

from .errors import BoundaryXError
from .models import CompartmentalModel

_MU_MIN = 1e-12


# ---------------------------------------------------------------------------
# SIS closed form
# ---------------------------------------------------------------------------

def _theta_tilde(x, y, beta, gamma):
    """Optimal exponential tilt; rationalized branch for y < 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    b1 = beta * x * (1.0 - x)
    root = np.sqrt(y * y + 4.0 * beta * gamma * x * x * (1.0 - x))
    pos = (y + root) / (2.0 * b1)
    with np.errstate(divide="ignore", invalid="ignore"):
        neg = 2.0 * gamma * x / (root - y)
    return np.where(y >= 0, pos, neg)


def lagrangian_sis(x, y, beta: float, gamma: float):
    """Closed-form L(x, y) for the SIS model, x strictly inside (0, 1)."""
    x_arr = np.asarray(x, dtype=float)
    if np.any((x_arr <= 0.0) | (x_arr >= 1.0)):
        raise BoundaryXError("closed form is valid for x in (0, 1) only")
    y = np.asarray(y, dtype=float)
    th = _theta_tilde(x_arr, y, beta, gamma)
    out = (y * np.log(th)
           - beta * x_arr * (1.0 - x_arr) * (th - 1.0)
           - gamma * x_arr * (1.0 / th - 1.0))
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def sis_lagrangian_ext(x, y, beta: float, gamma: float):
    """SIS cost including the x in {0, 1} boundary, via the intensity form.

    At x = 0 all rates vanish: only y = 0 is free, anything else costs +inf.
    At x = 1 only recovery is active: y <= 0 costs gamma - mu + mu log(mu/gamma)
    with mu = -y, positive y is infeasible.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x, y = np.broadcast_arrays(x, y)
    out = np.empty(x.shape)
    interior = (x > 0.0) & (x < 1.0)
    if interior.any():
        out[interior] = lagrangian_sis(x[interior], y[interior], beta, gamma)
    at0 = x <= 0.0
    out[at0] = np.where(y[at0] == 0.0, 0.0, np.inf)
    at1 = x >= 1.0
    if at1.any():
        mu = -y[at1]
        with np.errstate(divide="ignore", invalid="ignore"):
            val = gamma - mu + mu * np.log(mu / gamma)
        val = np.where(mu == 0.0, gamma, val)
        out[at1] = np.where(mu >= 0.0, val, np.inf)
    return out


# ---------------------------------------------------------------------------
# intensity functional
# ---------------------------------------------------------------------------

def ell_tilde(mu: np.ndarray, beta: np.ndarray) -> float:
    """sum_j beta_j - mu_j + mu_j log(mu_j/beta_j), with mu log mu -> 0 at 0."""
    mu = np.asarray(mu, dtype=float)
    beta = np.asarray(beta, dtype=float)
    total = 0.0
    for m, b in zip(mu, beta):
        if m <= 0.0:
            total += b
        elif b <= 0.0:
            return math.inf
        else:
            total += b - m + m * math.log(m / b)
    return total


def _nullspace(A: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(A)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0] if s.size else 1.0)))
    return vt[rank:].T.copy()


def _feasible_interior_point(H: np.ndarray, y: np.ndarray,
                             beta: np.ndarray) -> Optional[np.ndarray]:
    """Strictly positive mu with H mu = y, or None when B_{x,y} is empty.

    Tries the least-squares point nearest the drift intensities first; falls
    back to a max-margin linear program.
    """
    d, k = H.shape
    mu_ls, residual, *_ = np.linalg.lstsq(H, y, rcond=None)
    if np.linalg.norm(H @ mu_ls - y) > 1e-9 * (1.0 + np.linalg.norm(y)):
        return None
    Z = _nullspace(H)
    if Z.shape[1]:
        w, *_ = np.linalg.lstsq(Z, beta - mu_ls, rcond=None)
        guess = mu_ls + Z @ w
        if np.min(guess) > 1e-9:
            return guess
    elif np.min(mu_ls) >= 0.0:
        return np.maximum(mu_ls, 0.0)
    # max t subject to H mu = y, mu >= t, 0 <= t <= 1
    c = np.zeros(k + 1)
    c[-1] = -1.0
    A_eq = np.hstack([H, np.zeros((d, 1))])
    A_ub = np.hstack([-np.eye(k), np.ones((k, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(k), A_eq=A_eq, b_eq=y,
                  bounds=[(0, None)] * k + [(0, 1)], method="highs")
    if not res.success:
        return None
    return res.x[:k]


def lagrangian_general(model: CompartmentalModel, x, y,
                       mu_min: float = _MU_MIN, tol: float = 1e-11,
                       max_iter: int = 200) -> tuple[float, np.ndarray]:
    """(L(x, y), minimizing mu) by constrained minimization of ell_tilde.

    The d linear constraints are eliminated through a null-space basis and the
    reduced strictly convex problem is solved by damped Newton iterations kept
    interior by a fraction-to-boundary rule with floor ``mu_min``.  Returns
    (+inf, zeros) when no admissible intensity vector exists.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    beta_full = np.maximum(model.beta(x), 0.0)
    H_full = model.jump_directions.astype(float)
    k = model.jump_count
    active = beta_full > 0.0
    mu_out = np.zeros(k)

    if not active.any():
        if np.linalg.norm(y) <= 1e-12:
            return 0.0, mu_out
        return math.inf, mu_out

    H = H_full[:, active]
    beta = beta_full[active]
    mu0 = _feasible_interior_point(H, y, beta)
    if mu0 is None:
        return math.inf, mu_out
    mu0 = np.maximum(mu0, mu_min)

    Z = _nullspace(H)
    if Z.shape[1] == 0:
        # constraints pin mu completely
        mu_proj, *_ = np.linalg.lstsq(H, y, rcond=None)
        if np.min(mu_proj) < -1e-9:
            return math.inf, mu_out
        mu_proj = np.maximum(mu_proj, 0.0)
        mu_out[active] = mu_proj
        return ell_tilde(mu_proj, beta), mu_out

    mu = mu0.copy()

    def value(m):
        return ell_tilde(m, beta)

    F = value(mu)
    for _ in range(max_iter):
        g = np.log(mu / beta)
        grad = Z.T @ g
        Hess = Z.T @ ((1.0 / mu)[:, None] * Z)
        try:
            dw = np.linalg.solve(Hess, -grad)
        except np.linalg.LinAlgError:
            dw = np.linalg.lstsq(Hess, -grad, rcond=None)[0]
        dmu = Z @ dw
        decrement = -float(grad @ dw)
        if decrement <= tol:
            break
        # fraction to boundary: keep mu >= mu_min
        shrink = dmu < 0
        t_max = 1.0
        if shrink.any():
            t_max = min(1.0, float(np.min(0.995 * (mu[shrink] - mu_min) / (-dmu[shrink]))))
        t = max(t_max, 0.0)
        accepted = False
        for _ in range(50):
            if t <= 0.0:
                break
            mu_try = mu + t * dmu
            if np.min(mu_try) >= mu_min:
                F_try = value(mu_try)
                if F_try <= F - 0.25 * t * decrement + 1e-15:
                    mu, F = mu_try, F_try
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
    mu_out[active] = mu
    return F, mu_out


# ---------------------------------------------------------------------------
# batched evaluation through the dual stationarity conditions
# ---------------------------------------------------------------------------

def lagrangian_batch(H: np.ndarray, beta_mat: np.ndarray, Y: np.ndarray,
                     tol: float = 1e-10, max_iter: int = 120,
                     p_cap: float = 200.0) -> tuple[np.ndarray, np.ndarray]:
    """L(x_i, y_i) for stacked problems sharing the jump matrix ``H``.

    Solves sup_p <p, y> - sum_j beta_j (e^{<p, h_j>} - 1) by damped Newton
    ascent (d unknowns per problem), then evaluates ell_tilde at the recovered
    minimizer mu_j = beta_j e^{<p, h_j>}.  Problems whose iterates escape
    |p| > p_cap or fail to converge are reported as +inf (empty B_{x,y}).

    Returns (values (m,), mu_hat (m, k)).
    """
    H = np.asarray(H, dtype=float)
    d, k = H.shape
    beta_mat = np.asarray(beta_mat, dtype=float)
    Y = np.asarray(Y, dtype=float)
    m = Y.shape[0]

    p = np.zeros((m, d))
    done = np.zeros(m, dtype=bool)
    diverged = np.zeros(m, dtype=bool)
    a0 = beta_mat.sum(axis=1)
    scale = 1.0 + a0 + np.abs(Y).max(axis=1)

    def dual_value(pp, bb, yy):
        eta = np.clip(pp @ H, -700.0, 700.0)
        return (pp * yy).sum(axis=1) - (bb * np.expm1(eta)).sum(axis=1)

    idx = np.arange(m)
    for _ in range(max_iter):
        act = idx[~done & ~diverged]
        if act.size == 0:
            break
        pa = p[act]
        ba = beta_mat[act]
        ya = Y[act]
        eta = np.clip(pa @ H, -700.0, 700.0)
        w = ba * np.exp(eta)
        grad = ya - w @ H.T
        gnorm = np.abs(grad).max(axis=1)
        newly = gnorm <= tol * scale[act]
        done[act[newly]] = True
        run = ~newly
        if not run.any():
            continue
        sub = act[run]
        pa, ba, ya, w, grad = pa[run], ba[run], ya[run], w[run], grad[run]
        Hpos = np.einsum("mj,aj,bj->mab", w, H, H)
        tr = np.trace(Hpos, axis1=1, axis2=2)
        Hpos += (1e-13 * (1.0 + tr))[:, None, None] * np.eye(d)
        delta = np.linalg.solve(Hpos, grad[:, :, None])[:, :, 0]
        g0 = dual_value(pa, ba, ya)
        slope = (grad * delta).sum(axis=1)
        # the dual value cannot improve beyond float resolution: converged
        flat = slope <= 1e-15 * (1.0 + np.abs(g0))
        done[sub[flat]] = True
        eps_ls = 1e-14 * (1.0 + np.abs(g0))
        t = np.ones(len(sub))
        accepted = flat.copy()
        for _ in range(40):
            trial = pa + t[:, None] * delta
            ok = dual_value(trial, ba, ya) >= g0 + 0.25 * t * slope - eps_ls
            ok &= ~accepted
            pa[ok] = trial[ok]
            accepted |= ok
            if accepted.all():
                break
            t[~accepted] *= 0.5
        p[sub] = pa
        esc = np.abs(pa).max(axis=1) > p_cap
        diverged[sub[esc]] = True

    eta = np.clip(p @ H, -700.0, 700.0)
    w = beta_mat * np.exp(eta)
    # the dual value; equals ell_tilde at the recovered minimizer mu = w up to
    # the constraint residual and is first-order flat in p at the optimum
    vals = (p * Y).sum(axis=1) - (beta_mat * np.expm1(eta)).sum(axis=1)
    vals = np.maximum(vals, 0.0)
    bad = diverged | ~done
    vals[bad] = np.inf
    w[bad] = 0.0
    return vals, w


# ---------------------------------------------------------------------------
# evaluator facade and the 1-D quadrature oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LagrangianEvaluator:
    """Uniform access to L(x, y): SIS closed form or the general minimization."""

    model: CompartmentalModel
    mode: str = "general_mu"          # "sis_closed_form" | "general_mu"
    mu_min: float = _MU_MIN

    def __post_init__(self):
        if self.mode not in ("sis_closed_form", "general_mu"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "sis_closed_form" and self.model.name != "sis":
            raise ValueError("closed form applies to the SIS model only")

    def __call__(self, x, y) -> float:
        if self.mode == "sis_closed_form":
            p = self.model.params
            return float(sis_lagrangian_ext(x, y, p["beta"], p["gamma"])[0])
        val, _ = lagrangian_general(self.model, x, y, mu_min=self.mu_min)
        return val

    def minimizer(self, x, y) -> tuple[float, np.ndarray]:
        return lagrangian_general(self.model, x, y, mu_min=self.mu_min)


def quasipotential_1d_oracle(beta_up: Callable[[float], float],
                             beta_down: Callable[[float], float],
                             x_star: float, target: float = 0.0) -> float:
    """Independent 1-D quasi-potential: integral of log(beta_up/beta_down).

    Integrates from ``target`` to ``x_star`` with a tiny inset at the endpoints
    where the log ratio may be singular (the singularity is integrable, the
    dropped mass is O(eps log eps)).
    """
    lo, hi = (target, x_star) if target <= x_star else (x_star, target)
    eps = 1e-10 * max(1.0, hi - lo)

    def integrand(u):
        return math.log(beta_up(u) / beta_down(u))

    val, _ = quad(integrand, lo + eps, hi - eps, limit=200)
    return val
