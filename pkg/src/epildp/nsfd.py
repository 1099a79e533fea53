"""Nonstandard finite-difference integration of the deterministic limit.

The ODE is written as dZ/dt = A(Z) Z + f with a Metzler matrix A; the scheme
(I - psi(h) A(Z^m)) Z^{m+1} = Z^m + psi(h) f keeps the exact fixed points and
their local stability for every step size, with the denominator function
psi(h) = phi(Q h) / Q.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BlowupError, DomainError, NonHyperbolicError, NotBistableError, SingularSystemError
from .models import (CompartmentalModel, Equilibrium, Trajectory, default_seed_grid,
                     find_equilibria, siv_from_iv, siv_to_iv)

_HYPERBOLIC_TOL = 1e-9


# ---------------------------------------------------------------------------
# Metzler forms
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MetzlerForm:
    """dZ/dt = A(Z) Z + f with nonnegative off-diagonal A on the domain."""

    A: Callable[[np.ndarray], np.ndarray]
    f: np.ndarray
    model: CompartmentalModel
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    default_Q: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float))

    @property
    def dimension(self) -> int:
        return self.f.shape[0]

    def rhs(self, z: np.ndarray) -> np.ndarray:
        return self.A(z) @ z + self.f

    def rhs_jacobian(self, z: np.ndarray) -> np.ndarray:
        if self.jacobian is not None:
            return self.jacobian(z)
        d = self.dimension
        J = np.empty((d, d))
        for i in range(d):
            h = 1e-6 * max(1.0, abs(z[i]))
            zp, zm = np.array(z, dtype=float), np.array(z, dtype=float)
            zp[i] += h
            zm[i] -= h
            J[:, i] = (self.rhs(zp) - self.rhs(zm)) / (2 * h)
        return J


def metzler_sis(beta: float = 1.5, gamma: float = 1.0) -> MetzlerForm:
    """SIS written as A(Z) Z with A(Z) = -beta Z + beta - gamma (f = 0)."""
    from .models import sis

    def A(z):
        return np.array([[-beta * z[0] + beta - gamma]])

    def jac(z):
        return np.array([[-2 * beta * z[0] + beta - gamma]])

    model = sis(beta, gamma)
    mf = MetzlerForm(A=A, f=np.zeros(1), model=model, jacobian=jac)
    eqs = find_equilibria(model, [np.array([v]) for v in (0.0, 0.25, 0.5, 0.75, 1.0)])
    object.__setattr__(mf, "default_Q", compute_Q(model, eqs, mform=mf))
    return mf


def metzler_siv(**params) -> MetzlerForm:
    """Vaccination model in (S, V, I); V-row diagonal carries -(mu + theta).

    The susceptible row collects recoveries, protection loss and the
    synchronized births; f = (mu, 0, 0).
    """
    from .models import siv

    model = siv(**params)
    p = model.params
    b, g, eta, th, mu, sg = (p[k] for k in ("beta", "gamma", "eta", "theta", "mu", "sigma"))

    def A(z):
        i = z[2]
        return np.array([
            [-b * i - mu - eta, th, g],
            [eta, -sg * b * i - mu - th, 0.0],
            [b * i, sg * b * i, -mu - g],
        ])

    def jac(z):
        J = A(z).copy()
        # z-dependence enters only through z3 = I
        J[0, 2] += -b * z[0]
        J[1, 2] += -sg * b * z[1]
        J[2, 2] += b * z[0] + sg * b * z[1]
        return J

    mf = MetzlerForm(A=A, f=np.array([mu, 0.0, 0.0]), model=model, jacobian=jac)
    eqs = find_equilibria(model, default_seed_grid(model))
    object.__setattr__(mf, "default_Q", compute_Q(model, eqs, mform=mf))
    return mf


def builtin_metzler(model: CompartmentalModel) -> MetzlerForm:
    if model.name == "sis":
        return metzler_sis(model.params["beta"], model.params["gamma"])
    if model.name == "siv":
        return metzler_siv(**model.params)
    raise ValueError(f"no built-in Metzler form for model {model.name!r}; supply one")


# ---------------------------------------------------------------------------
# denominator function
# ---------------------------------------------------------------------------

_PHI = {
    "one_minus_exp": lambda z: -np.expm1(-z),
    "rational": lambda z: z / (1.0 + z * z),
}


@dataclass(frozen=True)
class DenominatorFunction:
    """psi(h) = phi(Q h) / Q with phi(z) = z + O(z^2), 0 < phi < 1 for z > 0."""

    Q: float
    phi: str = "one_minus_exp"

    def __post_init__(self):
        if self.Q <= 0:
            raise ValueError("Q must be positive")
        if self.phi not in _PHI:
            raise ValueError(f"unknown phi choice {self.phi!r}")

    def __call__(self, h: float) -> float:
        return float(_PHI[self.phi](self.Q * h) / self.Q)


def compute_Q(model: CompartmentalModel, equilibria: Sequence[Equilibrium],
              mform: Optional[MetzlerForm] = None) -> float:
    """max over equilibrium eigenvalues of |lambda|^2 / (2 |Re lambda|).

    Uses the Metzler right-hand-side Jacobian when ``mform`` is given (the
    matrix the scheme actually inverts), otherwise the model drift Jacobian.
    """
    if not equilibria:
        raise ValueError("need at least one equilibrium")
    q = 0.0
    for eq in equilibria:
        J = mform.rhs_jacobian(eq.point) if mform is not None else model.drift_jacobian(eq.point)
        for lam in np.linalg.eigvals(J):
            if abs(lam.real) < _HYPERBOLIC_TOL:
                raise NonHyperbolicError(
                    f"eigenvalue {lam} at equilibrium {eq.point} has |Re| < {_HYPERBOLIC_TOL}")
            q = max(q, abs(lam) ** 2 / (2 * abs(lam.real)))
    return q


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NSFDConfig:
    h: float
    T: float
    phi: str = "one_minus_exp"
    Q: Optional[float] = None

    def __post_init__(self):
        if self.h <= 0 or self.T <= 0:
            raise ValueError("h and T must be positive")


def _solve_small(Ain: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting for the d <= 3 systems."""
    A = Ain.astype(float).copy()
    x = b.astype(float).copy()
    n = A.shape[0]
    perm = list(range(n))
    for col in range(n):
        p = col + int(np.argmax(np.abs(A[col:, col])))
        if abs(A[p, col]) < 1e-14:
            raise SingularSystemError("pivot below 1e-14 in NSFD linear solve")
        if p != col:
            A[[col, p]] = A[[p, col]]
            x[[col, p]] = x[[p, col]]
        for row in range(col + 1, n):
            m = A[row, col] / A[col, col]
            A[row, col:] -= m * A[col, col:]
            x[row] -= m * x[col]
    for col in range(n - 1, -1, -1):
        x[col] = (x[col] - A[col, col + 1:] @ x[col + 1:]) / A[col, col]
    return x


def nsfd_step(mform: MetzlerForm, psi_h: float, z: np.ndarray) -> np.ndarray:
    """One implicit step: solve (I - psi_h A(z)) z' = z + psi_h f."""
    z = np.asarray(z, dtype=float)
    M = np.eye(mform.dimension) - psi_h * mform.A(z)
    return _solve_small(M, z + psi_h * mform.f)


def _resolve_psi(mform: MetzlerForm, config: NSFDConfig) -> float:
    Q = config.Q if config.Q is not None else mform.default_Q
    if Q is None:
        raise ValueError("no Q available: pass NSFDConfig 'Q' or use a built-in Metzler form")
    return DenominatorFunction(Q, config.phi)(config.h)


def nsfd_integrate(mform: MetzlerForm, x0, config: NSFDConfig) -> Trajectory:
    """NSFD trajectory at t_m = m h up to T."""
    z = np.asarray(x0, dtype=float)
    if not mform.model.domain.contains(z):
        raise DomainError(f"initial state {z} outside domain")
    psi_h = _resolve_psi(mform, config)
    n = int(math.ceil(config.T / config.h - 1e-12))
    times = np.arange(n + 1) * config.h
    states = np.empty((n + 1, mform.dimension))
    states[0] = z
    for m in range(n):
        z = nsfd_step(mform, psi_h, z)
        states[m + 1] = z
    return Trajectory(times, states, "nsfd", meta={"h": config.h, "psi_h": psi_h})


def explicit_integrate(model: CompartmentalModel, x0, config: NSFDConfig) -> Trajectory:
    """Forward Euler on the drift, without domain clamping."""
    z = np.asarray(x0, dtype=float)
    n = int(math.ceil(config.T / config.h - 1e-12))
    times = np.arange(n + 1) * config.h
    states = np.empty((n + 1, model.dimension))
    states[0] = z
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(n):
            z = z + config.h * model.drift_raw(z)
            states[m + 1] = z
    return Trajectory(times, states, "explicit", meta={"h": config.h})


def sis_exact(x: float, beta: float, gamma: float, t, *, as_printed: bool = False):
    """Closed-form SIS solution (Riccati equation with constant coefficients).

    For beta == gamma the published denominator 1 - beta x t grows the solution
    out of [0, 1]; the default uses the corrected 1 + beta x t, the published
    sign is available with ``as_printed=True``.  Raises BlowupError when the
    denominator changes sign.
    """
    t = np.asarray(t, dtype=float)
    if beta != gamma:
        r = beta - gamma
        e = np.exp(r * t)
        den = r + beta * x * (e - 1.0)
        if np.any(den * r <= 0):
            raise BlowupError("denominator of the closed-form SIS solution changed sign")
        out = r * x * e / den
    else:
        den = 1.0 - beta * x * t if as_printed else 1.0 + beta * x * t
        if np.any(den <= 0):
            raise BlowupError("denominator of the beta == gamma branch is nonpositive")
        out = x / den
    return out if out.ndim else float(out)


def classify_attractor(mform: MetzlerForm, stable: Sequence[Equilibrium], z0,
                       config: Optional[NSFDConfig] = None, tol: float = 1e-4,
                       t_max: float = 2000.0) -> Optional[Equilibrium]:
    """Integrate until within ``tol`` of a stable equilibrium; None if undecided."""
    stable = [e for e in stable if e.stability == "stable"]
    if not stable:
        raise NotBistableError("no stable equilibria to classify against")
    h = config.h if config is not None else 0.1
    cfg = config or NSFDConfig(h=h, T=t_max)
    psi_h = _resolve_psi(mform, cfg)
    z = np.asarray(z0, dtype=float)
    t = 0.0
    while t <= t_max:
        for e in stable:
            if np.linalg.norm(z - e.point) < tol:
                return e
        z = nsfd_step(mform, psi_h, z)
        t += h
    return None


def characteristic_boundary(mform: MetzlerForm, equilibria: Sequence[Equilibrium],
                            lines: Optional[np.ndarray] = None, resolution: int = 25,
                            bisect_iters: int = 30) -> np.ndarray:
    """Basin boundary of a bistable model, as points in a reduced plane.

    For the 3-D vaccination model the scan runs along I for fixed V in the
    (I, V) view and returns (I, V) rows.  For 1-D bistable models it returns
    the single separating point.  Raises NotBistableError with fewer than two
    stable equilibria.
    """
    stable = [e for e in equilibria if e.stability == "stable"]
    if len(stable) < 2:
        raise NotBistableError(f"found {len(stable)} stable equilibria; need two")
    model = mform.model

    if model.dimension == 1:
        lo, hi = sorted(float(e.point[0]) for e in stable[:2])
        a, b = lo, hi
        for _ in range(bisect_iters):
            mid = 0.5 * (a + b)
            att = classify_attractor(mform, stable, np.array([mid]))
            if att is not None and abs(att.point[0] - lo) < abs(att.point[0] - hi):
                a = mid
            else:
                b = mid
        return np.array([[0.5 * (a + b)]])

    if model.name != "siv":
        raise ValueError("characteristic boundary scan is implemented for 1-D models and the SIV builtin")

    x_bar = next((e for e in stable if e.kind == "disease_free"), stable[0])
    x_star = next((e for e in stable if e.kind == "endemic"), stable[-1])
    if lines is None:
        # band around the saddle; listed bottom-up toward the disease-free side
        unstable = [e for e in equilibria if e.stability == "unstable"]
        v_mid = unstable[0].point[1] if unstable else 0.5 * (x_bar.point[1] + x_star.point[1])
        v_lo = min(x_bar.point[1], x_star.point[1]) + 0.02
        v_hi = min(2 * v_mid - v_lo, max(x_bar.point[1], x_star.point[1]) - 0.02)
        lines = np.linspace(v_lo, v_hi, resolution)

    points = []
    for v in np.asarray(lines, dtype=float):
        i_max = 1.0 - v
        if i_max <= 1e-6:
            continue
        # bracket: low I is attracted to the disease-free x_bar, high I to x*
        scan = np.linspace(1e-3, i_max - 1e-3, 12)
        labels = []
        for i in scan:
            att = classify_attractor(mform, stable, siv_from_iv((i, v)))
            labels.append(None if att is None else
                          ("bar" if abs(att.point[2]) < 1e-6 else "star"))
        lo_i = hi_i = None
        for i, lab in zip(scan, labels):
            if lab == "bar":
                lo_i = i
            elif lab == "star" and lo_i is not None:
                hi_i = i
                break
        if lo_i is None or hi_i is None:
            continue
        a, b = lo_i, hi_i
        for _ in range(bisect_iters):
            mid = 0.5 * (a + b)
            att = classify_attractor(mform, stable, siv_from_iv((mid, v)))
            if att is not None and abs(att.point[2]) < 1e-6:
                a = mid
            else:
                b = mid
        points.append((0.5 * (a + b), v))
    return np.array(points)
