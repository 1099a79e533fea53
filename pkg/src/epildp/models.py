"""Compartmental jump models: rates, drift, Jacobians, equilibria, built-ins.

A model is a set of integer jump directions ``h_1..h_k`` with nonnegative
rate functions ``beta_1..beta_k`` on a domain ``A``.  Rates are polynomials
in the state coordinates (monomial tables), so analytic gradients exist;
plain callables are accepted too and fall back to finite differences.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError

log = logging.getLogger(__name__)

_FD_STEP = 1e-6
_EQ_DRIFT_TOL = 1e-10
_EQ_MERGE_TOL = 1e-8
_HYPERBOLIC_TOL = 1e-9


@dataclass(frozen=True)
class PolynomialRate:
    """Sum of monomials c * prod_i z_i^e_i with integer exponents."""

    coefs: np.ndarray        # (m,)
    exponents: np.ndarray    # (m, d) nonnegative ints

    def __post_init__(self):
        object.__setattr__(self, "coefs", np.asarray(self.coefs, dtype=float))
        object.__setattr__(self, "exponents", np.asarray(self.exponents, dtype=np.int64))
        if self.exponents.ndim != 2 or self.coefs.shape[0] != self.exponents.shape[0]:
            raise ValueError("coefs and exponents must have matching leading dimension")

    @property
    def dimension(self) -> int:
        return self.exponents.shape[1]

    def __call__(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(np.sum(self.coefs * np.prod(z[None, :] ** self.exponents, axis=1)))

    def batch(self, Z: np.ndarray) -> np.ndarray:
        """Evaluate at row-stacked states, shape (m, d) -> (m,)."""
        Z = np.asarray(Z, dtype=float)
        return np.power(Z[:, None, :], self.exponents[None, :, :]).prod(axis=2) @ self.coefs

    def grad(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = np.zeros(self.dimension)
        for i in range(self.dimension):
            e = self.exponents[:, i]
            active = e > 0
            if not active.any():
                continue
            shifted = self.exponents[active].copy()
            shifted[:, i] -= 1
            out[i] = np.sum(self.coefs[active] * e[active] * np.prod(z[None, :] ** shifted, axis=1))
        return out

    def to_dict(self) -> dict:
        return {"monomials": [{"coef": float(c), "exponents": [int(e) for e in row]}
                              for c, row in zip(self.coefs, self.exponents)]}

    @staticmethod
    def from_dict(data: dict, dimension: int) -> "PolynomialRate":
        monos = data["monomials"]
        if not monos:
            return PolynomialRate(np.zeros(1), np.zeros((1, dimension), dtype=np.int64))
        coefs = [m["coef"] for m in monos]
        exps = [m["exponents"] for m in monos]
        return PolynomialRate(np.asarray(coefs), np.asarray(exps))


@dataclass(frozen=True)
class LinearConstraint:
    """a . z (<=|==) b, part of the domain description."""

    a: np.ndarray
    op: str          # "<=" or "=="
    b: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        if self.op not in ("<=", "=="):
            raise ValueError(f"unsupported constraint op {self.op!r}")

    def satisfied(self, z: np.ndarray, tol: float) -> bool:
        v = float(self.a @ z)
        if self.op == "<=":
            return v <= self.b + tol
        return abs(v - self.b) <= tol


@dataclass(frozen=True)
class Domain:
    """Bounding box plus optional linear constraints."""

    box: np.ndarray                       # (d, 2)
    constraints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "box", np.asarray(self.box, dtype=float))
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def dimension(self) -> int:
        return self.box.shape[0]

    def contains(self, z, tol: float = 1e-9) -> bool:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dimension,):
            return False
        if np.any(z < self.box[:, 0] - tol) or np.any(z > self.box[:, 1] + tol):
            return False
        return all(c.satisfied(z, tol) for c in self.constraints)

    def to_dict(self) -> dict:
        d = {"box": [[float(lo), float(hi)] for lo, hi in self.box]}
        if self.constraints:
            d["constraints"] = [{"a": [float(v) for v in c.a], "op": c.op, "b": float(c.b)}
                                for c in self.constraints]
        return d

    @staticmethod
    def from_dict(data: dict) -> "Domain":
        cons = tuple(LinearConstraint(np.asarray(c["a"]), c["op"], float(c["b"]))
                     for c in data.get("constraints", ()))
        return Domain(np.asarray(data["box"]), cons)


@dataclass(frozen=True, eq=False)
class CompartmentalModel:
    """Jump directions, rates and domain of a Poisson-driven population model."""

    name: str
    jump_directions: np.ndarray          # (d, k) integer columns h_j
    rates: tuple                         # k entries: PolynomialRate or callable
    domain: Domain
    compartments: tuple = ()
    params: dict = field(default_factory=dict)
    infected_index: Optional[int] = None

    def __post_init__(self):
        H = np.asarray(self.jump_directions, dtype=np.int64)
        if H.ndim != 2:
            raise ValueError("jump_directions must be a (d, k) matrix of integer columns")
        if np.any(np.all(H == 0, axis=0)):
            raise ValueError("every jump direction must be nonzero")
        object.__setattr__(self, "jump_directions", H)
        object.__setattr__(self, "rates", tuple(self.rates))
        if len(self.rates) != H.shape[1]:
            raise ValueError("need one rate per jump direction")
        if not self.compartments:
            object.__setattr__(self, "compartments",
                               tuple(f"Z{i + 1}" for i in range(H.shape[0])))

    @property
    def dimension(self) -> int:
        return self.jump_directions.shape[0]

    @property
    def jump_count(self) -> int:
        return self.jump_directions.shape[1]

    @property
    def has_polynomial_rates(self) -> bool:
        return all(isinstance(r, PolynomialRate) for r in self.rates)

    def beta(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.array([r(z) for r in self.rates])

    def beta_batch(self, Z: np.ndarray) -> np.ndarray:
        """Rates at row-stacked states, shape (m, d) -> (m, k)."""
        Z = np.asarray(Z, dtype=float)
        cols = [r.batch(Z) if isinstance(r, PolynomialRate)
                else np.array([r(z) for z in Z]) for r in self.rates]
        return np.stack(cols, axis=1)

    def beta_grad(self, z) -> np.ndarray:
        """(k, d) matrix of d(beta_j)/d(z_i); finite differences for callables."""
        z = np.asarray(z, dtype=float)
        out = np.empty((self.jump_count, self.dimension))
        for j, r in enumerate(self.rates):
            if isinstance(r, PolynomialRate):
                out[j] = r.grad(z)
            else:
                for i in range(self.dimension):
                    h = _FD_STEP * max(1.0, abs(z[i]))
                    zp, zm = z.copy(), z.copy()
                    zp[i] += h
                    zm[i] -= h
                    out[j, i] = (r(zp) - r(zm)) / (2 * h)
        return out

    def drift_raw(self, z) -> np.ndarray:
        """Sum_j h_j beta_j(z), without the domain-membership check."""
        return self.jump_directions @ self.beta(z)

    def drift_jacobian(self, z) -> np.ndarray:
        return self.jump_directions @ self.beta_grad(z)

    def conserved_directions(self) -> np.ndarray:
        """Orthonormal basis (rows) of {c : c.h_j = 0 for all j}."""
        u, s, _ = np.linalg.svd(self.jump_directions.astype(float))
        rank = int(np.sum(s > 1e-10 * max(1.0, s[0] if s.size else 1.0)))
        return u[:, rank:].T.copy() if rank < self.dimension else np.zeros((0, self.dimension))

    def scaled(self, N: int) -> "ScaledModel":
        return ScaledModel(self, N)

    def to_dict(self) -> dict:
        if not self.has_polynomial_rates:
            raise ValueError("only polynomial-rate models are serializable")
        return {
            "name": self.name,
            "dimension": self.dimension,
            "compartments": list(self.compartments),
            "jumps": [{"direction": [int(v) for v in self.jump_directions[:, j]],
                       "rate": self.rates[j].to_dict()}
                      for j in range(self.jump_count)],
            "domain": self.domain.to_dict(),
            "parameters": {k: float(v) for k, v in self.params.items()},
            **({"infected_index": int(self.infected_index)}
               if self.infected_index is not None else {}),
        }


@dataclass(frozen=True, eq=False)
class ScaledModel:
    """Model at finite population size N: nu_j = h_j / N and a_j = N beta_j."""

    base: CompartmentalModel
    N: int

    def __post_init__(self):
        if self.N <= 0:
            raise ValueError("population size must be positive")

    @property
    def nu(self) -> np.ndarray:
        return self.base.jump_directions / float(self.N)

    def a(self, z) -> np.ndarray:
        return self.N * np.maximum(self.base.beta(z), 0.0)

    def a0(self, z) -> float:
        return float(np.sum(self.a(z)))

    def drift(self, z) -> np.ndarray:
        """Drift of the proportion process; identical to the base model drift."""
        return self.base.drift_raw(z)


@dataclass(frozen=True)
class Equilibrium:
    point: np.ndarray
    stability: str                 # "stable" | "unstable" | "nonhyperbolic"
    kind: Optional[str] = None     # "disease_free" | "endemic"
    eigenvalues: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    """Time-stamped state sequence produced by an integrator or simulator."""

    times: np.ndarray
    states: np.ndarray            # (m, d)
    source: str                   # nsfd | explicit | exact | ssa | tau_leap | dp
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("times must be nondecreasing")

    def __len__(self) -> int:
        return len(self.times)

    def final_state(self) -> np.ndarray:
        return self.states[-1]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def drift(model: CompartmentalModel, z) -> np.ndarray:
    """b(z) = sum_j h_j beta_j(z); raises DomainError outside A."""
    z = np.asarray(z, dtype=float)
    if not model.domain.contains(z):
        raise DomainError(f"state {z} outside domain of model {model.name!r}")
    return model.drift_raw(z)


def rate_jacobian(scaled: ScaledModel, z) -> np.ndarray:
    """(k, d) matrix with entry (j, i) = d a_j / d z_i."""
    return scaled.N * scaled.base.beta_grad(np.asarray(z, dtype=float))


def _quotient_eigenvalues(model: CompartmentalModel, J: np.ndarray) -> np.ndarray:
    """Eigenvalues of J restricted to the non-conserved subspace.

    Jumps that conserve a linear functional force a structural zero eigenvalue;
    stability within the invariant affine slice is what matters.
    """
    C = model.conserved_directions()
    if C.shape[0] == 0:
        return np.linalg.eigvals(J)
    # orthonormal basis of the complement of the conserved directions
    full = np.vstack([C, np.eye(model.dimension)])
    q, _ = np.linalg.qr(full.T)
    B = q[:, C.shape[0]:model.dimension]
    return np.linalg.eigvals(B.T @ J @ B)


def find_equilibria(model: CompartmentalModel, seeds: Sequence[np.ndarray],
                    max_iter: int = 200) -> list[Equilibrium]:
    """Damped-Newton drift roots from each seed, deduplicated and classified.

    Seeds that fail to converge within ``max_iter`` are skipped with a warning.
    Roots outside the domain are discarded.  Stability comes from the drift
    Jacobian restricted to the non-conserved subspace; eigenvalues with
    |Re| < 1e-9 mark the point nonhyperbolic instead of classifying it.
    """
    C = model.conserved_directions()
    if C.shape[0]:
        # Newton runs in the invariant affine slice so the reduced Jacobian
        # is nonsingular at hyperbolic equilibria.
        full = np.vstack([C, np.eye(model.dimension)])
        q, _ = np.linalg.qr(full.T)
        B = q[:, C.shape[0]:model.dimension]
    else:
        B = np.eye(model.dimension)
    diameter = float(np.max(model.domain.box[:, 1] - model.domain.box[:, 0]))
    center = 0.5 * (model.domain.box[:, 0] + model.domain.box[:, 1])
    roots: list[np.ndarray] = []
    for seed in seeds:
        z = np.asarray(seed, dtype=float).copy()
        if not model.domain.contains(z, tol=1e-7):
            raise DomainError(f"seed {z} outside domain")
        ok = False
        for _ in range(max_iter):
            b = model.drift_raw(z)
            Jr = B.T @ model.drift_jacobian(z) @ B
            br = B.T @ b
            step, *_ = np.linalg.lstsq(Jr, -br, rcond=None)
            nb = np.linalg.norm(br)
            if np.linalg.norm(step) < 1e-14 * (1 + np.linalg.norm(z)) and nb > 1e-12:
                # stationary point of the residual (singular Jacobian away from
                # any root): jump along the flow without a line search
                z_new = z + B @ ((0.01 * diameter / nb) * br)
            else:
                t = 1.0
                for _ in range(30):
                    z_new = z + t * (B @ step)
                    if np.linalg.norm(B.T @ model.drift_raw(z_new)) <= (1 - 0.25 * t) * nb + 1e-16:
                        break
                    t *= 0.5
            moved = np.linalg.norm(z_new - z)
            z = z_new
            if np.linalg.norm(z - center) > 10 * diameter:
                break  # diverging; no root this way
            if np.linalg.norm(model.drift_raw(z)) < 1e-12 and moved < 1e-11 * (1 + np.linalg.norm(z)):
                ok = True
                break
        if not ok:
            log.warning("find_equilibria: seed %s did not converge in %d iterations; skipped",
                        np.asarray(seed), max_iter)
            continue
        if not model.domain.contains(z, tol=1e-6):
            continue
        roots.append(z)

    merged: list[np.ndarray] = []
    for z in roots:
        for i, other in enumerate(merged):
            if np.linalg.norm(z - other) < _EQ_MERGE_TOL:
                if np.linalg.norm(model.drift_raw(z)) < np.linalg.norm(model.drift_raw(other)):
                    merged[i] = z
                break
        else:
            merged.append(z)
    merged.sort(key=lambda p: tuple(np.round(p, 12)))

    out = []
    for z in merged:
        eigs = _quotient_eigenvalues(model, model.drift_jacobian(z))
        if np.any(np.abs(eigs.real) < _HYPERBOLIC_TOL):
            stability = "nonhyperbolic"
        elif np.all(eigs.real < 0):
            stability = "stable"
        else:
            stability = "unstable"
        kind = None
        if model.infected_index is not None:
            kind = "disease_free" if abs(z[model.infected_index]) < 1e-8 else "endemic"
        assert np.linalg.norm(model.drift_raw(z)) <= _EQ_DRIFT_TOL
        out.append(Equilibrium(point=z, stability=stability, kind=kind, eigenvalues=eigs))
    return out


def basic_reproduction_number(beta: float, gamma: float, mu: float, theta: float,
                              eta: float, sigma: float) -> tuple[float, float]:
    """(R_0, R~_0) for the vaccination model.

    R~_0 = beta/(mu+gamma) is the no-vaccination value; R_0 scales it by
    (mu+theta+sigma*eta)/(mu+theta+eta).
    """
    if min(beta, gamma, mu, theta, eta) < 0 or not 0 <= sigma <= 1:
        raise ValueError("parameters must be positive with sigma in [0, 1]")
    r0_tilde = beta / (mu + gamma)
    r0 = r0_tilde * (mu + theta + sigma * eta) / (mu + theta + eta)
    return r0, r0_tilde


def default_seed_grid(model: CompartmentalModel, per_axis: int = 6) -> list[np.ndarray]:
    """Box grid projected onto equality constraints and filtered to the domain."""
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in model.domain.box]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.dimension)
    eqs = [c for c in model.domain.constraints if c.op == "=="]
    seeds, seen = [], set()
    for z in mesh:
        for c in eqs:
            z = z - c.a * (c.a @ z - c.b) / (c.a @ c.a)
        key = tuple(np.round(z, 9))
        if key not in seen and model.domain.contains(z, tol=1e-9):
            seen.add(key)
            seeds.append(z)
    return seeds


def check_boundary_rates(model: CompartmentalModel, n_samples: int = 100,
                         rng: Optional[np.random.Generator] = None,
                         tol: float = 1e-12) -> bool:
    """Verify rates of outward-pointing jumps vanish on sampled boundary faces."""
    rng = rng or np.random.default_rng(0)
    probe = 1e-7
    ok = True
    for _ in range(n_samples):
        z = rng.uniform(model.domain.box[:, 0], model.domain.box[:, 1])
        for c in model.domain.constraints:
            if c.op == "==":
                z = z - c.a * (c.a @ z - c.b) / (c.a @ c.a)
        # push onto a random active boundary face
        i = rng.integers(model.dimension)
        z[i] = model.domain.box[i, 0] if rng.random() < 0.5 else model.domain.box[i, 1]
        if not model.domain.contains(z, tol=1e-9):
            continue
        beta = model.beta(z)
        for j in range(model.jump_count):
            outward = not model.domain.contains(z + probe * model.jump_directions[:, j],
                                                tol=probe * 1e-3)
            if outward and beta[j] > tol:
                ok = False
    return ok


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------

def sis(beta: float = 1.5, gamma: float = 1.0) -> CompartmentalModel:
    """SIS model on [0, 1]: z is the proportion of infectious individuals."""
    d = 1
    infection = PolynomialRate([beta, -beta], [[1], [2]])      # beta z (1 - z)
    recovery = PolynomialRate([gamma], [[1]])                  # gamma z
    return CompartmentalModel(
        name="sis",
        jump_directions=np.array([[1, -1]]),
        rates=(infection, recovery),
        domain=Domain(np.array([[0.0, 1.0]])),
        compartments=("I",),
        params={"beta": beta, "gamma": gamma},
        infected_index=0,
    )


_SIV_DEFAULTS = {"beta": 3.6, "gamma": 1.0, "eta": 0.3, "theta": 0.02,
                 "mu": 0.03, "sigma": 0.1}


def siv(**params) -> CompartmentalModel:
    """Vaccination model in (S, V, I) proportions on the unit simplex.

    Events: infection of susceptible / of vaccinated, recovery to S,
    vaccination S->V at rate eta*S, loss of protection V->S at rate theta*V,
    and death of I or V synchronized with a susceptible birth.
    """
    p = {**_SIV_DEFAULTS, **params}
    b, g, eta, th, mu, sg = (p[k] for k in ("beta", "gamma", "eta", "theta", "mu", "sigma"))
    # columns: (dS, dV, dI) per event
    H = np.array([
        # h1       h2      h3      h4      h5      h6      h7
        [-1,       0,      +1,     -1,     +1,     +1,     +1],   # S
        [0,       -1,      0,      +1,     -1,     0,      -1],   # V
        [+1,      +1,      -1,     0,      0,      -1,     0],    # I
    ])
    rates = (
        PolynomialRate([b], [[1, 0, 1]]),        # infection of S:    beta S I
        PolynomialRate([sg * b], [[0, 1, 1]]),   # infection of V:    sigma beta V I
        PolynomialRate([g], [[0, 0, 1]]),        # recovery I -> S:   gamma I
        PolynomialRate([eta], [[1, 0, 0]]),      # vaccination S->V:  eta S
        PolynomialRate([th], [[0, 1, 0]]),       # loss V -> S:       theta V
        PolynomialRate([mu], [[0, 0, 1]]),       # death of I, birth of S
        PolynomialRate([mu], [[0, 1, 0]]),       # death of V, birth of S
    )
    dom = Domain(np.array([[0.0, 1.0]] * 3),
                 (LinearConstraint(np.ones(3), "==", 1.0),))
    return CompartmentalModel(name="siv", jump_directions=H, rates=rates, domain=dom,
                              compartments=("S", "V", "I"), params=p, infected_index=2)


def siv_reduced(**params) -> CompartmentalModel:
    """Reduced (I, V) view of the vaccination model (S = 1 - I - V eliminated)."""
    p = {**_SIV_DEFAULTS, **params}
    b, g, eta, th, mu, sg = (p[k] for k in ("beta", "gamma", "eta", "theta", "mu", "sigma"))
    H = np.array([
        # h1   h2   h3   h4   h5   h6   h7
        [+1,  +1,  -1,   0,   0,  -1,   0],    # I
        [0,   -1,   0,  +1,  -1,   0,  -1],    # V
    ])
    rates = (
        PolynomialRate([b, -b, -b], [[1, 0], [2, 0], [1, 1]]),   # beta I (1 - I - V)
        PolynomialRate([sg * b], [[1, 1]]),                      # sigma beta I V
        PolynomialRate([g], [[1, 0]]),                           # gamma I
        PolynomialRate([eta, -eta, -eta], [[0, 0], [1, 0], [0, 1]]),  # eta (1 - I - V)
        PolynomialRate([th], [[0, 1]]),                          # theta V
        PolynomialRate([mu], [[1, 0]]),                          # mu I
        PolynomialRate([mu], [[0, 1]]),                          # mu V
    )
    dom = Domain(np.array([[0.0, 1.0]] * 2),
                 (LinearConstraint(np.ones(2), "<=", 1.0),))
    return CompartmentalModel(name="siv_iv", jump_directions=H, rates=rates, domain=dom,
                              compartments=("I", "V"), params=p, infected_index=0)


def siv_to_iv(z3) -> np.ndarray:
    """(S, V, I) -> (I, V)."""
    z3 = np.asarray(z3, dtype=float)
    return np.array([z3[..., 2], z3[..., 1]]).T if z3.ndim > 1 else np.array([z3[2], z3[1]])


def siv_from_iv(iv) -> np.ndarray:
    """(I, V) -> (S, V, I)."""
    iv = np.asarray(iv, dtype=float)
    return np.array([1.0 - iv[0] - iv[1], iv[1], iv[0]])


# ---------------------------------------------------------------------------
# model definition files
# ---------------------------------------------------------------------------

def model_from_dict(data: dict) -> CompartmentalModel:
    d = int(data["dimension"])
    jumps = data["jumps"]
    H = np.array([j["direction"] for j in jumps]).T
    rates = tuple(PolynomialRate.from_dict(j["rate"], d) for j in jumps)
    return CompartmentalModel(
        name=data.get("name", "custom"),
        jump_directions=H,
        rates=rates,
        domain=Domain.from_dict(data["domain"]),
        compartments=tuple(data.get("compartments", ())),
        params=dict(data.get("parameters", {})),
        infected_index=data.get("infected_index"),
    )


def load_model(path) -> CompartmentalModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def builtin_model(name: str, **params) -> CompartmentalModel:
    if name == "sis":
        allowed = {"beta", "gamma"}
        bad = set(params) - allowed
        if bad:
            raise ValueError(f"unknown SIS parameters: {sorted(bad)}")
        return sis(**params)
    if name == "siv":
        bad = set(params) - set(_SIV_DEFAULTS)
        if bad:
            raise ValueError(f"unknown SIV parameters: {sorted(bad)}")
        return siv(**params)
    raise ValueError(f"unknown builtin model {name!r}")
