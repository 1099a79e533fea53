"""Exact and approximate simulation of the scaled jump process.

The state is tracked in integer individual counts (n = N z), which makes
absorption, domain membership and criticality exact.  Each simulator consumes
an RngStream; identical (seed, stream index) reproduce the event sequence
bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import DomainError, RepairExhaustedError
from .models import CompartmentalModel, PolynomialRate, ScaledModel, Trajectory

_VARIANTS = {"explicit": K.VAR_EXPLICIT, "implicit_rate": K.VAR_IMPLICIT,
             "midpoint": K.VAR_MIDPOINT}


@dataclass(frozen=True)
class TauLeapConfig:
    """Error control and algorithm-variant knobs for tau-leaping."""

    epsilon: float = 0.03
    n_fallback: int = 10        # reject the leap when tau < n_fallback / a0
    n_burst: int = 100          # SSA iterations run per rejected leap
    n_c: int = 10               # criticality threshold, in individuals
    variant: str = "explicit"   # explicit | implicit_rate | midpoint | modified
    max_halvings: int = 20
    repair: str = "resample"    # resample | thinning
    tau_select_mode: str = "corrected"   # corrected | as_printed

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if min(self.n_fallback, self.n_burst) <= 0 or self.n_c < 0:
            raise ValueError("n_fallback and n_burst must be positive")
        if self.variant not in (*_VARIANTS, "modified"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.repair not in ("resample", "thinning"):
            raise ValueError(f"unknown repair mode {self.repair!r}")
        if self.tau_select_mode not in ("corrected", "as_printed"):
            raise ValueError(f"unknown tau_select mode {self.tau_select_mode!r}")

    @property
    def as_printed(self) -> bool:
        return self.tau_select_mode == "as_printed"


@dataclass(frozen=True)
class RngStream:
    """Deterministic stream: (seed, index) fixes the whole draw sequence."""

    seed: int
    index: int = 0

    @property
    def kernel_seed(self) -> int:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.index,))
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    @property
    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(self.index,))))


@dataclass
class SimStats:
    event_counts: np.ndarray
    fallbacks: int = 0
    leaps: int = 0
    repairs: int = 0
    violations: int = 0
    seconds: float = 0.0
    absorbed: bool = False


def _tables(model: CompartmentalModel):
    if not model.has_polynomial_rates:
        raise ValueError("simulators need polynomial rates (monomial tables)")
    k = model.jump_count
    mmax = max(len(r.coefs) for r in model.rates)
    coefs = np.zeros((k, mmax))
    exps = np.zeros((k, mmax, model.dimension), dtype=np.int64)
    nmono = np.zeros(k, dtype=np.int64)
    for j, r in enumerate(model.rates):
        nmono[j] = len(r.coefs)
        coefs[j, :nmono[j]] = r.coefs
        exps[j, :nmono[j]] = r.exponents
    return coefs, exps, nmono


def _sumcap(model: CompartmentalModel, N: int) -> int:
    """N when the complement count N - sum(n) is part of the domain, else -1."""
    for c in model.domain.constraints:
        if np.allclose(c.a, 1.0) and abs(c.b - 1.0) < 1e-12:
            return N
    if model.dimension == 1 and np.allclose(model.domain.box, [[0.0, 1.0]]):
        return N
    return -1


def _counts(scaled: ScaledModel, x0) -> np.ndarray:
    z = np.atleast_1d(np.asarray(x0, dtype=float))
    if not scaled.base.domain.contains(z):
        raise DomainError(f"initial state {z} outside domain")
    n = np.rint(scaled.N * z).astype(np.int64)
    return n


def _rec_args(T: float, record_dt: Optional[float]):
    if record_dt is None:
        return K.REC_ALL, 1.0, 4096
    return K.REC_GRID, float(record_dt), int(np.ceil(T / record_dt)) + 8


def _trajectory(times, states, N, source, meta) -> Trajectory:
    return Trajectory(times, states.astype(float) / N, source, meta=meta)


def ssa_direct(scaled: ScaledModel, x0, T: float, rng: RngStream,
               record_dt: Optional[float] = None) -> Trajectory:
    """Exact direct-method path; absorbed states persist to the horizon."""
    coefs, exps, nmono = _tables(scaled.base)
    mode, dt, cap = _rec_args(T, record_dt)
    t0 = time.perf_counter()
    times, states, counts, absorbed = K.ssa_kernel(
        _counts(scaled, x0), float(scaled.N), scaled.base.jump_directions,
        coefs, exps, nmono, float(T), rng.kernel_seed, mode, dt, cap)
    stats = SimStats(event_counts=counts[-1].copy() if len(counts) else
                     np.zeros(scaled.base.jump_count, dtype=np.int64),
                     seconds=time.perf_counter() - t0, absorbed=bool(absorbed))
    return _trajectory(times, states, scaled.N, "ssa",
                       {"stats": stats, "N": scaled.N, "seed": (rng.seed, rng.index)})


def tau_select(scaled: ScaledModel, z, epsilon: float,
               restrict: Optional[np.ndarray] = None,
               as_printed: bool = False) -> float:
    """Leap size at state z; ``restrict`` masks the non-critical jumps."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    a = scaled.a(z)
    a0 = float(a.sum())
    if a0 <= 0:
        return float("inf")
    noncrit = np.ones(scaled.base.jump_count, dtype=bool) if restrict is None \
        else np.asarray(restrict, dtype=bool)
    if not noncrit.any():
        return float("inf")
    grads = scaled.N * scaled.base.beta_grad(z)       # (k, d) of da_j/dz_i
    f = grads @ scaled.nu                              # (k, k): f[j, j']
    fr = f[:, noncrit]
    a_r = a[noncrit]
    if as_printed:
        mu = fr.sum(axis=1) * a
        sig2 = (fr ** 2).sum(axis=1) * a
    else:
        mu = fr @ a_r
        sig2 = (fr ** 2) @ a_r
    with np.errstate(divide="ignore"):
        t1 = np.where(mu != 0.0, epsilon * a0 / np.abs(mu), np.inf)
        t2 = np.where(sig2 > 0.0, (epsilon * a0) ** 2 / sig2, np.inf)
    return float(min(t1.min(), t2.min()))


def tau_leap_variant_rates(scaled: ScaledModel, z, tau: float,
                           variant: str) -> np.ndarray:
    """Frozen rates a_j for the leap: at z, or at the Euler-predicted state."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if variant == "explicit":
        return scaled.a(z)
    if variant not in ("implicit_rate", "midpoint"):
        raise ValueError(f"unknown variant {variant!r}")
    scale = tau if variant == "implicit_rate" else 0.5 * tau
    predicted = z + scale * scaled.drift(z)
    return scaled.N * np.maximum(scaled.base.beta(predicted), 0.0)


def tau_leap_explicit(scaled: ScaledModel, x0, T: float, config: TauLeapConfig,
                      rng: RngStream, record_dt: Optional[float] = None
                      ) -> tuple[Trajectory, SimStats]:
    """Plain tau-leaping (steps 1-6, with the SSA fallback in step 3).

    The variant field selects where rates are frozen; domain violations are
    counted in the stats but the state is left untouched.
    """
    if config.variant == "modified":
        raise ValueError("use tau_leap_modified for the critical-reaction variant")
    coefs, exps, nmono = _tables(scaled.base)
    mode, dt, cap = _rec_args(T, record_dt)
    t0 = time.perf_counter()
    times, states, counts, fallbacks, leaps, violations, absorbed = K.tau_leap_kernel(
        _counts(scaled, x0), float(scaled.N), scaled.base.jump_directions,
        coefs, exps, nmono, float(T), rng.kernel_seed, config.epsilon,
        config.n_fallback, config.n_burst, _VARIANTS[config.variant],
        config.as_printed, mode, dt, cap, _sumcap(scaled.base, scaled.N))
    stats = SimStats(event_counts=counts[-1].copy(), fallbacks=int(fallbacks),
                     leaps=int(leaps), violations=int(violations),
                     seconds=time.perf_counter() - t0, absorbed=bool(absorbed))
    traj = _trajectory(times, states, scaled.N, "tau_leap",
                       {"stats": stats, "variant": config.variant,
                        "N": scaled.N, "seed": (rng.seed, rng.index)})
    return traj, stats


def tau_leap_modified(scaled: ScaledModel, x0, T: float, config: TauLeapConfig,
                      rng: RngStream, record_dt: Optional[float] = None
                      ) -> tuple[Trajectory, SimStats]:
    """Critical-reaction tau-leaping (steps 1-9): criticality in individual
    counts including the virtual complement, one critical firing per leap,
    halving repair of domain violations.

    Raises RepairExhaustedError when ``max_halvings`` repairs leave the state
    outside the domain.
    """
    coefs, exps, nmono = _tables(scaled.base)
    mode, dt, cap = _rec_args(T, record_dt)
    t0 = time.perf_counter()
    res = K.modified_tau_leap_kernel(
        _counts(scaled, x0), float(scaled.N), scaled.base.jump_directions,
        coefs, exps, nmono, float(T), rng.kernel_seed, config.epsilon,
        config.n_fallback, config.n_burst, config.n_c, config.max_halvings,
        config.repair == "thinning", config.as_printed, mode, dt, cap,
        _sumcap(scaled.base, scaled.N))
    times, states, counts, fallbacks, leaps, repairs, flag, absorbed = res
    stats = SimStats(event_counts=counts[-1].copy(), fallbacks=int(fallbacks),
                     leaps=int(leaps), repairs=int(repairs),
                     seconds=time.perf_counter() - t0, absorbed=bool(absorbed))
    if flag == K.REPAIR_EXHAUSTED:
        raise RepairExhaustedError(
            f"state outside domain after {config.max_halvings} leap halvings "
            f"(t ~ {times[-1]:.6g}); stats: {stats}")
    traj = _trajectory(times, states, scaled.N, "tau_leap",
                       {"stats": stats, "variant": "modified",
                        "N": scaled.N, "seed": (rng.seed, rng.index)})
    return traj, stats


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleSpec:
    model: CompartmentalModel
    N: int
    x0: tuple
    T: float
    simulator: str                       # "ssa" | "tau_leap"
    record_dt: float = 1.0
    config: TauLeapConfig = field(default_factory=TauLeapConfig)


@dataclass
class EnsembleSummary:
    times: np.ndarray
    mean: np.ndarray          # (g, d)
    var: np.ndarray
    min: np.ndarray
    max: np.ndarray
    replicates: int
    paths: Optional[np.ndarray] = None
    total_events: int = 0
    total_fallbacks: int = 0
    total_repairs: int = 0
    seconds: float = 0.0


def _run_one(spec: EnsembleSpec, seed: int, index: int):
    scaled = spec.model.scaled(spec.N)
    rng = RngStream(seed, index)
    if spec.simulator == "ssa":
        tr = ssa_direct(scaled, spec.x0, spec.T, rng, record_dt=spec.record_dt)
        stats = tr.meta["stats"]
    elif spec.simulator == "tau_leap":
        if spec.config.variant == "modified":
            tr, stats = tau_leap_modified(scaled, spec.x0, spec.T, spec.config,
                                          rng, record_dt=spec.record_dt)
        else:
            tr, stats = tau_leap_explicit(scaled, spec.x0, spec.T, spec.config,
                                          rng, record_dt=spec.record_dt)
    else:
        raise ValueError(f"unknown simulator {spec.simulator!r}")
    return tr.states, stats


def ensemble_run(spec: EnsembleSpec, replicates: int, seed: int,
                 threads: int = 1, keep_paths: bool = False) -> EnsembleSummary:
    """Independent replicates on a common time grid, reduced deterministically.

    Replicate i uses RngStream(seed, i); the reduction runs in replicate order,
    so results are identical for any thread count.
    """
    t0 = time.perf_counter()
    n_grid = int(np.ceil(spec.T / spec.record_dt)) + 1
    d = spec.model.dimension
    paths = np.empty((replicates, n_grid, d))
    events = 0
    fallbacks = 0
    repairs = 0

    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = {pool.submit(_run_one, spec, seed, i): i for i in range(replicates)}
            for fut, i in futs.items():
                states, stats = fut.result()
                paths[i] = states[:n_grid]
                events += int(stats.event_counts.sum())
                fallbacks += stats.fallbacks
                repairs += stats.repairs
    else:
        for i in range(replicates):
            states, stats = _run_one(spec, seed, i)
            paths[i] = states[:n_grid]
            events += int(stats.event_counts.sum())
            fallbacks += stats.fallbacks
            repairs += stats.repairs

    times = np.arange(n_grid) * spec.record_dt
    return EnsembleSummary(
        times=times, mean=paths.mean(axis=0), var=paths.var(axis=0),
        min=paths.min(axis=0), max=paths.max(axis=0), replicates=replicates,
        paths=paths if keep_paths else None, total_events=events,
        total_fallbacks=fallbacks, total_repairs=repairs,
        seconds=time.perf_counter() - t0)
