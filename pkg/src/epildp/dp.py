"""Backward dynamic programming for the exit cost V-bar.

The horizon-T value of steering from x to the exit target with piecewise
constant controls is computed by value iteration indexed by steps-to-go: the
stage cost dt * L(x, (x'-x)/dt) does not depend on the time slice, so one
backward sweep serves every horizon in the schedule at once.

SIS uses the closed-form cost with destinations refined off-grid by a
golden-section search on the linearly interpolated value function.  The
vaccination model minimizes over grid destinations only (no interpolation),
on a rotated grid with one axis along the line through the stable and the
unstable endemic equilibria.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NotBistableError
from .lagrangian import lagrangian_batch, sis_lagrangian_ext
from .models import (CompartmentalModel, Equilibrium, Trajectory, default_seed_grid,
                     find_equilibria, siv_reduced, siv_to_iv)

_GOLDEN_DEPTH = 20
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Grid1D:
    """Uniform grid on [0, 1] with the exit target at a boundary point."""

    points: np.ndarray
    dt: float
    target: float
    x_start: float

    @property
    def dx(self) -> float:
        return float(self.points[1] - self.points[0])

    @property
    def size(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class RotatedGrid2D:
    """Grid in the (I, V) plane with axis 1 along the x* -> x~ line.

    dx1 is snapped so the unstable equilibrium sits exactly on a node; nodes
    keep a safety margin from the domain boundary so every rate is positive.
    """

    origin: np.ndarray            # x* in (I, V)
    u1: np.ndarray
    u2: np.ndarray
    dx1: float
    dx2: float
    dt: float
    nodes: np.ndarray             # (M, 2)
    ij: np.ndarray                # (M, 2) integer offsets from the origin node
    start_node: int
    target_node: int
    target_point: np.ndarray      # x~ in (I, V)
    offsets: np.ndarray           # (W, 2) window displacements in cells
    dest_ids: np.ndarray          # (M, W) int32, -1 where off-grid
    max_speed: float

    @property
    def size(self) -> int:
        return len(self.nodes)


def build_grid_sis(model: CompartmentalModel, dt: float, dx: float) -> Grid1D:
    p = model.params
    if p["beta"] <= p["gamma"]:
        raise ValueError("SIS exit problem needs beta > gamma (endemic equilibrium)")
    n_bar = int(round(1.0 / dx))
    points = np.linspace(0.0, 1.0, n_bar + 1)
    return Grid1D(points=points, dt=dt, target=0.0, x_start=1.0 - p["gamma"] / p["beta"])


def _classify_iv_equilibria(eqs: Sequence[Equilibrium]):
    x_star = next((e for e in eqs if e.stability == "stable" and e.kind == "endemic"), None)
    x_tilde = next((e for e in eqs if e.stability == "unstable" and e.kind == "endemic"), None)
    if x_star is None or x_tilde is None:
        raise NotBistableError("need a stable and an unstable endemic equilibrium")
    return x_star.point, x_tilde.point


def build_grid_siv(model: CompartmentalModel, dt: float, dx1: float, dx2: float,
                   *, extent_back: float = 0.15, extent_fwd: float = 0.15,
                   extent_side: float = 0.20, max_speed: float = 1.5,
                   margin: Optional[float] = None,
                   equilibria: Optional[Sequence[Equilibrium]] = None) -> RotatedGrid2D:
    if equilibria is None:
        equilibria = find_equilibria(model, default_seed_grid(model, per_axis=7))
    x_star, x_tilde = _classify_iv_equilibria(equilibria)
    sep = x_tilde - x_star
    dist = float(np.linalg.norm(sep))
    u1 = sep / dist
    u2 = np.array([u1[1], -u1[0]])
    n1 = max(1, int(round(dist / dx1)))
    dx1 = dist / n1                      # snap: x~ lands exactly on a node
    margin = margin if margin is not None else 0.5 * min(dx1, dx2)

    i_lo, i_hi = -int(round(extent_back / dx1)), n1 + int(round(extent_fwd / dx1))
    j_hi = int(round(extent_side / dx2))
    ii, jj = np.meshgrid(np.arange(i_lo, i_hi + 1), np.arange(-j_hi, j_hi + 1),
                         indexing="ij")
    ij = np.stack([ii.ravel(), jj.ravel()], axis=1)
    pts = x_star[None, :] + ij[:, :1] * dx1 * u1[None, :] + ij[:, 1:] * dx2 * u2[None, :]
    keep = ((pts[:, 0] >= margin) & (pts[:, 1] >= margin)
            & (pts.sum(axis=1) <= 1.0 - margin))
    ij = ij[keep]
    nodes = pts[keep]

    ni = i_hi - i_lo + 1
    nj = 2 * j_hi + 1
    lut = -np.ones((ni, nj), dtype=np.int32)
    lut[ij[:, 0] - i_lo, ij[:, 1] + j_hi] = np.arange(len(nodes), dtype=np.int32)

    start = lut[0 - i_lo, j_hi]
    target = lut[n1 - i_lo, j_hi]
    if start < 0 or target < 0:
        raise ValueError("margin excluded an equilibrium node; reduce margin or move extents")

    r1 = max(1, int(math.ceil(max_speed * dt / dx1)))
    r2 = max(1, int(math.ceil(max_speed * dt / dx2)))
    d1, d2 = np.meshgrid(np.arange(-r1, r1 + 1), np.arange(-r2, r2 + 1), indexing="ij")
    disp = np.stack([d1.ravel(), d2.ravel()], axis=1)
    speed = np.hypot(disp[:, 0] * dx1, disp[:, 1] * dx2) / dt
    offsets = disp[speed <= max_speed + 1e-12]

    di = ij[:, None, 0] + offsets[None, :, 0] - i_lo
    dj = ij[:, None, 1] + offsets[None, :, 1] + j_hi
    inside = (di >= 0) & (di < ni) & (dj >= 0) & (dj < nj)
    dest = -np.ones(di.shape, dtype=np.int32)
    dest[inside] = lut[di[inside], dj[inside]]

    return RotatedGrid2D(origin=x_star, u1=u1, u2=u2, dx1=dx1, dx2=dx2, dt=dt,
                         nodes=nodes, ij=ij, start_node=int(start), target_node=int(target),
                         target_point=x_tilde, offsets=offsets, dest_ids=dest,
                         max_speed=max_speed)


# ---------------------------------------------------------------------------
# value function container
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ValueFunctionGrid:
    """Value and argmin-control tables indexed by steps-to-go."""

    grid: object
    mode: str                       # "sis" | "siv"
    n_steps: int
    values_final: np.ndarray        # value slice with n_steps to go
    controls: np.ndarray            # [m] row: SIS refined speeds, SIV dest ids
    value_trace: np.ndarray         # value at x* with m steps to go, m = 0..n_steps
    values_full: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def value_at_start(self, m: Optional[int] = None) -> float:
        m = self.n_steps if m is None else m
        return float(self.value_trace[m])


@dataclass(eq=False)
class ExitResult:
    vbar: float
    trajectory: Trajectory
    convergence: list                 # (T, value) pairs in schedule order
    grid_meta: dict
    assumptions: tuple
    vfg: ValueFunctionGrid


# ---------------------------------------------------------------------------
# SIS engine
# ---------------------------------------------------------------------------

def _sis_stage_matrix(xs: np.ndarray, dt: float, beta: float, gamma: float) -> np.ndarray:
    Y = (xs[None, :] - xs[:, None]) / dt
    X = np.repeat(xs[:, None], len(xs), axis=1)
    return dt * sis_lagrangian_ext(X.ravel(), Y.ravel(), beta, gamma).reshape(X.shape)


def _golden_refine(xs, lo, hi, w_prev, dt, beta, gamma, depth=_GOLDEN_DEPTH):
    """Vectorized golden-section over destination in [lo, hi] per source point."""

    def g(dest):
        cost = dt * sis_lagrangian_ext(xs, (dest - xs) / dt, beta, gamma)
        return cost + np.interp(dest, xs, w_prev)

    a, b = lo.copy(), hi.copy()
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = g(c), g(d)
    for _ in range(depth):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        d_new = np.where(left, c, a + _INVPHI * (b - a))
        c_new = np.where(left, b - _INVPHI * (b - a), d)
        fd_new = np.where(left, fc, fd)
        # one fresh evaluation per element
        fresh = np.where(left, c_new, d_new)
        f_fresh = g(fresh)
        fc = np.where(left, f_fresh, fd_new)
        fd = np.where(left, fd_new, f_fresh)
        c, d = c_new, d_new
    mid = 0.5 * (a + b)
    return mid, g(mid)


def sis_terminal(grid: Grid1D, beta: float, gamma: float) -> np.ndarray:
    xs = grid.points
    y = (grid.target - xs) / grid.dt
    return grid.dt * sis_lagrangian_ext(xs, y, beta, gamma)


def bellman_backward_sis(model: CompartmentalModel, grid: Grid1D, n_steps: int,
                         keep_full: bool = False,
                         checkpoints: Optional[Sequence[int]] = None,
                         stop_tol: Optional[float] = None) -> ValueFunctionGrid:
    beta, gamma = model.params["beta"], model.params["gamma"]
    xs = grid.points
    dt = grid.dt
    n_pts = len(xs)
    C = _sis_stage_matrix(xs, dt, beta, gamma)

    w = sis_terminal(grid, beta, gamma)
    controls = np.zeros((n_steps + 1, n_pts))
    controls[1] = (grid.target - xs) / dt
    trace = np.full(n_steps + 1, np.inf)
    trace[1] = float(np.interp(grid.x_start, xs, w))
    full = [w.copy()] if keep_full else None
    checkpoints = set(checkpoints or ())
    prev_check = None
    n_done = n_steps

    for m in range(2, n_steps + 1):
        total = C + w[None, :]
        j_best = np.argmin(total, axis=1)
        v_grid = total[np.arange(n_pts), j_best]
        lo = xs[np.maximum(j_best - 1, 0)]
        hi = xs[np.minimum(j_best + 1, n_pts - 1)]
        dest_ref, v_ref = _golden_refine(xs, lo, hi, w, dt, beta, gamma)
        use_ref = v_ref < v_grid
        w = np.where(use_ref, v_ref, v_grid)
        dest = np.where(use_ref, dest_ref, xs[j_best])
        controls[m] = (dest - xs) / dt
        trace[m] = float(np.interp(grid.x_start, xs, w))
        if keep_full:
            full.append(w.copy())
        if m in checkpoints and stop_tol is not None:
            if prev_check is not None and abs(trace[m] - prev_check) < stop_tol:
                n_done = m
                break
            prev_check = trace[m]

    return ValueFunctionGrid(grid=grid, mode="sis", n_steps=n_done, values_final=w,
                             controls=controls[:n_done + 1], value_trace=trace[:n_done + 1],
                             values_full=np.array(full) if keep_full else None,
                             meta={"beta": beta, "gamma": gamma})


def extract_trajectory_sis(vfg: ValueFunctionGrid, n_steps: Optional[int] = None,
                           start: Optional[float] = None) -> Trajectory:
    grid: Grid1D = vfg.grid
    n = vfg.n_steps if n_steps is None else n_steps
    xs = grid.points
    phi = grid.x_start if start is None else float(start)
    states = [phi]
    for m in range(n, 1, -1):
        alpha = float(np.interp(phi, xs, vfg.controls[m]))
        phi = min(max(phi + alpha * grid.dt, 0.0), 1.0)
        states.append(phi)
    states.append(grid.target)
    times = np.arange(n + 1) * grid.dt
    return Trajectory(times, np.array(states)[:, None], "dp",
                      meta={"horizon": n * grid.dt})


# ---------------------------------------------------------------------------
# SIV engine
# ---------------------------------------------------------------------------

def siv_stage_costs(model: CompartmentalModel, grid: RotatedGrid2D) -> np.ndarray:
    """(M, W) one-step costs dt * L(node, (dest - node)/dt); +inf off-grid."""
    H = model.jump_directions.astype(float)
    B = np.maximum(model.beta_batch(grid.nodes), 0.0)
    M, W = grid.dest_ids.shape
    C = np.full((M, W), np.inf)
    disp = (grid.offsets[:, :1] * grid.dx1 * grid.u1[None, :]
            + grid.offsets[:, 1:] * grid.dx2 * grid.u2[None, :])
    for widx in range(W):
        valid = grid.dest_ids[:, widx] >= 0
        if not valid.any():
            continue
        y = np.broadcast_to(disp[widx] / grid.dt, (int(valid.sum()), 2))
        vals, _ = lagrangian_batch(H, B[valid], y)
        C[valid, widx] = grid.dt * vals
    return C


def siv_terminal(model: CompartmentalModel, grid: RotatedGrid2D) -> np.ndarray:
    H = model.jump_directions.astype(float)
    B = np.maximum(model.beta_batch(grid.nodes), 0.0)
    Y = (grid.target_point[None, :] - grid.nodes) / grid.dt
    vals, _ = lagrangian_batch(H, B, Y)
    return grid.dt * vals


def bellman_backward_siv(model: CompartmentalModel, grid: RotatedGrid2D, n_steps: int,
                         stage: Optional[np.ndarray] = None,
                         checkpoints: Optional[Sequence[int]] = None,
                         stop_tol: Optional[float] = None) -> ValueFunctionGrid:
    C = siv_stage_costs(model, grid) if stage is None else stage
    M = grid.size
    dest_safe = np.where(grid.dest_ids >= 0, grid.dest_ids, M).astype(np.int64)

    w = siv_terminal(model, grid)
    controls = np.zeros((n_steps + 1, M), dtype=np.int32)
    controls[1] = grid.target_node
    trace = np.full(n_steps + 1, np.inf)
    trace[1] = float(w[grid.start_node])
    checkpoints = set(checkpoints or ())
    prev_check = None
    n_done = n_steps

    rows = np.arange(M)
    w_ext = np.empty(M + 1)
    for m in range(2, n_steps + 1):
        w_ext[:M] = w
        w_ext[M] = np.inf
        total = C + w_ext[dest_safe]
        best = np.argmin(total, axis=1)
        w = total[rows, best]
        controls[m] = grid.dest_ids[rows, best]
        trace[m] = float(w[grid.start_node])
        if m in checkpoints and stop_tol is not None:
            if prev_check is not None and abs(trace[m] - prev_check) < stop_tol:
                n_done = m
                break
            prev_check = trace[m]

    return ValueFunctionGrid(grid=grid, mode="siv", n_steps=n_done, values_final=w,
                             controls=controls[:n_done + 1], value_trace=trace[:n_done + 1],
                             meta={"dx1": grid.dx1, "dx2": grid.dx2,
                                   "max_speed": grid.max_speed})


def extract_trajectory_siv(vfg: ValueFunctionGrid, n_steps: Optional[int] = None,
                           start_node: Optional[int] = None) -> Trajectory:
    grid: RotatedGrid2D = vfg.grid
    n = vfg.n_steps if n_steps is None else n_steps
    node = grid.start_node if start_node is None else int(start_node)
    states = [grid.nodes[node]]
    for m in range(n, 1, -1):
        node = int(vfg.controls[m][node])
        if node < 0:
            break
        states.append(grid.nodes[node])
    states.append(grid.target_point)
    times = np.arange(len(states)) * grid.dt
    return Trajectory(times, np.array(states), "dp", meta={"horizon": n * grid.dt})


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def terminal_cost(grid, model: CompartmentalModel) -> np.ndarray:
    """Cost of jumping to the exit target in one step, per grid point."""
    if isinstance(grid, Grid1D):
        return sis_terminal(grid, model.params["beta"], model.params["gamma"])
    return siv_terminal(model, grid)


def bellman_backward(model: CompartmentalModel, grid, n_steps: int,
                     **kwargs) -> ValueFunctionGrid:
    if isinstance(grid, Grid1D):
        return bellman_backward_sis(model, grid, n_steps, **kwargs)
    return bellman_backward_siv(model, grid, n_steps, **kwargs)


def extract_trajectory(vfg: ValueFunctionGrid, n_steps: Optional[int] = None) -> Trajectory:
    if vfg.mode == "sis":
        return extract_trajectory_sis(vfg, n_steps)
    return extract_trajectory_siv(vfg, n_steps)


def compute_vbar(model: CompartmentalModel, schedule: Sequence[float] = (5, 10, 20, 40, 60),
                 *, dt: float = 0.01, dx: float = 0.01, dx2: Optional[float] = None,
                 tol: float = 1e-4, grid_kwargs: Optional[dict] = None) -> ExitResult:
    """Value of the exit problem for horizons from ``schedule``.

    Runs a single backward sweep (the Bellman operator does not depend on the
    time slice) and reads the start-state value at each scheduled horizon;
    stops once consecutive scheduled values differ by less than ``tol``.

    The vaccination model is handled on its reduced (I, V) representation and
    exits at the unstable endemic equilibrium; that target choice is an
    assumption recorded in the result, and the value is an upper bound.
    """
    schedule = sorted(float(T) for T in schedule)
    steps = [int(round(T / dt)) for T in schedule]
    if model.name == "siv":
        model = siv_reduced(**model.params)

    if model.name == "sis":
        grid = build_grid_sis(model, dt, dx)
        mode = "sis"
        assumptions = ("exit target is the extinction state 0",)
    elif model.name == "siv_iv":
        grid = build_grid_siv(model, dt, dx, dx2 if dx2 is not None else dx,
                              **(grid_kwargs or {}))
        mode = "siv"
        assumptions = ("exit target fixed to the unstable endemic equilibrium",
                       "grid-restricted destinations make the value an upper bound")
    else:
        raise ValueError(f"no exit-problem setup for model {model.name!r}")

    # one sweep to the largest horizon, stopping at a converged checkpoint
    n_max = steps[-1]
    if mode == "sis":
        vfg = bellman_backward_sis(model, grid, n_max, checkpoints=steps, stop_tol=tol)
    else:
        vfg = bellman_backward_siv(model, grid, n_max, checkpoints=steps, stop_tol=tol)

    convergence = [(T, vfg.value_at_start(n))
                   for T, n in zip(schedule, steps) if n <= vfg.n_steps]
    vbar = convergence[-1][1]
    traj = extract_trajectory(vfg)
    meta = {"dt": dt, "dx": dx, "mode": mode, "n_final": vfg.n_steps}
    if mode == "siv":
        meta.update({"dx1": grid.dx1, "dx2": grid.dx2, "nodes": grid.size,
                     "window": len(grid.offsets), "max_speed": grid.max_speed})
    return ExitResult(vbar=vbar, trajectory=traj, convergence=convergence,
                      grid_meta=meta, assumptions=assumptions, vfg=vfg)
