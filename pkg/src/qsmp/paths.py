"""Time discretisation, Brownian batches, and Euler stepping of the state
dynamics and of their linearisation along a control perturbation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ExplosionError
from .model import ProblemSpec

EXPLOSION_GUARD = 1e8


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into N steps; the last point is pinned to T."""

    N: int
    T: float

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        times = np.arange(self.N + 1) * self.dt
        times[-1] = self.T
        return times


@dataclass(frozen=True)
class BrownianBatch:
    """Batch of Brownian increments, reproducible from (seed, stream_id)."""

    increments: np.ndarray  # (M, N, d)
    seed: int
    stream_id: int

    @property
    def M(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[2]


def simulate_brownian(grid: TimeGrid, M: int, d: int, seed: int, stream_id: int = 0) -> BrownianBatch:
    """Normal(0, dt) increments, independent across (path, step, component).

    The same (seed, stream_id) regenerates the batch bit-for-bit; disjoint
    stream ids give independent batches for partitioned simulation.
    """
    if M < 1 or d < 1:
        raise ValueError("M and d must be >= 1")
    rng = np.random.default_rng([int(seed), int(stream_id), 0x5D])
    incs = rng.standard_normal((M, grid.N, d)) * math.sqrt(grid.dt)
    incs.setflags(write=False)
    return BrownianBatch(incs, int(seed), int(stream_id))


class Control:
    """A control policy evaluated step by step along simulated states."""

    def values(self, i: int, t: float, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class FeedbackControl(Control):
    """Markovian feedback map u(t, x); ``fn(t, states (M,n)) -> (M,k)``."""

    fn: object
    k: int

    def values(self, i, t, states):
        out = np.asarray(self.fn(t, states), dtype=np.float64)
        if out.shape != (states.shape[0], self.k):
            raise ValueError(f"feedback returned shape {out.shape}, expected (M, {self.k})")
        return out


@dataclass(frozen=True)
class OpenLoopControl(Control):
    """Per-path control table on the grid, shape (M, N+1, k)."""

    table: np.ndarray

    def values(self, i, t, states):
        return self.table[:, i, :]


@dataclass(frozen=True)
class ConstantControl(Control):
    value: tuple

    def values(self, i, t, states):
        return np.broadcast_to(np.asarray(self.value, dtype=np.float64), (states.shape[0], len(self.value)))


def realize_control_along(control: Control, grid: TimeGrid, states: np.ndarray) -> np.ndarray:
    """Evaluate a control along a given state trajectory, yielding the adapted
    open-loop table (M, N+1, k) it induces."""
    if isinstance(control, OpenLoopControl):
        return np.asarray(control.table, dtype=np.float64)
    times = grid.times
    first = control.values(0, times[0], states[:, 0])
    table = np.empty((states.shape[0], grid.N + 1, first.shape[1]))
    table[:, 0] = first
    for i in range(1, grid.N + 1):
        table[:, i] = control.values(i, times[i], states[:, i])
    return table


@dataclass(frozen=True)
class ForwardBatch:
    """States and realized controls of the forward equation on the grid."""

    states: np.ndarray  # (M, N+1, n)
    controls: np.ndarray  # (M, N+1, k)


@dataclass(frozen=True)
class VariationalForwardBatch:
    """First-order state response to a control perturbation; starts at zero."""

    states: np.ndarray  # (M, N+1, n)
    perturbation: np.ndarray  # (M, N+1, k)


def solve_forward_sde(
    spec: ProblemSpec, grid: TimeGrid, noise: BrownianBatch, control: Control
) -> ForwardBatch:
    """Euler-Maruyama: X_{i+1} = X_i + b dt + sigma dW; exact for constant
    coefficients. Aborts with the step index if a state leaves the blow-up
    guard or turns non-finite."""
    m_paths = noise.M
    if noise.increments.shape[1] != grid.N or noise.d != spec.d:
        raise ValueError("noise batch does not match grid/spec dimensions")
    times = grid.times
    dt = grid.dt
    states = np.empty((m_paths, grid.N + 1, spec.n))
    states[:, 0] = spec.x0
    controls = np.empty((m_paths, grid.N + 1, spec.k))
    co = spec.coeffs
    for i in range(grid.N):
        x_i = states[:, i]
        u_i = control.values(i, times[i], x_i)
        controls[:, i] = u_i
        drift = np.asarray(co.b(times[i], x_i, u_i), dtype=np.float64)
        diff = np.asarray(co.sigma(times[i], x_i, u_i), dtype=np.float64)
        nxt = x_i + drift * dt + np.einsum("mnd,md->mn", diff, noise.increments[:, i])
        if not np.all(np.isfinite(nxt)) or np.abs(nxt).max() > EXPLOSION_GUARD:
            raise ExplosionError("forward state left the admissible range", step=i)
        states[:, i + 1] = nxt
    controls[:, grid.N] = control.values(grid.N, times[-1], states[:, grid.N])
    return ForwardBatch(states, controls)


def as_perturbation_table(uhat, grid: TimeGrid, base: ForwardBatch) -> np.ndarray:
    """Normalise a perturbation given as a table or a control into a table
    evaluated along the base trajectory."""
    if isinstance(uhat, Control):
        return realize_control_along(uhat, grid, base.states)
    table = np.asarray(uhat, dtype=np.float64)
    expected = (base.states.shape[0], grid.N + 1, base.controls.shape[2])
    if table.shape != expected:
        raise ValueError(f"perturbation table has shape {table.shape}, expected {expected}")
    return table


def solve_variational_sde(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    base: ForwardBatch,
    uhat,
) -> VariationalForwardBatch:
    """Linearised dynamics along the base trajectory, driven by the control
    perturbation; same Euler scheme and noise as the base solve."""
    table = as_perturbation_table(uhat, grid, base)
    m_paths = noise.M
    times = grid.times
    dt = grid.dt
    states = np.zeros((m_paths, grid.N + 1, spec.n))
    co = spec.coeffs
    for i in range(grid.N):
        x_i = base.states[:, i]
        u_i = base.controls[:, i]
        v_i = states[:, i]
        h_i = table[:, i]
        bx = np.asarray(co.b_x(times[i], x_i, u_i), dtype=np.float64)
        bu = np.asarray(co.b_u(times[i], x_i, u_i), dtype=np.float64)
        sx = np.asarray(co.sigma_x(times[i], x_i, u_i), dtype=np.float64)
        su = np.asarray(co.sigma_u(times[i], x_i, u_i), dtype=np.float64)
        drift = np.einsum("mij,mj->mi", bx, v_i) + np.einsum("mik,mk->mi", bu, h_i)
        cols = np.einsum("mdij,mj->mdi", sx, v_i) + np.einsum("mdik,mk->mdi", su, h_i)
        nxt = v_i + drift * dt + np.einsum("mdi,md->mi", cols, noise.increments[:, i])
        if not np.all(np.isfinite(nxt)) or np.abs(nxt).max() > EXPLOSION_GUARD:
            raise ExplosionError("variational state left the admissible range", step=i)
        states[:, i + 1] = nxt
    return VariationalForwardBatch(states, table)


DEFAULT_EPSILONS = (0.25, 0.125, 0.0625, 0.03125, 0.015625)

#: Relative floor (on squared sup errors) below which a remainder is treated
#: as exactly zero rather than fitted; roundoff accumulation sits well below.
_DEGENERATE_FLOOR = 1e-20


@dataclass
class RateReport:
    """Fitted log-log rates of the first-order error and of the expansion
    remainder, both measured as E[sup_t |.|^2] against the perturbation size.

    A remainder that vanishes to roundoff (exactly linear problems) reports an
    infinite slope with the ``remainder_degenerate`` flag: the small-o claim
    holds trivially, there is just no finite rate to fit.
    """

    epsilons: list
    first_order_errors: list
    remainder_errors: list
    first_order_slope: float
    remainder_slope: float
    first_order_inconclusive: bool
    remainder_inconclusive: bool
    remainder_degenerate: bool

    def to_dict(self) -> dict:
        return {
            "epsilons": list(self.epsilons),
            "first_order_errors": list(self.first_order_errors),
            "remainder_errors": list(self.remainder_errors),
            "first_order_slope": self.first_order_slope,
            "remainder_slope": self.remainder_slope,
            "first_order_inconclusive": self.first_order_inconclusive,
            "remainder_inconclusive": self.remainder_inconclusive,
            "remainder_degenerate": self.remainder_degenerate,
        }


def fit_loglog_slope(epsilons, errors, floor) -> tuple[float, bool, bool]:
    """(slope, inconclusive, degenerate): least-squares slope of log2(err)
    against log2(eps), ignoring error levels at or below the floor."""
    eps = np.asarray(epsilons, dtype=np.float64)
    err = np.asarray(errors, dtype=np.float64)
    valid = err > floor
    if not np.any(valid):
        return math.inf, True, True
    if np.count_nonzero(valid) < 2:
        return math.nan, True, False
    lx = np.log2(eps[valid])
    ly = np.log2(err[valid])
    slope = float(np.polyfit(lx, ly, 1)[0])
    return slope, False, False


def sup_sq_error(a: np.ndarray, b: np.ndarray) -> float:
    """E over paths of sup over steps of |a - b|^2 (Euclidean in the state)."""
    diff = a - b
    sq = np.einsum("min,min->mi", diff, diff)
    return float(sq.max(axis=1).mean())


def expansion_rate_check(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    u_bar: Control,
    u: Control,
    epsilons=DEFAULT_EPSILONS,
) -> RateReport:
    """Empirical first-order expansion rates of the state under the convex
    perturbation u_bar + eps (u - u_bar), all solves on common noise.

    The first-order error E[sup |X^eps - X|^2] should decay with slope near 2;
    the remainder against the linearised response should decay strictly
    faster.
    """
    eps_list = [float(e) for e in epsilons]
    if len(eps_list) < 4:
        raise ValueError("need at least 4 epsilon values")
    if any(not 0.0 < e <= 1.0 for e in eps_list):
        raise ValueError("epsilons must lie in (0, 1]")
    base = solve_forward_sde(spec, grid, noise, u_bar)
    u_table = realize_control_along(u, grid, base.states)
    uhat = u_table - base.controls
    var = solve_variational_sde(spec, grid, noise, base, uhat)

    first_errors = []
    rem_errors = []
    for eps in eps_list:
        perturbed = solve_forward_sde(
            spec, grid, noise, OpenLoopControl(base.controls + eps * uhat)
        )
        first_errors.append(sup_sq_error(perturbed.states, base.states))
        rem_errors.append(sup_sq_error(perturbed.states, base.states + eps * var.states))

    scale = max(1.0, sup_sq_error(base.states, np.zeros_like(base.states)))
    floor = _DEGENERATE_FLOOR * scale
    first_slope, first_inc, _ = fit_loglog_slope(eps_list, first_errors, floor)
    rem_slope, rem_inc, rem_degen = fit_loglog_slope(eps_list, rem_errors, floor)
    return RateReport(
        epsilons=eps_list,
        first_order_errors=first_errors,
        remainder_errors=rem_errors,
        first_order_slope=first_slope,
        remainder_slope=rem_slope,
        first_order_inconclusive=first_inc,
        remainder_inconclusive=rem_inc,
        remainder_degenerate=rem_degen,
    )
