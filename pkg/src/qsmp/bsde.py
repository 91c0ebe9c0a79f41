"""Regression-based backward solvers.

Scheme: at each step the martingale integrand Z is recovered first by
regressing Y_{i+1} dW_i / dt on features of the current state, then Y_i is
resolved from E[Y_{i+1} | state] plus the generator. The quadratic solver
iterates the implicit y-argument to a fixed point (a contraction while
dt * |f_y| < 1) and caps |Z| inside the generator; the affine solver inverts
its y-dependence exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bmo
from .errors import SolverError
from .model import DerivedConstants, ProblemSpec, derive_constants
from .paths import BrownianBatch, ForwardBatch, TimeGrid
from .regression import (  # noqa: F401  (re-exported: the public regression surface)
    IllConditionedBasisError,
    RegressionBasis,
    RegressionResult,
    StepFit,
    StepRegressor,
    default_ridge,
    regress_conditional_expectation,
)

_FIXED_POINT_MAX = 50
_FIXED_POINT_TOL = 1e-13


@dataclass
class BackwardSolution:
    """Discrete (Y, Z) pair on a path batch.

    ``Z[:, i]`` is the regressed integrand on [t_i, t_{i+1}) (zero at the
    terminal index, where no regression happens); ``y_fits``/``z_fits`` hold
    the per-step regression coefficients so the solution can be re-evaluated
    at arbitrary states and exported for diagnosis.
    """

    Y: np.ndarray  # (M, N+1)
    Z: np.ndarray  # (M, N+1, d)
    basis: RegressionBasis
    truncation_radius: float
    y_fits: list = field(default_factory=list)  # StepFit per step 0..N-1
    z_fits: list = field(default_factory=list)
    #: Pathwise terminal-plus-driver sums xi_m + sum_i f_m(t_i) dt. Because
    #: every regression preserves batch means, Y_0 equals the mean of these,
    #: and their spread yields an honest standard error for Y_0.
    pathwise_targets: np.ndarray | None = None

    @property
    def y0(self) -> float:
        return float(self.Y[:, 0].mean())

    @property
    def y0_standard_error(self) -> float:
        """Standard error of the time-zero value, from the spread of the
        pathwise terminal-plus-driver sums (the smoothed per-path values at
        early steps hide most of the estimator variance and must not be
        used for this)."""
        if self.pathwise_targets is not None:
            m_paths = self.pathwise_targets.shape[0]
            return float(self.pathwise_targets.std() / math.sqrt(m_paths))
        m_paths = self.Y.shape[0]
        return float(self.Y[:, 1].std() / math.sqrt(m_paths))


def default_truncation_radius(constants: DerivedConstants, horizon: float) -> float:
    """Heuristic cap on |Z| inside the generator: the theory bounds the
    time-average of |Z|^2 by A/T, and the cap allows ten times that scale."""
    return 10.0 * math.sqrt(constants.A / horizon)


def _truncate_rows(z: np.ndarray, radius: float) -> np.ndarray:
    if not math.isfinite(radius):
        return z
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    factor = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return z * factor


def solve_quadratic_bsde(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    forward: ForwardBatch,
    basis: RegressionBasis | None = None,
    truncation_radius: float | None = None,
    constants: DerivedConstants | None = None,
    ridge: float | None = None,
) -> BackwardSolution:
    """Backward component of the state system, allowing quadratic z-growth in
    the generator. Aborts if the fixed-point sub-iteration stalls or |Y|
    exceeds ten times the theoretical ceiling (both signal misconfiguration).
    """
    if basis is None:
        basis = RegressionBasis("polynomial", 3)
    if constants is None:
        constants = derive_constants(spec)
    if truncation_radius is None:
        truncation_radius = default_truncation_radius(constants, spec.T)
    abort_level = 10.0 * constants.A

    m_paths, n_steps = noise.M, grid.N
    dt = grid.dt
    times = grid.times
    co = spec.coeffs

    y_vals = np.empty((m_paths, n_steps + 1))
    z_vals = np.zeros((m_paths, n_steps + 1, spec.d))
    y_vals[:, n_steps] = np.asarray(co.Phi(forward.states[:, n_steps]), dtype=np.float64)

    y_fits = [None] * n_steps
    z_fits = [None] * n_steps
    driver_sum = np.zeros(m_paths)
    for i in range(n_steps - 1, -1, -1):
        reg = StepRegressor(basis, forward.states[:, i], ridge)
        cond_y, y_fits[i] = reg.fit(y_vals[:, i + 1])
        # Martingale control variate: centering the target leaves the
        # conditional expectation unchanged but removes the O(1/dt) variance
        # the conditional mean would otherwise inject into the Z estimate.
        z_target = (y_vals[:, i + 1] - cond_y)[:, None] * noise.increments[:, i] / dt
        z_i, z_fits[i] = reg.fit(z_target)
        z_i = _truncate_rows(z_i, truncation_radius)

        x_i = forward.states[:, i]
        u_i = forward.controls[:, i]
        y_i = cond_y.copy()
        converged = False
        for _ in range(_FIXED_POINT_MAX):
            drift = np.asarray(co.f(times[i], x_i, y_i, z_i, u_i), dtype=np.float64)
            y_new = cond_y + drift * dt
            gap = np.abs(y_new - y_i).max()
            y_i = y_new
            if gap <= _FIXED_POINT_TOL * (1.0 + np.abs(y_i).max()):
                converged = True
                break
        if not converged:
            raise SolverError("fixed-point sub-iteration did not converge", step=i)
        if not np.all(np.isfinite(y_i)):
            raise SolverError("backward value turned non-finite", step=i)
        if np.abs(y_i).max() > abort_level:
            raise SolverError(
                f"|Y| exceeded 10*A = {abort_level:.3g}; bound violation signals misconfiguration",
                step=i,
            )
        y_vals[:, i] = y_i
        z_vals[:, i] = z_i
        driver_sum += drift * dt

    targets = y_vals[:, n_steps] + driver_sum
    return BackwardSolution(y_vals, z_vals, basis, truncation_radius, y_fits, z_fits, targets)


@dataclass(frozen=True)
class LinearBSDEData:
    """Affine-generator data: terminal xi, bounded slope lam, integrand-load
    mu, and driver phi, all given per path-step on the grid."""

    xi: np.ndarray  # (M,)
    lam: np.ndarray  # (M, N)
    mu: np.ndarray  # (M, N, d)
    phi: np.ndarray  # (M, N)

    @staticmethod
    def from_broadcast(m_paths: int, n_steps: int, d: int, xi, lam=0.0, mu=0.0, phi=0.0):
        """Convenience constructor broadcasting scalars/vectors to full shape."""
        return LinearBSDEData(
            xi=np.broadcast_to(np.asarray(xi, dtype=np.float64), (m_paths,)).copy(),
            lam=np.broadcast_to(np.asarray(lam, dtype=np.float64), (m_paths, n_steps)).copy(),
            mu=np.broadcast_to(np.asarray(mu, dtype=np.float64), (m_paths, n_steps, d)).copy(),
            phi=np.broadcast_to(np.asarray(phi, dtype=np.float64), (m_paths, n_steps)).copy(),
        )


def solve_linear_bsde(
    data: LinearBSDEData,
    grid: TimeGrid,
    noise: BrownianBatch,
    features: np.ndarray,
    basis: RegressionBasis | None = None,
    ridge: float | None = None,
) -> BackwardSolution:
    """Same backward scheme with an affine generator lam y + mu . z + phi;
    no truncation and no fixed point (the y-dependence is inverted exactly).

    ``features`` (M, N+1, m) supplies the regression state per step; pass the
    forward states for Markovian problems, or an augmented state when the
    solution depends on more than the base trajectory.
    """
    if basis is None:
        basis = RegressionBasis("polynomial", 3)
    m_paths, n_steps = noise.M, grid.N
    dt = grid.dt
    if data.lam.shape != (m_paths, n_steps):
        raise ValueError("lam must have shape (M, N)")

    y_vals = np.empty((m_paths, n_steps + 1))
    z_vals = np.zeros((m_paths, n_steps + 1, noise.d))
    y_vals[:, n_steps] = data.xi

    y_fits = [None] * n_steps
    z_fits = [None] * n_steps
    driver_sum = np.zeros(m_paths)
    for i in range(n_steps - 1, -1, -1):
        reg = StepRegressor(basis, features[:, i], ridge)
        cond_y, y_fits[i] = reg.fit(y_vals[:, i + 1])
        z_target = (y_vals[:, i + 1] - cond_y)[:, None] * noise.increments[:, i] / dt
        z_i, z_fits[i] = reg.fit(z_target)

        denom = 1.0 - dt * data.lam[:, i]
        if np.abs(denom).min() < 1e-8:
            raise SolverError("implicit linear step is singular (dt * lam too close to 1)", step=i)
        drift = np.einsum("md,md->m", data.mu[:, i], z_i) + data.phi[:, i]
        y_i = (cond_y + dt * drift) / denom
        if not np.all(np.isfinite(y_i)):
            raise SolverError("backward value turned non-finite", step=i)
        y_vals[:, i] = y_i
        z_vals[:, i] = z_i
        driver_sum += (data.lam[:, i] * y_i + drift) * dt

    targets = data.xi + driver_sum
    return BackwardSolution(y_vals, z_vals, basis, math.inf, y_fits, z_fits, targets)


@dataclass
class MomentCheck:
    p: int
    value: float
    bound: float
    passed: bool


@dataclass
class BoundReport:
    """Empirical a-priori diagnostics of a quadratic backward solution."""

    sup_abs_y: float
    bmo2_estimate: float
    combined: float  # sup|Y| + bmo2^2
    ceiling: float  # A
    combined_passed: bool
    moment_checks: list

    def to_dict(self) -> dict:
        return {
            "sup_abs_y": self.sup_abs_y,
            "bmo2_estimate": self.bmo2_estimate,
            "combined": self.combined,
            "ceiling": self.ceiling,
            "combined_passed": self.combined_passed,
            "moment_checks": [
                {"p": m.p, "value": m.value, "bound": m.bound, "pass": m.passed}
                for m in self.moment_checks
            ],
        }


def estimate_apriori_bound(
    solution: BackwardSolution,
    constants: DerivedConstants,
    grid: TimeGrid,
    forward: ForwardBatch | None = None,
    basis: RegressionBasis | None = None,
) -> BoundReport:
    """Check the solution against its theoretical ceiling: the sup of |Y| plus
    the squared BMO2 estimate of the Z-integral must stay below A, and the
    moments of the quadratic variation below ([p]+1)! A^(2p)."""
    sup_y = float(np.abs(solution.Y).max())
    integrand = solution.Z[:, : grid.N, :]
    features = forward.states if forward is not None else None
    est = bmo.estimate_bmo2(integrand, grid, features=features, basis=basis)
    combined = sup_y + est**2
    qv = bmo.quadratic_variation(integrand, grid)
    checks = []
    for p in (1, 2, 3):
        value = float((qv**p).mean())
        bound = math.factorial(p + 1) * constants.A ** (2 * p)
        checks.append(MomentCheck(p, value, bound, value < bound))
    return BoundReport(
        sup_abs_y=sup_y,
        bmo2_estimate=est,
        combined=combined,
        ceiling=constants.A,
        combined_passed=combined < constants.A,
        moment_checks=checks,
    )
