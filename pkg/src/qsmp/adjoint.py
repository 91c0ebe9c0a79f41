"""Adjoint system along a candidate-optimal trajectory.

Solves the vector backward equation for the costate pair (p, q), the scalar
auxiliary equation whose time-zero value is the cost derivative, the positive
exponential weight process, and the Hamiltonian with its control gradient.
Also verifies the algebraic decoupling between the backward linearisation and
the costate representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import BackwardSolution, LinearBSDEData, solve_linear_bsde
from .errors import SolverError
from .model import ProblemSpec
from .paths import BrownianBatch, ForwardBatch, TimeGrid, VariationalForwardBatch
from .regression import RegressionBasis, StepRegressor


@dataclass
class AdjointSolution:
    """Costate pair on the grid: p (M, N+1, n), q (M, N+1, n, d)."""

    p: np.ndarray
    q: np.ndarray
    basis: RegressionBasis
    p_fits: list = field(default_factory=list)
    q_fits: list = field(default_factory=list)


def _step_coefficients(spec: ProblemSpec, t, forward, backward, i):
    """Evaluate all linearisation coefficients along the trajectory at step i."""
    co = spec.coeffs
    x_i = forward.states[:, i]
    u_i = forward.controls[:, i]
    y_i = backward.Y[:, i]
    z_i = backward.Z[:, i]
    return {
        "x": x_i,
        "u": u_i,
        "f_x": np.asarray(co.f_x(t, x_i, y_i, z_i, u_i), dtype=np.float64),
        "f_y": np.asarray(co.f_y(t, x_i, y_i, z_i, u_i), dtype=np.float64),
        "f_z": np.asarray(co.f_z(t, x_i, y_i, z_i, u_i), dtype=np.float64),
        "f_u": np.asarray(co.f_u(t, x_i, y_i, z_i, u_i), dtype=np.float64),
        "b_x": np.asarray(co.b_x(t, x_i, u_i), dtype=np.float64),
        "b_u": np.asarray(co.b_u(t, x_i, u_i), dtype=np.float64),
        "sigma_x": np.asarray(co.sigma_x(t, x_i, u_i), dtype=np.float64),
        "sigma_u": np.asarray(co.sigma_u(t, x_i, u_i), dtype=np.float64),
    }


def solve_adjoint(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    forward: ForwardBatch,
    backward: BackwardSolution,
    basis: RegressionBasis | None = None,
    ridge: float | None = None,
) -> AdjointSolution:
    """Componentwise backward regression scheme for the costate system.

    Each q-column is recovered from the martingale increment of p against the
    matching Brownian component; the drift couples p and q through the
    state-sensitivity and generator-slope terms and is resolved implicitly in
    p (an (n x n) solve per path, scalar division when n = 1).
    """
    if basis is None:
        basis = RegressionBasis("polynomial", 3)
    m_paths, n_steps = noise.M, grid.N
    n, d = spec.n, spec.d
    dt = grid.dt
    times = grid.times

    p_vals = np.empty((m_paths, n_steps + 1, n))
    q_vals = np.zeros((m_paths, n_steps + 1, n, d))
    p_vals[:, n_steps] = np.asarray(spec.coeffs.Phi_x(forward.states[:, n_steps]), dtype=np.float64)

    p_fits = [None] * n_steps
    q_fits = [None] * n_steps
    eye = np.eye(n)
    for i in range(n_steps - 1, -1, -1):
        reg = StepRegressor(basis, forward.states[:, i], ridge)
        flat_next = p_vals[:, i + 1].reshape(m_paths, n)
        cond_p, p_fits[i] = reg.fit(flat_next)
        resid = flat_next - cond_p
        q_target = (resid[:, :, None] * noise.increments[:, i, None, :] / dt).reshape(m_paths, n * d)
        q_flat, q_fits[i] = reg.fit(q_target)
        q_i = q_flat.reshape(m_paths, n, d)

        c = _step_coefficients(spec, times[i], forward, backward, i)
        # drift matrix acting on p:  sum_i f_{z_i} (sigma_x^i)^T + f_y I + b_x^T
        mat = np.einsum("mi,miba->mab", c["f_z"], c["sigma_x"])
        mat += c["f_y"][:, None, None] * eye
        mat += np.swapaxes(c["b_x"], 1, 2)
        # q-coupling and driver:  sum_i [f_{z_i} I + (sigma_x^i)^T] q^i + f_x
        rest = np.einsum("mi,mai->ma", c["f_z"], q_i)
        rest += np.einsum("miba,mbi->ma", c["sigma_x"], q_i)
        rest += c["f_x"]

        rhs = cond_p + dt * rest
        if n == 1:
            denom = 1.0 - dt * mat[:, 0, 0]
            if np.abs(denom).min() < 1e-8:
                raise SolverError("implicit costate step is singular", step=i)
            p_i = rhs / denom[:, None]
        else:
            p_i = np.linalg.solve(eye[None, :, :] - dt * mat, rhs[:, :, None])[:, :, 0]
        if not np.all(np.isfinite(p_i)):
            raise SolverError("costate turned non-finite", step=i)
        p_vals[:, i] = p_i
        q_vals[:, i] = q_i

    return AdjointSolution(p_vals, q_vals, basis, p_fits, q_fits)


@dataclass(frozen=True)
class GammaPath:
    """Positive exponential weight exp(int f_y ds) * E(int f_z . dW)."""

    values: np.ndarray  # (M, N+1), strictly positive, 1 at time zero


def gamma_process(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    forward: ForwardBatch,
    backward: BackwardSolution,
) -> GammaPath:
    """Exact multiplicative stepping of the weight process; positivity holds
    by construction and the running exponent is guarded against overflow."""
    m_paths, n_steps = noise.M, grid.N
    dt = grid.dt
    times = grid.times
    co = spec.coeffs
    log_gamma = np.zeros((m_paths, n_steps + 1))
    for i in range(n_steps):
        x_i, u_i = forward.states[:, i], forward.controls[:, i]
        y_i, z_i = backward.Y[:, i], backward.Z[:, i]
        fy = np.asarray(co.f_y(times[i], x_i, y_i, z_i, u_i), dtype=np.float64)
        fz = np.asarray(co.f_z(times[i], x_i, y_i, z_i, u_i), dtype=np.float64)
        step = fy * dt + np.einsum("md,md->m", fz, noise.increments[:, i])
        step -= 0.5 * np.einsum("md,md->m", fz, fz) * dt
        log_gamma[:, i + 1] = log_gamma[:, i] + step
        if np.abs(log_gamma[:, i + 1]).max() > 700.0:
            raise SolverError("exponential weight exponent overflow", step=i)
    return GammaPath(np.exp(log_gamma))


def optimality_weight(
    spec: ProblemSpec,
    grid: TimeGrid,
    forward: ForwardBatch,
    backward: BackwardSolution,
    adjoint: AdjointSolution,
) -> np.ndarray:
    """Control gradient of the Hamiltonian along the trajectory, shape (M, N, k):
    b_u^T p + sum_i (sigma_u^i)^T q^i + sum_i f_{z_i} (sigma_u^i)^T p + f_u."""
    m_paths = forward.states.shape[0]
    out = np.empty((m_paths, grid.N, spec.k))
    times = grid.times
    for i in range(grid.N):
        c = _step_coefficients(spec, times[i], forward, backward, i)
        p_i = adjoint.p[:, i]
        q_i = adjoint.q[:, i]
        w = np.einsum("mak,ma->mk", c["b_u"], p_i)
        w += np.einsum("mai,miak->mk", q_i, c["sigma_u"])
        w += np.einsum("mi,miak,ma->mk", c["f_z"], c["sigma_u"], p_i)
        w += c["f_u"]
        out[:, i] = w
    return out


def solve_auxiliary(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    forward: ForwardBatch,
    backward: BackwardSolution,
    adjoint: AdjointSolution,
    uhat: np.ndarray,
    basis: RegressionBasis | None = None,
    ridge: float | None = None,
) -> BackwardSolution:
    """Scalar linear backward equation with zero terminal value whose driver
    collects every first-order cost effect of the perturbation direction."""
    m_paths, n_steps = noise.M, grid.N
    times = grid.times
    lam = np.empty((m_paths, n_steps))
    mu = np.empty((m_paths, n_steps, spec.d))
    phi = np.empty((m_paths, n_steps))
    weight = optimality_weight(spec, grid, forward, backward, adjoint)
    for i in range(n_steps):
        c = _step_coefficients(spec, times[i], forward, backward, i)
        lam[:, i] = c["f_y"]
        mu[:, i] = c["f_z"]
        phi[:, i] = np.einsum("mk,mk->m", weight[:, i], uhat[:, i])
    data = LinearBSDEData(np.zeros(m_paths), lam, mu, phi)
    return solve_linear_bsde(data, grid, noise, forward.states, basis=basis, ridge=ridge)


def yhat0_via_gamma(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    forward: ForwardBatch,
    backward: BackwardSolution,
    adjoint: AdjointSolution,
    gamma: GammaPath,
    uhat: np.ndarray,
) -> tuple[float, float]:
    """Weighted time-integral representation of the cost derivative at zero:
    Monte Carlo estimate and its standard error."""
    weight = optimality_weight(spec, grid, forward, backward, adjoint)
    inner = np.einsum("mik,mik->mi", weight, uhat[:, : grid.N])
    integrals = np.einsum("mi,mi->m", gamma.values[:, : grid.N], inner) * grid.dt
    m_paths = integrals.shape[0]
    return float(integrals.mean()), float(integrals.std() / math.sqrt(m_paths))


def solve_variational_bsde(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    forward: ForwardBatch,
    backward: BackwardSolution,
    variational: VariationalForwardBatch,
    basis: RegressionBasis | None = None,
    ridge: float | None = None,
) -> BackwardSolution:
    """First-order response of the backward pair to the control perturbation:
    an affine backward equation driven by the state response and the
    perturbation, regressed on the augmented state (base, response).

    The solution is affine in the response coordinates, so the default basis
    caps their degree at one; full-degree monomials in the response would
    extrapolate wildly on extreme paths without adding expressiveness.
    """
    if basis is None:
        basis = RegressionBasis(
            "polynomial", 3, max_degrees=(3,) * spec.n + (1,) * spec.n
        )
    m_paths, n_steps = noise.M, grid.N
    times = grid.times
    uhat = variational.perturbation
    lam = np.empty((m_paths, n_steps))
    mu = np.empty((m_paths, n_steps, spec.d))
    phi = np.empty((m_paths, n_steps))
    for i in range(n_steps):
        c = _step_coefficients(spec, times[i], forward, backward, i)
        lam[:, i] = c["f_y"]
        mu[:, i] = c["f_z"]
        phi[:, i] = np.einsum("ma,ma->m", c["f_x"], variational.states[:, i])
        phi[:, i] += np.einsum("mk,mk->m", c["f_u"], uhat[:, i])
    phi_x = np.asarray(spec.coeffs.Phi_x(forward.states[:, n_steps]), dtype=np.float64)
    xi = np.einsum("ma,ma->m", phi_x, variational.states[:, n_steps])
    data = LinearBSDEData(xi, lam, mu, phi)
    features = np.concatenate([forward.states, variational.states], axis=2)
    return solve_linear_bsde(data, grid, noise, features, basis=basis, ridge=ridge)


@dataclass(frozen=True)
class HamiltonianInputs:
    """Point at which the Hamiltonian is evaluated, together with the
    reference state/control pair that anchors the diffusion shift."""

    t: float
    x: np.ndarray  # (n,)
    y: float
    z: np.ndarray  # (d,)
    u: np.ndarray  # (k,)
    p: np.ndarray  # (n,)
    q: np.ndarray  # (n, d)
    x_ref: np.ndarray  # (n,)
    u_ref: np.ndarray  # (k,)


def _diffusion_shift(spec: ProblemSpec, inp: HamiltonianInputs) -> np.ndarray:
    """Shift added to the z-argument: per column, (sigma^i(t,x,u) -
    sigma^i(t,x_ref,u_ref))^T p. Vanishes at the reference point."""
    co = spec.coeffs
    x = np.asarray(inp.x, dtype=np.float64)[None, :]
    u = np.asarray(inp.u, dtype=np.float64)[None, :]
    x_ref = np.asarray(inp.x_ref, dtype=np.float64)[None, :]
    u_ref = np.asarray(inp.u_ref, dtype=np.float64)[None, :]
    sig = np.asarray(co.sigma(inp.t, x, u), dtype=np.float64)[0]
    sig_ref = np.asarray(co.sigma(inp.t, x_ref, u_ref), dtype=np.float64)[0]
    return (sig - sig_ref).T @ np.asarray(inp.p, dtype=np.float64)


def hamiltonian(inp: HamiltonianInputs, spec: ProblemSpec) -> float:
    """p . b + sum_i q^i . sigma^i + f evaluated at the shifted z-argument."""
    co = spec.coeffs
    x = np.asarray(inp.x, dtype=np.float64)[None, :]
    u = np.asarray(inp.u, dtype=np.float64)[None, :]
    shift = _diffusion_shift(spec, inp)
    b_val = np.asarray(co.b(inp.t, x, u), dtype=np.float64)[0]
    sig = np.asarray(co.sigma(inp.t, x, u), dtype=np.float64)[0]
    z_arg = (np.asarray(inp.z, dtype=np.float64) + shift)[None, :]
    f_val = float(np.asarray(co.f(inp.t, x, np.array([inp.y]), z_arg, u))[0])
    return float(inp.p @ b_val + np.einsum("ni,ni->", inp.q, sig) + f_val)


def hamiltonian_u(inp: HamiltonianInputs, spec: ProblemSpec) -> np.ndarray:
    """Control gradient of the Hamiltonian, including the chain-rule term of
    the diffusion shift against the generator slope."""
    co = spec.coeffs
    x = np.asarray(inp.x, dtype=np.float64)[None, :]
    u = np.asarray(inp.u, dtype=np.float64)[None, :]
    shift = _diffusion_shift(spec, inp)
    z_arg = (np.asarray(inp.z, dtype=np.float64) + shift)[None, :]
    y_arg = np.array([inp.y])
    b_u = np.asarray(co.b_u(inp.t, x, u), dtype=np.float64)[0]
    sig_u = np.asarray(co.sigma_u(inp.t, x, u), dtype=np.float64)[0]
    f_u = np.asarray(co.f_u(inp.t, x, y_arg, z_arg, u), dtype=np.float64)[0]
    f_z = np.asarray(co.f_z(inp.t, x, y_arg, z_arg, u), dtype=np.float64)[0]
    grad = b_u.T @ inp.p
    grad += np.einsum("iak,ai->k", sig_u, inp.q)
    grad += f_u
    grad += np.einsum("i,iak,a->k", f_z, sig_u, inp.p)
    return grad


@dataclass
class ResidualStats:
    max: float
    mean: float
    quantiles: dict

    def to_dict(self):
        return {"max": self.max, "mean": self.mean, "quantiles": self.quantiles}


def _residual_stats(values: np.ndarray) -> ResidualStats:
    flat = np.abs(values).ravel()
    qs = {str(q): float(np.quantile(flat, q)) for q in (0.5, 0.9, 0.99)}
    return ResidualStats(float(flat.max()), float(flat.mean()), qs)


@dataclass
class RelationReport:
    """Residuals of the decoupling between the backward linearisation and the
    costate representation, plus the time-zero identity."""

    y_residual: ResidualStats
    z_residuals: list  # per Brownian component
    y1_at_zero: float
    yhat_at_zero: float
    y1_se: float
    yhat_se: float

    @property
    def t0_gap(self) -> float:
        return abs(self.y1_at_zero - self.yhat_at_zero)

    @property
    def t0_combined_se(self) -> float:
        return math.hypot(self.y1_se, self.yhat_se)

    def to_dict(self) -> dict:
        return {
            "y_residual": self.y_residual.to_dict(),
            "z_residuals": [r.to_dict() for r in self.z_residuals],
            "y1_at_zero": self.y1_at_zero,
            "yhat_at_zero": self.yhat_at_zero,
            "t0_gap": self.t0_gap,
            "t0_combined_se": self.t0_combined_se,
        }


def check_decoupling(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    forward: ForwardBatch,
    backward: BackwardSolution,
    adjoint: AdjointSolution,
    variational: VariationalForwardBatch,
    var_backward: BackwardSolution,
    auxiliary: BackwardSolution,
    uhat: np.ndarray,
) -> RelationReport:
    """Pathwise residuals of Y1 = Yhat + p . X1 (all grid times) and of the
    componentwise Z relation (at the regression steps)."""
    y_res = var_backward.Y - auxiliary.Y - np.einsum("mia,mia->mi", adjoint.p, variational.states)
    z_reports = []
    times = grid.times
    for j in range(spec.d):
        res_j = np.empty((noise.M, grid.N))
        for i in range(grid.N):
            c = _step_coefficients(spec, times[i], forward, backward, i)
            p_i = adjoint.p[:, i]
            expected = auxiliary.Z[:, i, j]
            expected = expected + np.einsum(
                "ma,mak,mk->m", p_i, c["sigma_u"][:, j], uhat[:, i]
            )
            expected = expected + np.einsum(
                "ma,mab,mb->m", p_i, c["sigma_x"][:, j], variational.states[:, i]
            )
            expected = expected + np.einsum(
                "ma,ma->m", adjoint.q[:, i, :, j], variational.states[:, i]
            )
            res_j[:, i] = var_backward.Z[:, i, j] - expected
        z_reports.append(_residual_stats(res_j))
    return RelationReport(
        y_residual=_residual_stats(y_res),
        z_residuals=z_reports,
        y1_at_zero=var_backward.y0,
        yhat_at_zero=auxiliary.y0,
        y1_se=var_backward.y0_standard_error,
        yhat_se=auxiliary.y0_standard_error,
    )
