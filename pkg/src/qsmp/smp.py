"""Cost functional, directional-derivative verification, projected gradient
descent over feedback policies, and the first-order optimality check.

The descent is plumbing, not theory: the necessary condition holds at an
optimum, and descent is how a candidate optimum is manufactured. All
finite-difference checks reuse one Brownian batch across perturbation sizes
and across the base/perturbed pair; without common random numbers the
small-o behaviour would drown in Monte Carlo noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import adjoint as adjoint_mod
from .bsde import BackwardSolution, RegressionBasis, solve_quadratic_bsde
from .model import ProblemSpec
from .paths import (
    BrownianBatch,
    Control,
    ForwardBatch,
    OpenLoopControl,
    RateReport,
    TimeGrid,
    fit_loglog_slope,
    realize_control_along,
    solve_forward_sde,
    solve_variational_sde,
)
from .regression import StepRegressor


def cost_functional(spec: ProblemSpec, grid: TimeGrid, noise: BrownianBatch, control: Control) -> float:
    """Time-zero value of the backward component under the given control."""
    forward = solve_forward_sde(spec, grid, noise, control)
    backward = solve_quadratic_bsde(spec, grid, noise, forward)
    return backward.y0


def _solve_chain(spec, grid, noise, control, basis=None):
    forward = solve_forward_sde(spec, grid, noise, control)
    backward = solve_quadratic_bsde(spec, grid, noise, forward, basis=basis)
    return forward, backward


@dataclass
class GradientCheckReport:
    """Common-noise difference quotients of the cost against the adjoint
    representation of its directional derivative."""

    epsilons: list
    fd_slopes: list  # (J(u^eps) - J(u_bar)) / eps per epsilon
    fd_slope_ses: list
    extrapolated_intercept: float
    intercept_se: float
    yhat0: float
    yhat0_se: float
    yhat0_gamma: float
    yhat0_gamma_se: float
    inconclusive: bool

    def intercept_gap_se(self) -> float:
        return math.hypot(self.intercept_se, self.yhat0_se)

    def to_dict(self) -> dict:
        return {
            "epsilons": list(self.epsilons),
            "fd_slopes": list(self.fd_slopes),
            "fd_slope_ses": list(self.fd_slope_ses),
            "extrapolated_intercept": self.extrapolated_intercept,
            "intercept_se": self.intercept_se,
            "yhat0": self.yhat0,
            "yhat0_se": self.yhat0_se,
            "yhat0_gamma": self.yhat0_gamma,
            "yhat0_gamma_se": self.yhat0_gamma_se,
            "inconclusive": self.inconclusive,
        }


def gateaux_check(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    u_bar: Control,
    u: Control,
    epsilons=(0.25, 0.125, 0.0625, 0.03125, 0.015625),
    basis: RegressionBasis | None = None,
) -> GradientCheckReport:
    """Difference quotients of J under the convex perturbation
    u_bar + eps (u - u_bar), Richardson-extrapolated to eps = 0 and compared
    with both computations of the adjoint-based derivative."""
    eps_list = [float(e) for e in epsilons]
    forward, backward = _solve_chain(spec, grid, noise, u_bar, basis)
    u_table = realize_control_along(u, grid, forward.states)
    uhat = u_table - forward.controls

    j_bar = backward.y0
    base_targets = backward.pathwise_targets
    m_paths = noise.M

    quotients = []
    ses = []
    for eps in eps_list:
        fwd_eps, bwd_eps = _solve_chain(
            spec, grid, noise, OpenLoopControl(forward.controls + eps * uhat), basis
        )
        quotients.append((bwd_eps.y0 - j_bar) / eps)
        diff = bwd_eps.pathwise_targets - base_targets
        ses.append(float(diff.std() / (eps * math.sqrt(m_paths))))

    intercept, intercept_se, slope = _weighted_affine_intercept(eps_list, quotients, ses)

    adj = adjoint_mod.solve_adjoint(spec, grid, noise, forward, backward, basis=basis)
    aux = adjoint_mod.solve_auxiliary(spec, grid, noise, forward, backward, adj, uhat, basis=basis)
    gamma = adjoint_mod.gamma_process(spec, grid, noise, forward, backward)
    y0_gamma, y0_gamma_se = adjoint_mod.yhat0_via_gamma(
        spec, grid, noise, forward, backward, adj, gamma, uhat
    )

    # The check is inconclusive when the fitted trend over the eps-range is
    # smaller than the statistical resolution of the quotients.
    trend = abs(slope) * (max(eps_list) - min(eps_list))
    resolution = 2.0 * float(np.median(ses))
    inconclusive = bool(trend <= resolution and max(ses) > 0)

    return GradientCheckReport(
        epsilons=eps_list,
        fd_slopes=quotients,
        fd_slope_ses=ses,
        extrapolated_intercept=intercept,
        intercept_se=intercept_se,
        yhat0=aux.y0,
        yhat0_se=aux.y0_standard_error,
        yhat0_gamma=y0_gamma,
        yhat0_gamma_se=y0_gamma_se,
        inconclusive=inconclusive,
    )


def _weighted_affine_intercept(xs, ys, ses):
    """Weighted least-squares fit y = c0 + c1 x; returns (c0, se(c0), c1)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    weights = 1.0 / np.maximum(np.asarray(ses, dtype=np.float64), 1e-300) ** 2
    design = np.stack([np.ones_like(xs), xs], axis=1)
    gram = design.T @ (weights[:, None] * design)
    rhs = design.T @ (weights * ys)
    cov = np.linalg.inv(gram)
    coef = cov @ rhs
    return float(coef[0]), float(math.sqrt(max(cov[0, 0], 0.0))), float(coef[1])


def y_expansion_rate_check(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    u_bar: Control,
    u: Control,
    epsilons=(0.25, 0.125, 0.0625, 0.03125, 0.015625),
    basis: RegressionBasis | None = None,
) -> RateReport:
    """Expansion rates of the backward value: E[sup_t |Y^eps - Y|^2] should
    decay with slope near 2 and the remainder against eps * Y1 strictly
    faster, mirroring the state-side check."""
    eps_list = [float(e) for e in epsilons]
    forward, backward = _solve_chain(spec, grid, noise, u_bar, basis)
    u_table = realize_control_along(u, grid, forward.states)
    uhat = u_table - forward.controls
    variational = solve_variational_sde(spec, grid, noise, forward, uhat)
    var_backward = adjoint_mod.solve_variational_bsde(
        spec, grid, noise, forward, backward, variational, basis=basis
    )

    first_errors = []
    rem_errors = []
    for eps in eps_list:
        fwd_eps, bwd_eps = _solve_chain(
            spec, grid, noise, OpenLoopControl(forward.controls + eps * uhat), basis
        )
        diff = bwd_eps.Y - backward.Y
        first_errors.append(float((diff**2).max(axis=1).mean()))
        rem = diff - eps * var_backward.Y
        rem_errors.append(float((rem**2).max(axis=1).mean()))

    scale = max(1.0, float((backward.Y**2).max(axis=1).mean()))
    floor = 1e-20 * scale
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


@dataclass
class AffineFeedbackPolicy:
    """Feedback map with per-step affine parameters, projected pointwise into
    the control domain: u(t_i, x) = project(offsets[i] + gains[i] x)."""

    offsets: np.ndarray  # (N+1, k)
    gains: np.ndarray  # (N+1, k, n)
    domain: object

    @staticmethod
    def zeros(grid: TimeGrid, n: int, k: int, domain) -> "AffineFeedbackPolicy":
        return AffineFeedbackPolicy(np.zeros((grid.N + 1, k)), np.zeros((grid.N + 1, k, n)), domain)

    @staticmethod
    def random(grid: TimeGrid, n: int, k: int, domain, rng, scale: float = 1.0) -> "AffineFeedbackPolicy":
        offsets = scale * rng.standard_normal((grid.N + 1, k))
        gains = scale * rng.standard_normal((grid.N + 1, k, n))
        return AffineFeedbackPolicy(offsets, gains, domain)

    def control(self) -> Control:
        return _PolicyControl(self)

    def copy(self) -> "AffineFeedbackPolicy":
        return AffineFeedbackPolicy(self.offsets.copy(), self.gains.copy(), self.domain)


class _PolicyControl(Control):
    def __init__(self, policy: AffineFeedbackPolicy):
        self.policy = policy

    def values(self, i, t, states):
        raw = self.policy.offsets[i] + np.einsum("kn,mn->mk", self.policy.gains[i], states)
        return self.policy.domain.project(raw)


@dataclass
class DescentRow:
    iteration: int
    cost: float
    cost_se: float
    gradient_norm: float


@dataclass
class DescentResult:
    policy: AffineFeedbackPolicy
    trace: list
    halted_on_divergence: bool

    @property
    def costs(self):
        return [row.cost for row in self.trace]


def projected_gradient_descent(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    u_init: AffineFeedbackPolicy,
    step_schedule,
    max_iters: int,
    basis: RegressionBasis | None = None,
) -> DescentResult:
    """Gradient descent on the affine feedback parameters.

    Each iteration solves the state, backward, and costate systems at the
    current policy, forms the weighted control gradient of the Hamiltonian
    along the trajectory, and moves the per-step parameters against its
    Monte Carlo average (offsets against the plain average, gains against
    the state-weighted one). The policy output itself is projected into the
    control domain, so the parameters stay unconstrained. Halts early if the
    cost increases five times in a row.
    """
    policy = u_init.copy()
    trace = []
    best: AffineFeedbackPolicy = policy.copy()
    best_cost = math.inf
    consecutive_up = 0
    previous_cost = math.inf
    halted = False

    for iteration in range(max_iters):
        forward = solve_forward_sde(spec, grid, noise, policy.control())
        backward = solve_quadratic_bsde(spec, grid, noise, forward, basis=basis)
        adj = adjoint_mod.solve_adjoint(spec, grid, noise, forward, backward, basis=basis)
        gamma = adjoint_mod.gamma_process(spec, grid, noise, forward, backward)
        weight = adjoint_mod.optimality_weight(spec, grid, forward, backward, adj)
        weighted = gamma.values[:, : grid.N, None] * weight  # (M, N, k)

        grad_offsets = weighted.mean(axis=0)  # (N, k)
        grad_gains = np.einsum("mik,min->ikn", weighted, forward.states[:, : grid.N]) / noise.M

        cost = backward.y0
        cost_se = backward.y0_standard_error
        grad_norm = float(
            math.sqrt(np.sum(grad_offsets**2) + np.sum(grad_gains**2)) * math.sqrt(grid.dt)
        )
        trace.append(DescentRow(iteration, cost, cost_se, grad_norm))

        if cost < best_cost:
            best_cost = cost
            best = policy.copy()
        if cost > previous_cost:
            consecutive_up += 1
            if consecutive_up >= 5:
                halted = True
                break
        else:
            consecutive_up = 0
        previous_cost = cost

        eta = step_schedule(iteration) if callable(step_schedule) else float(step_schedule)
        policy.offsets[: grid.N] -= eta * grad_offsets
        policy.gains[: grid.N] -= eta * grad_gains

    return DescentResult(best, trace, halted)


@dataclass
class MpCheckReport:
    """Sampled first-order optimality statistics: inner products of the
    Hamiltonian control-gradient with feasible directions."""

    min_inner: float
    violation_fraction: float
    n_samples: int
    se_multiplier: float
    fixed_tolerance: float | None
    per_time_min: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "min_inner": self.min_inner,
            "violation_fraction": self.violation_fraction,
            "n_samples": self.n_samples,
            "se_multiplier": self.se_multiplier,
            "fixed_tolerance": self.fixed_tolerance,
            "per_time_min": list(self.per_time_min),
        }


def _extract_functions(states, values, basis, ridge=None):
    """Fit pathwise values (M, K) as a function of states (M, m); returns the
    StepFit for evaluation at query states."""
    reg = StepRegressor(basis, states, ridge)
    _, fit = reg.fit(values)
    return fit


def _field_at_states(spec, t, x_q, u_q, y_q, z_q, p_q, q_q):
    """Hamiltonian control-gradient at query points along the trajectory
    (the diffusion shift vanishes there)."""
    co = spec.coeffs
    b_u = np.asarray(co.b_u(t, x_q, u_q), dtype=np.float64)
    sig_u = np.asarray(co.sigma_u(t, x_q, u_q), dtype=np.float64)
    f_u = np.asarray(co.f_u(t, x_q, y_q, z_q, u_q), dtype=np.float64)
    f_z = np.asarray(co.f_z(t, x_q, y_q, z_q, u_q), dtype=np.float64)
    field = np.einsum("sak,sa->sk", b_u, p_q)
    field += np.einsum("sai,siak->sk", q_q, sig_u)
    field += np.einsum("si,siak,sa->sk", f_z, sig_u, p_q)
    field += f_u
    return field


def check_maximum_principle(
    spec: ProblemSpec,
    grid: TimeGrid,
    noise: BrownianBatch,
    u_bar: Control,
    candidate_sampler=None,
    tolerance: float | None = None,
    n_times: int = 12,
    n_states: int = 48,
    n_candidates: int = 8,
    boundary_bias: float = 0.5,
    groups: int = 8,
    se_multiplier: float = 5.0,
    basis: RegressionBasis | None = None,
    seed: int = 0,
) -> MpCheckReport:
    """Sample times, states, and feasible candidate controls and test the
    variational inequality at the candidate-optimal control.

    The default tolerance at each sampled point is ``se_multiplier`` times a
    pointwise standard error obtained by replicating the whole solve chain on
    disjoint path groups and evaluating the replicate solutions (as fitted
    state functions) at the common query points. A ``tolerance`` value skips
    the replication and applies a fixed threshold instead.
    """
    if basis is None:
        basis = RegressionBasis("polynomial", 3)
    rng = np.random.default_rng([seed, 0xC0])
    m_paths = noise.M
    times = grid.times

    forward = solve_forward_sde(spec, grid, noise, u_bar)
    backward = solve_quadratic_bsde(spec, grid, noise, forward, basis=basis)
    adj = adjoint_mod.solve_adjoint(spec, grid, noise, forward, backward, basis=basis)

    check_steps = sorted(set(np.linspace(1, grid.N - 1, n_times, dtype=int)))
    query_paths = rng.choice(m_paths, size=min(n_states, m_paths), replace=False)

    group_solutions = []
    if tolerance is None:
        size = m_paths // groups
        if size < 64:
            raise ValueError("too few paths per replication group; pass a fixed tolerance")
        for g in range(groups):
            sel = slice(g * size, (g + 1) * size)
            g_noise = BrownianBatch(noise.increments[sel], noise.seed, noise.stream_id)
            g_forward = ForwardBatch(forward.states[sel], forward.controls[sel])
            g_backward = solve_quadratic_bsde(spec, grid, g_noise, g_forward, basis=basis)
            g_adj = adjoint_mod.solve_adjoint(spec, grid, g_noise, g_forward, g_backward, basis=basis)
            group_solutions.append((g_forward, g_backward, g_adj))

    sampler = candidate_sampler
    if sampler is None:
        sampler = lambda r, size: spec.domain.sample(r, size, boundary_bias=boundary_bias)

    n, d = spec.n, spec.d
    min_inner = math.inf
    per_time_min = []
    violations = 0
    total = 0
    for i in check_steps:
        x_q = forward.states[query_paths, i]
        u_q = forward.controls[query_paths, i]
        y_q = backward.Y[query_paths, i]
        z_q = backward.Z[query_paths, i]
        p_q = adj.p[query_paths, i]
        q_q = adj.q[query_paths, i]
        field = _field_at_states(spec, times[i], x_q, u_q, y_q, z_q, p_q, q_q)

        group_fields = []
        for g_forward, g_backward, g_adj in group_solutions:
            g_states = g_forward.states[:, i]
            fit_p = _extract_functions(g_states, g_adj.p[:, i], basis)
            fit_q = _extract_functions(g_states, g_adj.q[:, i].reshape(g_states.shape[0], n * d), basis)
            fit_y = _extract_functions(g_states, g_backward.Y[:, i], basis)
            fit_z = _extract_functions(g_states, g_backward.Z[:, i], basis)
            gp = fit_p.evaluate(x_q)
            gq = fit_q.evaluate(x_q).reshape(len(query_paths), n, d)
            gy = fit_y.evaluate(x_q)[:, 0]
            gz = fit_z.evaluate(x_q)
            group_fields.append(_field_at_states(spec, times[i], x_q, u_q, gy, gz, gp, gq))

        candidates = sampler(rng, len(query_paths) * n_candidates).reshape(
            len(query_paths), n_candidates, spec.k
        )
        directions = candidates - u_q[:, None, :]
        inner = np.einsum("sk,sck->sc", field, directions)
        if group_fields:
            g_inner = np.stack(
                [np.einsum("sk,sck->sc", gf, directions) for gf in group_fields], axis=0
            )
            point_se = g_inner.std(axis=0, ddof=1) / math.sqrt(len(group_fields))
            threshold = se_multiplier * point_se
        else:
            threshold = np.full_like(inner, tolerance)

        violations += int(np.count_nonzero(inner < -threshold))
        total += inner.size
        step_min = float(inner.min())
        per_time_min.append(step_min)
        min_inner = min(min_inner, step_min)

    return MpCheckReport(
        min_inner=min_inner,
        violation_fraction=violations / max(total, 1),
        n_samples=total,
        se_multiplier=se_multiplier,
        fixed_tolerance=tolerance,
        per_time_min=per_time_min,
    )
