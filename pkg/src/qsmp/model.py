"""Problem definition: coefficients, declared growth constants, control domain.

Evaluator conventions (all vectorised over a batch of size M):

====================  =========================  ===========================
evaluator             arguments                  result
====================  =========================  ===========================
b(t, x, u)            t float, x (M,n), u (M,k)  (M, n)
sigma(t, x, u)                                   (M, n, d)
f(t, x, y, z, u)      y (M,), z (M,d)            (M,)
Phi(x)                x (M,n)                    (M,)
b_x(t, x, u)                                     (M, n, n)   d b_i / d x_j
b_u(t, x, u)                                     (M, n, k)
sigma_x(t, x, u)                                 (M, d, n, n)  per column i
sigma_u(t, x, u)                                 (M, d, n, k)
f_x / f_y / f_z / f_u                            (M,n) / (M,) / (M,d) / (M,k)
Phi_x(x)                                         (M, n)
====================  =========================  ===========================

The i-th diffusion column is sigma[..., :, i]; sigma_x[:, i] is the Jacobian
of that column with respect to the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import bmo
from .errors import QsmpError


@dataclass(frozen=True)
class CoefficientSet:
    b: Callable
    sigma: Callable
    f: Callable
    Phi: Callable
    b_x: Callable
    b_u: Callable
    sigma_x: Callable
    sigma_u: Callable
    f_x: Callable
    f_y: Callable
    f_z: Callable
    f_u: Callable
    Phi_x: Callable


@dataclass(frozen=True)
class AssumptionConstants:
    """Declared growth/bound constants for the coefficient set.

    These are inputs, not derived quantities: global verification over
    unbounded domains is impossible, so the toolkit spot-checks them by
    sampling (see :func:`validate_assumptions`).
    """

    alpha: float
    gamma: float
    L1: float
    L2: float
    L3: float
    f_y_sup: float
    Phi_sup: float
    sigma_x_sup: tuple
    b_x_sup: float
    b_u_sup: float
    sigma_u_sup: float
    Phi_x_sup: float

    def __post_init__(self):
        object.__setattr__(self, "sigma_x_sup", tuple(float(s) for s in self.sigma_x_sup))
        values = [
            self.alpha, self.gamma, self.L1, self.L2, self.L3, self.f_y_sup,
            self.Phi_sup, self.b_x_sup, self.b_u_sup, self.sigma_u_sup, self.Phi_x_sup,
            *self.sigma_x_sup,
        ]
        if not all(math.isfinite(v) and v >= 0 for v in values):
            raise ValueError("assumption constants must be finite and nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be strictly positive")


class ControlDomain:
    """Convex control domain with an exact projection."""

    kind = "abstract"

    def project(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int, boundary_bias: float = 0.0) -> np.ndarray:
        """Draw candidate points inside the domain. With ``boundary_bias`` in
        (0, 1], that fraction of draws is taken outside and projected back,
        stressing the boundary where variational inequalities bind."""
        raise NotImplementedError


@dataclass(frozen=True)
class BoxDomain(ControlDomain):
    lower: tuple
    upper: tuple
    kind = "box"

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or any(a > b for a, b in zip(lo, hi)):
            raise ValueError("box bounds must satisfy lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return len(self.lower)

    def project(self, v):
        return np.clip(np.asarray(v, dtype=np.float64), self.lower, self.upper)

    def contains(self, v, tol=1e-9):
        v = np.asarray(v, dtype=np.float64)
        lo = np.asarray(self.lower) - tol
        hi = np.asarray(self.upper) + tol
        return np.all((v >= lo) & (v <= hi), axis=-1)

    def sample(self, rng, size, boundary_bias=0.0):
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        out = rng.uniform(lo, hi, size=(size, self.dim))
        n_bias = int(round(boundary_bias * size))
        if n_bias:
            wide = rng.uniform(mid - 1.5 * half, mid + 1.5 * half, size=(n_bias, self.dim))
            out[:n_bias] = self.project(wide)
        return out


@dataclass(frozen=True)
class BallDomain(ControlDomain):
    center: tuple
    radius: float
    kind = "ball"

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in np.atleast_1d(self.center)))
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def dim(self):
        return len(self.center)

    def project(self, v):
        v = np.asarray(v, dtype=np.float64)
        offset = v - self.center
        norm = np.linalg.norm(offset, axis=-1, keepdims=True)
        factor = np.where(norm > self.radius, self.radius / np.where(norm > 0, norm, 1.0), 1.0)
        return np.asarray(self.center) + offset * factor

    def contains(self, v, tol=1e-9):
        v = np.asarray(v, dtype=np.float64)
        return np.linalg.norm(v - self.center, axis=-1) <= self.radius + tol

    def sample(self, rng, size, boundary_bias=0.0):
        direction = rng.standard_normal((size, self.dim))
        direction /= np.maximum(np.linalg.norm(direction, axis=-1, keepdims=True), 1e-300)
        radii = self.radius * rng.uniform(0.0, 1.0, size=(size, 1)) ** (1.0 / self.dim)
        n_bias = int(round(boundary_bias * size))
        if n_bias:
            radii[:n_bias] = self.radius * rng.uniform(1.0, 2.0, size=(n_bias, 1))
        return self.project(np.asarray(self.center) + direction * radii)


@dataclass(frozen=True)
class HalfspaceDomain(ControlDomain):
    """Intersection of halfspaces {v : A v <= c}; may be unbounded.

    The projection runs Dykstra's alternating scheme over the single-halfspace
    projections (each of which is closed form) to tolerance 1e-12.
    """

    normals: tuple  # rows of A
    offsets: tuple  # entries of c
    interior_point: tuple | None = None
    kind = "halfspace-intersection"

    def __post_init__(self):
        a_mat = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
        c_vec = np.atleast_1d(np.asarray(self.offsets, dtype=np.float64))
        if a_mat.shape[0] != c_vec.shape[0]:
            raise ValueError("one offset per halfspace required")
        if np.any(np.linalg.norm(a_mat, axis=1) < 1e-12):
            raise ValueError("halfspace normals must be nonzero")
        object.__setattr__(self, "normals", tuple(map(tuple, a_mat)))
        object.__setattr__(self, "offsets", tuple(c_vec))
        if self.interior_point is not None:
            pt = tuple(float(v) for v in np.atleast_1d(self.interior_point))
            object.__setattr__(self, "interior_point", pt)

    @property
    def dim(self):
        return len(self.normals[0])

    def _arrays(self):
        return np.asarray(self.normals), np.asarray(self.offsets)

    def contains(self, v, tol=1e-9):
        a_mat, c_vec = self._arrays()
        slack = np.einsum("...k,hk->...h", np.asarray(v, dtype=np.float64), a_mat) - c_vec
        return np.all(slack <= tol, axis=-1)

    def project(self, v):
        v = np.asarray(v, dtype=np.float64)
        flat = v.reshape(-1, v.shape[-1]).copy()
        inside = self.contains(flat, tol=0.0)
        todo = ~inside
        if np.any(todo):
            flat[todo] = self._dykstra(flat[todo])
        return flat.reshape(v.shape)

    def _dykstra(self, pts):
        a_mat, c_vec = self._arrays()
        norms_sq = np.einsum("hk,hk->h", a_mat, a_mat)
        x = pts.copy()
        corrections = np.zeros((a_mat.shape[0],) + pts.shape)
        for _ in range(500):
            x_prev = x.copy()
            for h in range(a_mat.shape[0]):
                y = x + corrections[h]
                viol = np.maximum(np.einsum("mk,k->m", y, a_mat[h]) - c_vec[h], 0.0)
                x = y - (viol / norms_sq[h])[:, None] * a_mat[h]
                corrections[h] = y - x
            if np.max(np.abs(x - x_prev)) <= 1e-13:
                break
        return x

    def sample(self, rng, size, boundary_bias=0.0):
        center = np.asarray(self.interior_point if self.interior_point is not None else np.zeros(self.dim))
        scale = 1.0
        draws = center + scale * rng.standard_normal((size, self.dim))
        n_bias = int(round(boundary_bias * size))
        if n_bias:
            draws[:n_bias] = center + 3.0 * scale * rng.standard_normal((n_bias, self.dim))
        return self.project(draws)


@dataclass(frozen=True)
class ProblemSpec:
    n: int
    d: int
    k: int
    T: float
    x0: np.ndarray
    coeffs: CoefficientSet
    domain: ControlDomain
    constants: AssumptionConstants

    def __post_init__(self):
        if min(self.n, self.d, self.k) < 1:
            raise ValueError("dimensions n, d, k must be >= 1")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        x0 = np.asarray(self.x0, dtype=np.float64).reshape(-1).copy()
        if x0.shape != (self.n,):
            raise ValueError(f"x0 must have length n={self.n}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if len(self.constants.sigma_x_sup) != self.d:
            raise ValueError("sigma_x_sup needs one bound per Brownian component")


@dataclass(frozen=True)
class DerivedConstants:
    """Closed-form constants of the well-posedness theory.

    ``p_bar`` can sit closer to 1 than one float spacing when the target of
    the critical-exponent equation is large; ``p_bar_minus_one`` keeps the
    offset exactly, and the conjugate ``p_bar_star`` is computed from it.
    """

    alpha_tilde: float
    A: float
    p_bar: float
    p_bar_minus_one: float
    p_bar_star: float
    admissibility_exponent: float

    def to_dict(self) -> dict:
        return {
            "alpha_tilde": self.alpha_tilde,
            "A": self.A,
            "p_bar": self.p_bar,
            "p_bar_star": self.p_bar_star,
            "admissibility_exponent": self.admissibility_exponent,
        }


def derive_constants(spec: ProblemSpec) -> DerivedConstants:
    """Ceiling A for the backward solution, critical exponent of the
    linearisation weights, and the admissibility moment exponent."""
    c = spec.constants
    gamma, t_hor = c.gamma, spec.T
    alpha_tilde = math.exp(t_hor * c.f_y_sup) * (
        c.Phi_sup + t_hor * c.f_y_sup + c.alpha * t_hor + c.L2**2 * t_hor / (4.0 * gamma)
    )
    growth = 4.0 * gamma * alpha_tilde
    if growth > 700.0:
        raise QsmpError("degenerate parameter set: exponential ceiling overflows")
    big_a = alpha_tilde + (1.0 / (2.0 * gamma)) * math.exp(growth) * (
        1.0 / (4.0 * gamma) + (1.0 + c.f_y_sup * t_hor) * alpha_tilde
    )
    sigma_x_term = 2.0 * t_hor * sum(s**2 for s in c.sigma_x_sup)
    target = math.sqrt(
        (c.L3**2 * t_hor + 2.0 * gamma**2 * big_a) * (3.0 + 4.0 * spec.n * spec.d) + sigma_x_term
    )
    if not math.isfinite(target):
        raise QsmpError("degenerate parameter set: critical-exponent target is not finite")
    offset = bmo.psi_inverse_offset(target)
    if offset == 0.0:
        raise QsmpError(
            f"degenerate parameter set: critical exponent underflows (target {target:.3g})"
        )
    p_star = bmo.conjugate_exponent_from_offset(offset)
    return DerivedConstants(
        alpha_tilde=alpha_tilde,
        A=big_a,
        p_bar=1.0 + offset if math.isfinite(offset) else math.inf,
        p_bar_minus_one=offset,
        p_bar_star=p_star,
        admissibility_exponent=4.0 * p_star,
    )


@dataclass(frozen=True)
class SamplingRegion:
    """Box from which validation samples are drawn (controls are projected
    into the domain afterwards)."""

    x_bound: float = 10.0
    y_bound: float = 10.0
    z_bound: float = 10.0
    u_bound: float = 10.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_ratio: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "pass": c.passed, "worst_ratio": c.worst_ratio, "detail": c.detail}
                for c in self.checks
            ],
        }


_RATIO_FLOOR = 1e-12
_RATIO_TOL = 1e-9
_FD_STEP = 1e-5
_FD_TOL = 1e-6


def validate_assumptions(
    spec: ProblemSpec,
    sample_count: int,
    seed: int = 0,
    region: SamplingRegion | None = None,
) -> ValidationReport:
    """Spot-check the declared constants and derivative evaluators by sampling.

    Each declared inequality is evaluated at random points of the configured
    region; the report carries the worst observed left/right ratio per check
    (values above 1 fail). Derivative evaluators are compared against central
    finite differences of the base evaluators. Non-finite evaluator output
    raises immediately: it signals an ill-posed problem, not a failed bound.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    region = region or SamplingRegion()
    rng = np.random.default_rng([seed, 1])
    m = sample_count
    n, d, k = spec.n, spec.d, spec.k
    t_vals = rng.uniform(0.0, spec.T, size=max(4, m // 8))
    x = rng.uniform(-region.x_bound, region.x_bound, size=(m, n))
    y = rng.uniform(-region.y_bound, region.y_bound, size=m)
    z = rng.uniform(-region.z_bound, region.z_bound, size=(m, d))
    u = spec.domain.project(rng.uniform(-region.u_bound, region.u_bound, size=(m, k)))
    zeros_y = np.zeros(m)
    zeros_z = np.zeros((m, d))

    co, cs = spec.coeffs, spec.constants
    report = ValidationReport()

    def to_finite(name, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise QsmpError(f"evaluator {name} returned non-finite values")
        return arr

    def ratio_check(name, lhs, rhs, detail=""):
        lhs = np.asarray(lhs, dtype=np.float64)
        rhs = np.asarray(rhs, dtype=np.float64)
        ratios = lhs / np.maximum(rhs, _RATIO_FLOOR)
        worst = float(ratios.max()) if ratios.size else 0.0
        report.checks.append(CheckResult(name, worst <= 1.0 + _RATIO_TOL, worst, detail))

    growth = 1.0 + np.abs(y) + np.einsum("md,md->m", z, z) + np.linalg.norm(u, axis=1)

    worst_fd = 0.0
    for t in t_vals:
        f0 = to_finite("f", co.f(t, x, zeros_y, zeros_z, u))
        fx = to_finite("f_x", co.f_x(t, x, y, z, u))
        fy = to_finite("f_y", co.f_y(t, x, y, z, u))
        fz = to_finite("f_z", co.f_z(t, x, y, z, u))
        fu = to_finite("f_u", co.f_u(t, x, y, z, u))
        bx = to_finite("b_x", co.b_x(t, x, u))
        bu = to_finite("b_u", co.b_u(t, x, u))
        sx = to_finite("sigma_x", co.sigma_x(t, x, u))
        su = to_finite("sigma_u", co.sigma_u(t, x, u))
        ratio_check(f"f_at_origin@t={t:.3g}", np.abs(f0), np.full(m, cs.alpha))
        ratio_check(f"f_x_growth@t={t:.3g}", np.linalg.norm(fx, axis=1), cs.L1 * growth)
        ratio_check(f"f_y_bound@t={t:.3g}", np.abs(fy), np.full(m, cs.f_y_sup))
        ratio_check(
            f"f_z_growth@t={t:.3g}",
            np.linalg.norm(fz, axis=1),
            cs.L2 + cs.gamma * np.linalg.norm(z, axis=1),
        )
        ratio_check(f"f_u_growth@t={t:.3g}", np.linalg.norm(fu, axis=1), cs.L3 * growth)
        ratio_check(f"b_x_bound@t={t:.3g}", _fro(bx), np.full(m, cs.b_x_sup))
        ratio_check(f"b_u_bound@t={t:.3g}", _fro(bu), np.full(m, cs.b_u_sup))
        for i in range(d):
            ratio_check(f"sigma_x_bound[{i}]@t={t:.3g}", _fro(sx[:, i]), np.full(m, cs.sigma_x_sup[i]))
        ratio_check(f"sigma_u_bound@t={t:.3g}", _fro(su).max(axis=-1) if d > 1 else _fro(su[:, 0]),
                    np.full(m, cs.sigma_u_sup))
        worst_fd = max(worst_fd, _derivative_discrepancy(co, t, x, y, z, u, n, d, k))

    phi = to_finite("Phi", co.Phi(x))
    phi_x = to_finite("Phi_x", co.Phi_x(x))
    ratio_check("Phi_bound", np.abs(phi), np.full(m, cs.Phi_sup))
    ratio_check("Phi_x_bound", np.linalg.norm(phi_x, axis=1), np.full(m, cs.Phi_x_sup))
    worst_fd = max(worst_fd, _terminal_discrepancy(co, x, n))

    report.checks.append(
        CheckResult(
            "derivative_finite_differences",
            worst_fd <= _FD_TOL,
            worst_fd / _FD_TOL,
            f"max relative discrepancy {worst_fd:.3g} at h={_FD_STEP:g}",
        )
    )
    return report


def _fro(arr):
    """Frobenius norm over the trailing two axes."""
    return np.sqrt(np.einsum("...ij,...ij->...", arr, arr))


def _derivative_discrepancy(co, t, x, y, z, u, n, d, k) -> float:
    h = _FD_STEP
    worst = 0.0

    def rel(err, scale):
        return float(err / (1.0 + scale))

    bx = np.asarray(co.b_x(t, x, u), dtype=np.float64)
    bu = np.asarray(co.b_u(t, x, u), dtype=np.float64)
    sx = np.asarray(co.sigma_x(t, x, u), dtype=np.float64)
    su = np.asarray(co.sigma_u(t, x, u), dtype=np.float64)
    for j in range(n):
        bump = np.zeros_like(x)
        bump[:, j] = h
        fd_b = (np.asarray(co.b(t, x + bump, u)) - np.asarray(co.b(t, x - bump, u))) / (2 * h)
        fd_s = (np.asarray(co.sigma(t, x + bump, u)) - np.asarray(co.sigma(t, x - bump, u))) / (2 * h)
        worst = max(worst, rel(np.abs(fd_b - bx[:, :, j]).max(), np.abs(bx).max()))
        # fd_s is (M, n, d); the declared Jacobians are per diffusion column.
        worst = max(worst, rel(np.abs(np.moveaxis(fd_s, 2, 1) - sx[:, :, :, j]).max(), np.abs(sx).max()))
    for j in range(k):
        bump = np.zeros_like(u)
        bump[:, j] = h
        fd_b = (np.asarray(co.b(t, x, u + bump)) - np.asarray(co.b(t, x, u - bump))) / (2 * h)
        fd_s = (np.asarray(co.sigma(t, x, u + bump)) - np.asarray(co.sigma(t, x, u - bump))) / (2 * h)
        worst = max(worst, rel(np.abs(fd_b - bu[:, :, j]).max(), np.abs(bu).max()))
        worst = max(worst, rel(np.abs(np.moveaxis(fd_s, 2, 1) - su[:, :, :, j]).max(), np.abs(su).max()))

    fx = np.asarray(co.f_x(t, x, y, z, u), dtype=np.float64)
    fy = np.asarray(co.f_y(t, x, y, z, u), dtype=np.float64)
    fz = np.asarray(co.f_z(t, x, y, z, u), dtype=np.float64)
    fu = np.asarray(co.f_u(t, x, y, z, u), dtype=np.float64)
    for j in range(n):
        bump = np.zeros_like(x)
        bump[:, j] = h
        fd = (np.asarray(co.f(t, x + bump, y, z, u)) - np.asarray(co.f(t, x - bump, y, z, u))) / (2 * h)
        worst = max(worst, rel(np.abs(fd - fx[:, j]).max(), np.abs(fx).max()))
    fd = (np.asarray(co.f(t, x, y + h, z, u)) - np.asarray(co.f(t, x, y - h, z, u))) / (2 * h)
    worst = max(worst, rel(np.abs(fd - fy).max(), np.abs(fy).max()))
    for j in range(d):
        bump = np.zeros_like(z)
        bump[:, j] = h
        fd = (np.asarray(co.f(t, x, y, z + bump, u)) - np.asarray(co.f(t, x, y, z - bump, u))) / (2 * h)
        worst = max(worst, rel(np.abs(fd - fz[:, j]).max(), np.abs(fz).max()))
    for j in range(k):
        bump = np.zeros_like(u)
        bump[:, j] = h
        fd = (np.asarray(co.f(t, x, y, z, u + bump)) - np.asarray(co.f(t, x, y, z, u - bump))) / (2 * h)
        worst = max(worst, rel(np.abs(fd - fu[:, j]).max(), np.abs(fu).max()))
    return worst


def _terminal_discrepancy(co, x, n) -> float:
    h = _FD_STEP
    phi_x = np.asarray(co.Phi_x(x), dtype=np.float64)
    worst = 0.0
    for j in range(n):
        bump = np.zeros_like(x)
        bump[:, j] = h
        fd = (np.asarray(co.Phi(x + bump)) - np.asarray(co.Phi(x - bump))) / (2 * h)
        worst = max(worst, float(np.abs(fd - phi_x[:, j]).max() / (1.0 + np.abs(phi_x).max())))
    return worst
