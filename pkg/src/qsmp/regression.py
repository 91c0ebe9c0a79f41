"""Least-squares machinery for empirical conditional expectations on path batches.

All reductions over the path axis run through fixed-size chunks of
``np.einsum`` so that results are bit-for-bit reproducible regardless of the
BLAS thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .errors import IllConditionedBasisError

_CHUNK = 16384


def default_ridge(n_samples: int) -> float:
    """Default ridge parameter: numerical rank safety without visible bias."""
    return 1e-8 * n_samples


@dataclass(frozen=True)
class RegressionBasis:
    """Feature map used for per-time-step regressions.

    ``polynomial`` expands all monomials of the state variables up to the
    given total degree (the constant is always included); ``none`` keeps only
    the constant, which turns every regression into a plain batch mean.

    ``max_degrees`` is an extension hook: an optional per-variable degree cap
    (one entry per state variable) that drops monomials exceeding it. Fitting
    a quantity known to be low-order in one coordinate (for example affine in
    a response variable) with a capped basis avoids wild extrapolation at
    extreme paths without giving up richness in the other coordinates.
    """

    kind: str = "polynomial"
    degree: int = 2
    max_degrees: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("polynomial", "none"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.max_degrees is not None:
            object.__setattr__(self, "max_degrees", tuple(int(v) for v in self.max_degrees))
            if any(v < 0 for v in self.max_degrees):
                raise ValueError("max_degrees entries must be >= 0")

    def feature_count(self, state_dim: int) -> int:
        if self.kind == "none":
            return 1
        if self.max_degrees is None:
            return math.comb(state_dim + self.degree, self.degree)
        return self.exponents(state_dim).shape[0]

    def exponents(self, state_dim: int) -> np.ndarray:
        """Exponent matrix (F, state_dim); row 0 is the constant feature."""
        if self.kind == "none":
            return np.zeros((1, state_dim), dtype=np.int64)
        caps = self.max_degrees
        if caps is not None and len(caps) != state_dim:
            raise ValueError(f"max_degrees needs one entry per state variable ({state_dim})")
        rows = []
        for deg in range(self.degree + 1):
            for combo in combinations_with_replacement(range(state_dim), deg):
                row = np.zeros(state_dim, dtype=np.int64)
                for j in combo:
                    row[j] += 1
                if caps is not None and np.any(row > np.asarray(caps)):
                    continue
                rows.append(row)
        return np.array(rows, dtype=np.int64)

    def features(self, states: np.ndarray, shift=None, scale=None) -> np.ndarray:
        """Evaluate the feature map on a batch of states (M, state_dim)."""
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 1:
            states = states[:, None]
        m_paths, state_dim = states.shape
        if self.kind == "none":
            return np.ones((m_paths, 1))
        if shift is None:
            shift = np.zeros(state_dim)
        if scale is None:
            scale = np.ones(state_dim)
        z = (states - shift) / scale
        # Powers per coordinate up to the total degree, multiplied per monomial.
        pows = [None] * state_dim
        for j in range(state_dim):
            col = np.empty((self.degree + 1, m_paths))
            col[0] = 1.0
            for p in range(1, self.degree + 1):
                col[p] = col[p - 1] * z[:, j]
            pows[j] = col
        expo = self.exponents(state_dim)
        feats = np.ones((m_paths, expo.shape[0]))
        for f_idx, row in enumerate(expo):
            for j, p in enumerate(row):
                if p:
                    feats[:, f_idx] *= pows[j][p]
        return feats


@dataclass
class RegressionResult:
    coefficients: np.ndarray  # (F,) or (F, K)
    fitted: np.ndarray  # (M,) or (M, K)
    fitted_se: np.ndarray | None = None  # pointwise prediction standard errors


def _chunked_gram(features: np.ndarray, targets: np.ndarray):
    """Accumulate F'F and F'y in a fixed chunk order (thread-count independent)."""
    m_paths, n_feat = features.shape
    gram = np.zeros((n_feat, n_feat))
    moment = np.zeros((n_feat, targets.shape[1]))
    for start in range(0, m_paths, _CHUNK):
        fc = features[start : start + _CHUNK]
        yc = targets[start : start + _CHUNK]
        gram += np.einsum("mi,mj->ij", fc, fc)
        moment += np.einsum("mi,mk->ik", fc, yc)
    return gram, moment


def _chunked_matvec(features: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    out = np.empty((features.shape[0], coeffs.shape[1]))
    for start in range(0, features.shape[0], _CHUNK):
        fc = features[start : start + _CHUNK]
        out[start : start + _CHUNK] = np.einsum("mf,fk->mk", fc, coeffs)
    return out


def regress_conditional_expectation(
    features: np.ndarray,
    targets: np.ndarray,
    ridge: float | None = None,
    return_se: bool = False,
) -> RegressionResult:
    """Ridge-regularised least squares; the fitted values are the empirical
    conditional expectation of ``targets`` given the features.

    With ``ridge=0`` a rank-deficient feature matrix raises
    :class:`IllConditionedBasisError` instead of silently picking a solution.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    squeeze = targets.ndim == 1
    if squeeze:
        targets = targets[:, None]
    m_paths, n_feat = features.shape
    if m_paths <= n_feat:
        raise IllConditionedBasisError(
            f"need more samples ({m_paths}) than features ({n_feat})"
        )
    if ridge is None:
        ridge = default_ridge(m_paths)
    if ridge < 0:
        raise ValueError("ridge must be >= 0")

    gram, moment = _chunked_gram(features, targets)
    reg = gram + ridge * np.eye(n_feat)
    try:
        chol = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        raise IllConditionedBasisError("feature Gram matrix is not positive definite")
    if ridge == 0.0:
        diag = np.diag(chol)
        if np.min(diag) <= 1e-13 * max(np.max(diag), 1.0):
            raise IllConditionedBasisError("features are numerically rank deficient")

    coeffs = _cho_solve(chol, moment)
    fitted = _chunked_matvec(features, coeffs)

    fitted_se = None
    if return_se:
        resid = targets - fitted
        dof = max(m_paths - n_feat, 1)
        sigma2 = np.einsum("mk,mk->k", resid, resid) / dof
        half = np.linalg.solve(chol, features.T)  # (F, M)
        lever = np.einsum("fm,fm->m", half, half)
        fitted_se = np.sqrt(np.maximum(lever[:, None] * sigma2[None, :], 0.0))
        if squeeze:
            fitted_se = fitted_se[:, 0]

    if squeeze:
        return RegressionResult(coeffs[:, 0], fitted[:, 0], fitted_se)
    return RegressionResult(coeffs, fitted, fitted_se)


def _cho_solve(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    y = np.linalg.solve(chol, rhs)
    return np.linalg.solve(chol.T, y)


@dataclass
class StepFit:
    """A fitted per-time-step conditional expectation, reusable on new states."""

    basis: RegressionBasis
    shift: np.ndarray
    scale: np.ndarray
    coefficients: np.ndarray  # (F, K)

    def evaluate(self, states: np.ndarray) -> np.ndarray:
        feats = self.basis.features(states, self.shift, self.scale)
        return _chunked_matvec(feats, self.coefficients)


class StepRegressor:
    """Shares one feature matrix (and its Cholesky factor) across the several
    targets regressed at a single backward time step."""

    def __init__(self, basis: RegressionBasis, states: np.ndarray, ridge: float | None = None):
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 1:
            states = states[:, None]
        self.basis = basis
        self.shift = states.mean(axis=0)
        scale = states.std(axis=0)
        self.scale = np.where(scale > 1e-12, scale, 1.0)
        self.features = basis.features(states, self.shift, self.scale)
        m_paths, n_feat = self.features.shape
        if ridge is None:
            ridge = default_ridge(m_paths)
        self.ridge = ridge
        gram = np.zeros((n_feat, n_feat))
        for start in range(0, m_paths, _CHUNK):
            fc = self.features[start : start + _CHUNK]
            gram += np.einsum("mi,mj->ij", fc, fc)
        self._gram = gram
        try:
            self._chol = np.linalg.cholesky(gram + ridge * np.eye(n_feat))
        except np.linalg.LinAlgError:
            raise IllConditionedBasisError("feature Gram matrix is not positive definite")

    def fit(self, targets: np.ndarray) -> tuple[np.ndarray, StepFit]:
        """Returns (fitted values, reusable fit); targets (M,) or (M, K)."""
        targets = np.asarray(targets, dtype=np.float64)
        squeeze = targets.ndim == 1
        if squeeze:
            targets = targets[:, None]
        n_feat = self.features.shape[1]
        moment = np.zeros((n_feat, targets.shape[1]))
        for start in range(0, targets.shape[0], _CHUNK):
            fc = self.features[start : start + _CHUNK]
            yc = targets[start : start + _CHUNK]
            moment += np.einsum("mi,mk->ik", fc, yc)
        coeffs = _cho_solve(self._chol, moment)
        fitted = _chunked_matvec(self.features, coeffs)
        fit = StepFit(self.basis, self.shift, self.scale, coeffs)
        if squeeze:
            return fitted[:, 0], fit
        return fitted, fit
