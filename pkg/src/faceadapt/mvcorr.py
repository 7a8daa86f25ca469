"""Closed-form multiview correlation (MvCorr) subspace.

Given M synchronized views X_1..X_M (d x N, column i of every view observes
the same track), find V maximizing

    tr[(V' R_W V)^-1 V' R_B V] / ((M - 1) r)

where R_B sums the cross-view covariances and R_W the per-view ones.  The
maximizer is the top-r generalized eigenvectors of (R_B, R_W + eps I).
"""

from __future__ import annotations

import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cholesky, eigh, solve_triangular

from faceadapt.core import ValidationError, normalize_columns

RIDGE_SCALE = 1e-4


class SubspaceError(ValidationError):
    pass


@dataclass(frozen=True)
class ViewStack:
    views: tuple[np.ndarray, ...]
    means: tuple[np.ndarray, ...] | None = None
    centered: bool = False

    def __post_init__(self):
        views = tuple(np.asarray(v, dtype=np.float64) for v in self.views)
        if len(views) < 2:
            raise SubspaceError("need at least 2 views")
        shape = views[0].shape
        if len(shape) != 2:
            raise SubspaceError("views must be d x N matrices")
        for v in views:
            if v.shape != shape:
                raise SubspaceError(f"inconsistent view shapes {v.shape} vs {shape}")
            if not np.all(np.isfinite(v)):
                raise SubspaceError("non-finite entries in views")
        object.__setattr__(self, "views", views)

    @property
    def M(self) -> int:
        return len(self.views)

    @property
    def dim(self) -> int:
        return self.views[0].shape[0]

    @property
    def N(self) -> int:
        return self.views[0].shape[1]


@dataclass(frozen=True)
class CovariancePair:
    R_B: np.ndarray
    R_W: np.ndarray
    M: int
    N: int
    mean: np.ndarray = field(default=None)

    @property
    def dim(self) -> int:
        return self.R_W.shape[0]


@dataclass(frozen=True)
class SubspaceModel:
    V: np.ndarray  # d x r
    eigenvalues: np.ndarray  # r, descending
    epsilon: float
    M: int
    mean: np.ndarray  # d

    @property
    def dim(self) -> int:
        return self.V.shape[0]

    @property
    def r(self) -> int:
        return self.V.shape[1]


def center_views(stack: ViewStack) -> ViewStack:
    if stack.N < 2:
        raise SubspaceError("centering needs N >= 2 samples")
    means = tuple(v.mean(axis=1) for v in stack.views)
    views = tuple(v - m[:, None] for v, m in zip(stack.views, means))
    if stack.means is not None:
        means = tuple(a + b for a, b in zip(stack.means, means))
    return ViewStack(views, means, centered=True)


def covariances(stack: ViewStack) -> CovariancePair:
    """Between- and within-view scatter of a stack (centered on demand).

    The (N - 1)^-1 M^-1 factor common to both is dropped.
    """
    if not stack.centered:
        stack = center_views(stack)
    d = stack.dim
    R_W = np.zeros((d, d))
    S = np.zeros_like(stack.views[0])
    for X in stack.views:
        R_W += X @ X.T
        S += X
    # sum_{l != k} X_l X_k' = (sum X_l)(sum X_k)' - sum X_l X_l'
    R_B = S @ S.T - R_W
    R_B = (R_B + R_B.T) / 2.0
    R_W = (R_W + R_W.T) / 2.0
    mean = np.mean(stack.means, axis=0) if stack.means is not None else np.zeros(d)
    return CovariancePair(R_B, R_W, stack.M, stack.N, mean)


def default_epsilon(R_W: np.ndarray) -> float:
    return RIDGE_SCALE * float(np.trace(R_W)) / R_W.shape[0]


def solve_subspace(cov: CovariancePair, r: int | None = None, epsilon: float | None = None) -> SubspaceModel:
    """Top-r generalized eigenpairs of (R_B, R_W + eps I) by Cholesky reduction."""
    d = cov.dim
    r = d if r is None else int(r)
    if not 1 <= r <= d:
        raise SubspaceError(f"r={r} outside [1, {d}]")
    eps = default_epsilon(cov.R_W) if epsilon is None else float(epsilon)
    if eps < 0:
        raise SubspaceError("epsilon must be >= 0")
    B = cov.R_W + eps * np.eye(d)
    try:
        L = cholesky(B, lower=True)
    except LinAlgError:
        lam_min = float(np.linalg.eigvalsh(B)[0])
        raise SubspaceError(
            f"R_W + eps*I is not positive definite (smallest eigenvalue {lam_min:.3e}); raise epsilon"
        ) from None
    C = solve_triangular(L, cov.R_B, lower=True)
    C = solve_triangular(L, C.T, lower=True)
    C = (C + C.T) / 2.0
    w, U = eigh(C)
    order = np.argsort(-w, kind="stable")[:r]
    w, U = w[order], U[:, order]
    V = solve_triangular(L.T, U, lower=False)
    # fix each column's sign so the largest-magnitude entry is positive
    piv = np.argmax(np.abs(V), axis=0)
    V = V * np.where(V[piv, np.arange(r)] < 0, -1.0, 1.0)
    mean = cov.mean if cov.mean is not None else np.zeros(d)
    return SubspaceModel(V, w, eps, cov.M, np.asarray(mean, dtype=np.float64))


def trace_ratio(V: np.ndarray, cov: CovariancePair) -> float:
    """Multiview correlation of an arbitrary d x r projection.

    (1 / (r (M - 1))) tr[(V' R_W V)^-1 V' R_B V]: the mean per-component
    correlation, 1 for identical views at any r and a function of span(V)
    only.  On R_W-orthonormal V it reduces to tr(V' R_B V) / (r (M - 1)).
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape[0] != cov.dim:
        raise SubspaceError(f"projection has {V.shape[0]} rows, covariances are {cov.dim}-dimensional")
    W = V.T @ cov.R_W @ V
    W = (W + W.T) / 2.0
    if not np.trace(W) > 0:
        raise SubspaceError("tr(V' R_W V) <= 0")
    try:
        L = cholesky(W, lower=True)
    except LinAlgError:
        raise SubspaceError("V' R_W V is singular; the projection has degenerate columns") from None
    C = solve_triangular(L, V.T @ cov.R_B @ V, lower=True)
    C = solve_triangular(L, C.T, lower=True)
    return float(np.trace(C)) / (V.shape[1] * (cov.M - 1))


def mv_corr(model: SubspaceModel, cov: CovariancePair) -> float:
    if model.dim != cov.dim:
        raise SubspaceError("model and covariance dimensions differ")
    return trace_ratio(model.V, cov)


def project(model: SubspaceModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != model.dim:
        raise SubspaceError(f"input dimension {x.shape[0]} != model dimension {model.dim}")
    if x.ndim == 1:
        return model.V.T @ (x - model.mean)
    return model.V.T @ (x - model.mean[:, None])


def adapt_closed_form(model: SubspaceModel, X) -> np.ndarray:
    """Project columns of X and renormalize to unit length."""
    return normalize_columns(project(model, X))


def views_from_samples(samples: Sequence) -> ViewStack:
    """View 1 = anchors, views 2..P = positives; column i is sample i."""
    n_views = len(samples[0].views)
    return ViewStack(tuple(np.column_stack([s.views[l] for s in samples]) for l in range(n_views)))


def component_correlations(model: SubspaceModel) -> np.ndarray:
    """Per-component multiview correlation, eigenvalue / (M - 1)."""
    return model.eigenvalues / (model.M - 1)


def truncate(model: SubspaceModel, r: int) -> SubspaceModel:
    if not 1 <= r <= model.r:
        raise SubspaceError(f"r={r} outside [1, {model.r}]")
    return SubspaceModel(model.V[:, :r], model.eigenvalues[:r], model.epsilon, model.M, model.mean)


def rank_for_correlation(model: SubspaceModel, min_corr: float) -> int:
    """Number of leading components with correlation >= min_corr (at least 1)."""
    return max(1, int(np.sum(component_correlations(model) >= min_corr)))


def fit_mvcorr(samples: Sequence, r: int | None = None, epsilon: float | None = None,
               min_corr: float | None = None) -> SubspaceModel:
    """Fit the subspace on mined samples.

    ``r`` fixes the dimension (default: full); ``min_corr`` instead keeps the
    leading components whose multiview correlation reaches that value.
    """
    if r is not None and min_corr is not None:
        raise SubspaceError("give either r or min_corr, not both")
    if len(samples) < 2:
        raise SubspaceError("need at least 2 samples")
    stack = views_from_samples(samples)
    if stack.N < stack.dim + 1:
        warnings.warn(
            f"{stack.N} samples for {stack.dim} dimensions; R_W is rank deficient and relies on the ridge",
            stacklevel=2,
        )
    model = solve_subspace(covariances(stack), r, epsilon)
    if min_corr is not None:
        model = truncate(model, rank_for_correlation(model, min_corr))
    return model
