"""Shared optimisation machinery for the ML and Laplace fitting engines.

Both engines maximise a smooth log density over the stacked parameter
vector (beta, alpha, log_theta).  The driver runs BFGS with guarded
central-difference gradients, then polishes with damped Newton steps
until the gradient norm clears the convergence threshold, and finally
turns the negative Hessian at the mode into a covariance matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import ModelError, NumericError
from .likelihood import finite_diff_gradient, finite_diff_hessian
from .model import (
    DesignMatrices,
    MixtureFamily,
    ObservationTable,
    ParameterVector,
)


@dataclass(frozen=True)
class FitOptions:
    """Knobs for the optimiser; the defaults suit tables of a few hundred rows."""

    max_iterations: int = 500
    gradient_tol: float = 1e-5
    convergence_gradient_norm: float = 1e-4
    polish_steps: int = 12
    compute_covariance: bool = True


DEFAULT_FIT_OPTIONS = FitOptions()


@dataclass(frozen=True)
class FitResult:
    """Outcome of a fit: mode, curvature, and convergence diagnostics.

    ``loglik`` is the maximised objective: the log-likelihood for the ML
    engine, the log posterior kernel for the Laplace engine.
    ``covariance`` is None when the curvature at the mode was not
    positive definite or covariance computation was switched off.
    """

    estimates: ParameterVector
    covariance: np.ndarray | None
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    family: MixtureFamily
    parameter_names: tuple[str, ...]

    @property
    def n_params(self) -> int:
        return self.estimates.n_params


def _column_rank_report(matrix: np.ndarray, names: tuple[str, ...]) -> list[str]:
    """Names of columns beyond the numerical rank, empty if full rank."""
    _, r, pivot = scipy.linalg.qr(matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return list(names)
    tol = max(matrix.shape) * np.finfo(float).eps * diag[0]
    rank = int(np.sum(diag > tol))
    return [names[i] for i in pivot[rank:]]


def check_designs_for_fit(
    table: ObservationTable, designs: DesignMatrices, family: MixtureFamily
) -> None:
    """Reject under-determined or rank-deficient fitting problems."""
    if designs.n_rows != table.n_rows or designs.n_surveys != table.n_surveys:
        raise ModelError(
            "designs and table disagree on shape: "
            f"designs ({designs.n_rows} rows, {designs.n_surveys} surveys) vs "
            f"table ({table.n_rows} rows, {table.n_surveys} surveys)"
        )
    n_params = designs.p_lambda + designs.p_detect + (1 if family.has_dispersion else 0)
    if table.n_rows < n_params:
        raise ModelError(
            f"{n_params} parameters but only {table.n_rows} rows; the fit is under-determined"
        )
    a_names = designs.abundance_names or tuple(f"x{i}" for i in range(designs.p_lambda))
    bad = _column_rank_report(np.asarray(designs.abundance_design), a_names)
    if bad:
        raise ModelError(
            "abundance design is rank deficient; collinear columns: " + ", ".join(bad)
        )
    d_names = designs.detection_names or tuple(f"x{i}" for i in range(designs.p_detect))
    stacked = np.asarray(designs.detection_design)[table.mask]
    bad = _column_rank_report(stacked, d_names)
    if bad:
        raise ModelError(
            "detection design is rank deficient over the observed cells; "
            "collinear columns: " + ", ".join(bad)
        )


def _guarded(log_density):
    """Negative objective that reports invalid regions as +inf."""

    def neg(x):
        try:
            value = log_density(x)
        except NumericError:
            return np.inf
        if not np.isfinite(value):
            return np.inf
        return -value

    return neg


def _tolerant_gradient(neg, x, rel_step=1e-5):
    """Central differences of a guarded objective; NaN where probes fail."""
    grad = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        up = x.copy()
        up[i] += h
        down = x.copy()
        down[i] -= h
        f_up, f_down = neg(up), neg(down)
        grad[i] = (
            (f_up - f_down) / (2.0 * h)
            if np.isfinite(f_up) and np.isfinite(f_down)
            else np.nan
        )
    return grad


def maximize_log_density(log_density, x0: np.ndarray, options: FitOptions):
    """Maximise ``log_density`` from ``x0``.

    Returns (x_hat, value, converged, iterations, gradient_norm) where
    gradient_norm is the infinity norm of the raising central-difference
    gradient at the returned point.
    """
    x0 = np.asarray(x0, dtype=float)
    neg = _guarded(log_density)
    f0 = neg(x0)
    if not np.isfinite(f0):
        raise NumericError("objective is not finite at the starting point")

    with np.errstate(all="ignore"):
        res = scipy.optimize.minimize(
            neg,
            x0,
            jac=lambda x: _tolerant_gradient(neg, x),
            method="BFGS",
            options={"gtol": options.gradient_tol, "maxiter": options.max_iterations},
        )
    x_best, f_best = (res.x, res.fun) if np.isfinite(res.fun) and res.fun <= f0 else (x0, f0)
    iterations = int(res.nit)

    def neg_raising(x):
        return -log_density(x)

    grad = finite_diff_gradient(neg_raising, x_best)
    gnorm = float(np.max(np.abs(grad)))

    # Newton polish: BFGS with noisy finite-difference gradients often
    # stalls just above the convergence threshold.
    for _ in range(options.polish_steps):
        if gnorm <= options.gradient_tol:
            break
        try:
            hess = finite_diff_hessian(neg_raising, x_best)
            step = np.linalg.solve(hess, -grad)
        except (NumericError, np.linalg.LinAlgError):
            break
        if not np.all(np.isfinite(step)):
            break
        scale = 1.0
        improved = False
        while scale >= 1e-4:
            cand = x_best + scale * step
            f_cand = neg(cand)
            if f_cand < f_best:
                try:
                    cand_grad = finite_diff_gradient(neg_raising, cand)
                except NumericError:
                    break
                x_best, f_best, grad = cand, f_cand, cand_grad
                gnorm = float(np.max(np.abs(grad)))
                improved = True
                break
            scale *= 0.5
        iterations += 1
        if not improved:
            break

    converged = bool(gnorm < options.convergence_gradient_norm)
    return x_best, -f_best, converged, iterations, gnorm


def covariance_from_log_density(log_density, x_hat: np.ndarray) -> np.ndarray | None:
    """Covariance as the inverse negative Hessian, or None when not usable.

    None signals curvature that is singular or not positive definite at
    the mode; callers surface this as a fit without standard errors
    rather than an error.
    """

    def neg(x):
        return -log_density(x)

    try:
        hess = finite_diff_hessian(neg, x_hat)
    except NumericError:
        return None
    eigval, eigvec = np.linalg.eigh(hess)
    if np.any(eigval <= 0.0) or not np.all(np.isfinite(eigval)):
        return None
    cov = (eigvec / eigval) @ eigvec.T
    return 0.5 * (cov + cov.T)


def default_start(
    table: ObservationTable, designs: DesignMatrices, family: MixtureFamily
) -> ParameterVector:
    """Starting point: intercept at log(mean(row max) + 0.5), all else zero."""
    beta = np.zeros(designs.p_lambda)
    beta[0] = np.log(float(np.mean(table.row_max())) + 0.5)
    alpha = np.zeros(designs.p_detect)
    log_theta = 0.0 if family.has_dispersion else None
    return ParameterVector(beta=beta, alpha=alpha, log_theta=log_theta)
