"""Posterior prediction of the latent factor functions at unseen real-valued indices."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .kernels import factorize, kernel_matrix

log = logging.getLogger(__name__)

DEFAULT_NOISE = 1e-6


@dataclass
class FactorPrediction:
    """Matrix-normal posterior of the factor rows at the query points, per mode.

    ``means[k]`` is ``(M, R)``; ``col_var[k]`` the diagonal of the column
    covariance (length M); ``col_cov[k]`` the full ``(M, M)`` matrix when requested;
    ``row_var`` the diagonal of the shared row covariance ``diag(1/<gamma_r>)``.
    """

    means: list
    col_var: list
    row_var: np.ndarray
    col_cov: list | None = None
    clamped: int = 0


def resolve_noise(state, noise):
    """Map ``'jitter'`` / ``'learned'`` / a number onto the interpolation noise variance."""
    if noise is None or noise == "jitter":
        return DEFAULT_NOISE
    if noise == "learned":
        return 1.0 / state.tau_mean
    noise = float(noise)
    if noise < 0:
        raise ValueError("noise variance must be nonnegative")
    return noise


def _as_query(query, ndim):
    q = np.atleast_2d(np.asarray(query, dtype=float))
    if q.shape[1] != ndim:
        raise ValueError(f"query has {q.shape[1]} columns but the model has {ndim} modes")
    if q.shape[0] == 0:
        raise ValueError("empty query set")
    if not np.all(np.isfinite(q)):
        raise ValueError("query indices must be finite")
    return q


def predict_factors(state, query, noise=DEFAULT_NOISE, full_cov=False):
    """GP-interpolate each mode's posterior mean factor matrix to the query coordinates.

    Only the factor means enter; the per-column posterior covariances from fitting
    are not propagated.
    """
    q = _as_query(query, state.ndim)
    sigma2 = resolve_noise(state, noise)
    means, col_var, col_cov = [], [], []
    clamped = 0
    for k, coords in enumerate(state.coord_sets):
        spec = state.config.kernel_for(k)
        train = kernel_matrix(spec, coords, coords)
        chol, _ = factorize(0.5 * (train + train.T), sigma2)
        uniq, inverse = np.unique(q[:, k], return_inverse=True)
        cross = kernel_matrix(spec, coords, uniq)
        alpha = cho_solve((chol, True), cross)
        means.append((alpha.T @ state.means[k])[inverse])

        prior_diag = np.diag(kernel_matrix(spec, uniq, uniq)) + sigma2
        var = prior_diag - np.einsum("ij,ij->j", cross, alpha)
        clamped += int(np.sum(var < 0))
        col_var.append(np.maximum(var, 0.0)[inverse])
        if full_cov:
            cq = cross[:, inverse]
            cov = kernel_matrix(spec, q[:, k], q[:, k]) + sigma2 * np.eye(len(q)) - cq.T @ cho_solve((chol, True), cq)
            cov = 0.5 * (cov + cov.T)
            np.fill_diagonal(cov, np.maximum(np.diag(cov), 0.0))
            col_cov.append(cov)
    if clamped:
        log.warning("clamped %d negative predictive variances to zero", clamped)
    return FactorPrediction(
        means=means,
        col_var=col_var,
        row_var=1.0 / state.gamma_mean,
        col_cov=col_cov if full_cov else None,
        clamped=clamped,
    )


def values_from_factors(pred):
    rows = pred.means[0].copy()
    for m in pred.means[1:]:
        rows *= m
    return rows.sum(axis=1)


def predict_values(state, query, noise=DEFAULT_NOISE):
    """Continuous-tensor estimate ``sum_r prod_k M_k[m, r]`` at every query point."""
    return values_from_factors(predict_factors(state, query, noise))


def predictive_std(pred, row):
    """Per-mode, per-rank marginal standard deviations of factor entry ``(row, r)``; shape ``(K, R)``."""
    return np.array([np.sqrt(v[row] * pred.row_var) for v in pred.col_var])
