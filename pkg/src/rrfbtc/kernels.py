"""Kernels over real-valued coordinates and jittered Cholesky Gram matrices."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

log = logging.getLogger(__name__)

FAMILIES = ("matern52", "rbf", "exponential", "identity")
MAX_JITTER_RATIO = 1e-2
DEFAULT_JITTER_RATIO = 1e-8


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a Gram matrix stays indefinite after jitter escalation."""

    def __init__(self, msg, jitter):
        super().__init__(msg)
        self.jitter = jitter


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family, lengthscale and jitter.

    ``jitter=None`` means ``1e-8`` times the mean diagonal of the Gram matrix.
    The ``identity`` family ignores coordinates and yields ``Sigma = I``.
    """

    family: str = "matern52"
    lengthscale: float = 1.0
    jitter: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be nonnegative")


def kernel_matrix(spec, a, b):
    """Cross-covariance ``K[i, j] = k(a[i], b[j])``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    h = spec.lengthscale
    if spec.family == "identity":
        return (a[:, None] == b[None, :]).astype(float)
    if spec.family == "exponential":
        return np.exp(np.multiply.outer(a, b))
    dist = np.abs(a[:, None] - b[None, :])
    if spec.family == "rbf":
        return np.exp(-((dist / h) ** 2))
    s = math.sqrt(5.0) * dist / h
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def kernel_eval(spec, a, b):
    return float(kernel_matrix(spec, [a], [b])[0, 0])


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """Kernel matrix over a coordinate set together with the Cholesky factor of ``sigma + jitter*I``."""

    coords: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray
    jitter: float

    @property
    def size(self):
        return self.sigma.shape[0]

    @property
    def jittered(self):
        return self.sigma + self.jitter * np.eye(self.size)

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def inv(self):
        return solve_spd(self, np.eye(self.size))

    def whiten(self, b):
        """``L^{-1} b`` for the lower Cholesky factor ``L``."""
        return solve_triangular(self.chol, b, lower=True)


def factorize(sigma, jitter=None):
    """Cholesky of ``sigma + jitter*I`` with x10 escalation up to ``1e-2`` x mean diagonal."""
    sigma = np.asarray(sigma, dtype=float)
    if not np.all(np.isfinite(sigma)):
        raise CholeskyError("Gram matrix has non-finite entries", jitter)
    n = sigma.shape[0]
    scale = float(np.mean(np.diag(sigma))) if n else 1.0
    if scale <= 0:
        scale = 1.0
    delta = DEFAULT_JITTER_RATIO * scale if jitter is None else float(jitter)
    ceiling = MAX_JITTER_RATIO * scale
    eye = np.eye(n)
    while True:
        try:
            return cholesky(sigma + delta * eye, lower=True), delta
        except np.linalg.LinAlgError:
            pass
        if delta >= ceiling:
            raise CholeskyError(f"Gram matrix not positive definite with jitter {delta:g}", delta)
        delta = min(max(delta * 10.0, 1e-300), ceiling)
        log.debug("raising jitter to %g", delta)


def gram(spec, coords):
    coords = np.asarray(coords, dtype=float).reshape(-1)
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    sigma = kernel_matrix(spec, coords, coords)
    sigma = 0.5 * (sigma + sigma.T)
    jitter = spec.jitter
    if jitter is None and spec.family == "identity":
        jitter = 0.0
    chol, delta = factorize(sigma, jitter)
    return GramMatrix(coords=coords, sigma=sigma, chol=chol, jitter=delta)


def solve_spd(g, b):
    """``(sigma + jitter*I)^{-1} b`` via the cached Cholesky factor."""
    return cho_solve((g.chol, True), b)
