"""Mean-field variational inference for the functional CP model.

Every factor column ``u_r^k`` (the values of the r-th latent function of mode k on
the mode's coordinate set) gets a Gaussian posterior ``N(m_r^k, Psi_r^k)``; the
component precisions ``gamma_r`` and the noise precision ``tau`` get Gamma
posteriors. Updates are closed-form block coordinate ascent on the ELBO, and
components whose learned power collapses are pruned between sweeps.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import digamma, gammaln

from .kernels import KernelSpec, gram, solve_spd
from .tensor_core import contract_except, cp_reconstruct, outer, unfold

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(FloatingPointError):
    """Non-finite values appeared during fitting."""


@dataclass(frozen=True)
class HyperPriors:
    """Gamma(shape, rate) hyperpriors for the component precisions and the noise precision."""

    a_gamma: float = 1e-3
    b_gamma: float = 1e-3
    a_tau: float = 1e-3
    b_tau: float = 1e-3

    def __post_init__(self):
        if min(self.a_gamma, self.b_gamma, self.a_tau, self.b_tau) <= 0:
            raise ValueError("hyperprior parameters must be strictly positive")


@dataclass(frozen=True)
class ModelConfig:
    kernels: tuple = (KernelSpec(),)
    rank_init: int | str = "auto"
    hyper: HyperPriors = field(default_factory=HyperPriors)
    prune_ratio: float = 1e-4
    max_iters: int = 200
    conv_tol: float = 1e-5
    init: str = "svd"
    seed: int = 0
    gamma_cap: float = 1e12
    stable_sweeps: int = 3
    tau_init_ratio: float = 100.0
    warmup_sweeps: int = 5

    def __post_init__(self):
        if isinstance(self.kernels, KernelSpec):
            object.__setattr__(self, "kernels", (self.kernels,))
        else:
            object.__setattr__(self, "kernels", tuple(self.kernels))
        if not 0 < self.prune_ratio < 1:
            raise ValueError("prune_ratio must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.conv_tol > 0:
            raise ValueError("conv_tol must be positive")
        if self.init not in ("svd", "random"):
            raise ValueError("init must be 'svd' or 'random'")
        if self.rank_init != "auto" and int(self.rank_init) < 1:
            raise ValueError("rank_init must be a positive integer or 'auto'")
        if not self.tau_init_ratio > 0:
            raise ValueError("tau_init_ratio must be positive")
        if self.warmup_sweeps < 0:
            raise ValueError("warmup_sweeps must be nonnegative")

    def kernel_for(self, mode):
        """A single spec is shared by every mode; otherwise one spec per mode."""
        if len(self.kernels) == 1:
            return self.kernels[0]
        return self.kernels[mode]


@dataclass
class FitState:
    """Variational posterior plus everything needed to keep updating or predicting.

    ``means[k]`` is ``(N_k, R)``; ``covs[k]`` is ``(R, N_k, N_k)``. ``data`` is None
    for states restored from a checkpoint.
    """

    coord_sets: list
    grams: list
    means: list
    covs: list
    a_gamma: np.ndarray
    b_gamma: np.ndarray
    a_tau: float
    b_tau: float
    config: ModelConfig
    data: object = None
    iteration: int = 0
    elbo_trace: list = field(default_factory=list)
    rank_trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def rank(self):
        return self.means[0].shape[1]

    @property
    def ndim(self):
        return len(self.means)

    @property
    def shape(self):
        return tuple(m.shape[0] for m in self.means)

    @property
    def gamma_mean(self):
        return self.a_gamma / self.b_gamma

    @property
    def gamma_used(self):
        """Component precisions as fed into the factor updates (overflow-capped)."""
        return np.minimum(self.gamma_mean, self.config.gamma_cap)

    @property
    def tau_mean(self):
        return self.a_tau / self.b_tau

    @property
    def component_power(self):
        return self.b_gamma / self.a_gamma

    def reconstruct(self):
        return cp_reconstruct(self.means)

    def copy(self):
        return replace(
            self,
            means=[m.copy() for m in self.means],
            covs=[c.copy() for c in self.covs],
            a_gamma=self.a_gamma.copy(),
            b_gamma=self.b_gamma.copy(),
            elbo_trace=list(self.elbo_trace),
            rank_trace=list(self.rank_trace),
        )


# ---------------------------------------------------------------------------
# initialisation


def _svd_init(Y, rank):
    means = []
    for k in range(Y.ndim):
        u, s, _ = np.linalg.svd(unfold(Y, k), full_matrices=False)
        r = min(rank, int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0)
        m = np.zeros((Y.shape[k], rank))
        m[:, :r] = u[:, :r] * np.sqrt(s[:r])
        means.append(m)
    return means


def init_state(data, cfg):
    dims = data.Y.shape
    n_obs = data.n_obs
    if n_obs == 0:
        raise ValueError("no observations to fit")
    if cfg.rank_init == "auto":
        rank = max(dims)
    else:
        rank = int(cfg.rank_init)
        if rank > max(dims):
            warnings.warn(f"rank_init={rank} exceeds the largest mode size {max(dims)}", stacklevel=2)
    if len(cfg.kernels) not in (1, len(dims)):
        raise ValueError(f"got {len(cfg.kernels)} kernel specs for a {len(dims)}-way tensor")

    grams = [gram(cfg.kernel_for(k), data.coord_sets[k]) for k in range(len(dims))]
    if cfg.init == "svd":
        means = _svd_init(data.Y, rank)
    else:
        rng = np.random.default_rng(cfg.seed)
        means = [0.1 * rng.standard_normal((d, rank)) for d in dims]
    covs = [np.broadcast_to(1e-2 * np.eye(d), (rank, d, d)).copy() for d in dims]

    hp = cfg.hyper
    a_gamma = np.full(rank, hp.a_gamma + 0.5 * sum(dims))
    b_gamma = a_gamma.copy()
    a_tau = hp.a_tau + 0.5 * n_obs
    # <tau> starts at tau_init_ratio / var(observed), i.e. an assumed initial SNR
    var = float(np.var(data.Y[data.O > 0]))
    b_tau = a_tau * (var / cfg.tau_init_ratio if var > 0 else 1.0)
    return FitState(
        coord_sets=[np.asarray(s, dtype=float) for s in data.coord_sets],
        grams=grams,
        means=means,
        covs=covs,
        a_gamma=a_gamma,
        b_gamma=b_gamma,
        a_tau=float(a_tau),
        b_tau=float(b_tau),
        config=cfg,
        data=data,
    )


# ---------------------------------------------------------------------------
# moments


def second_moments(state, mode):
    """``<u_r^k * u_r^k>`` for every r, shape ``(N_k, R)``."""
    diag = np.diagonal(state.covs[mode], axis1=1, axis2=2).T
    return state.means[mode] ** 2 + diag


def masked_rank1_sums(O, mats):
    """``sum_n O_n prod_k mats[k][n_k, r]`` for every column r."""
    K = O.ndim
    t = np.tensordot(O, mats[K - 1], axes=([K - 1], [0]))
    for k in range(K - 2, -1, -1):
        t = np.sum(t * mats[k], axis=-2)
    return t


def masked_residual(state):
    """``O * (Y - reconstruction)`` using the posterior means."""
    d = state.data
    return d.O * (d.Y - state.reconstruct())


def expected_masked_residual(state):
    """``E_q ||O * (Y - [[U^1..U^K]])||_F^2`` under the mean-field posterior."""
    O = state.data.O.astype(float)
    plain = float(np.sum(masked_residual(state) ** 2))
    sq = [m ** 2 for m in state.means]
    second = [second_moments(state, k) for k in range(state.ndim)]
    extra = masked_rank1_sums(O, second) - masked_rank1_sums(O, sq)
    return max(plain + float(np.sum(extra)), 0.0)


def expected_quadratic(g, mean, cov):
    """``E[u^T (Sigma + jitter I)^{-1} u]`` for ``u ~ N(mean, cov)``."""
    w = g.whiten(mean)
    return float(w @ w) + float(np.trace(solve_spd(g, cov)))


def quadratic_terms(state):
    """Array ``(K, R)`` of ``<(u_r^k)^T Sigma_k^{-1} u_r^k>``."""
    return np.array([
        [expected_quadratic(state.grams[k], state.means[k][:, r], state.covs[k][r])
         for r in range(state.rank)]
        for k in range(state.ndim)
    ])


# ---------------------------------------------------------------------------
# coordinate updates


def _posterior_column(g, gamma, precision_diag, rhs):
    """Gaussian posterior for prior ``N(0, Sigma/gamma)`` and diagonal likelihood precision ``D``.

    With ``Sigma = L L^T`` the covariance is ``L (L^T D L + gamma I)^{-1} L^T``,
    which needs no inverse of ``Sigma`` and involves no subtraction, so it stays
    accurate when the likelihood precision dwarfs the prior. If that inner
    factorization fails, the Woodbury form through ``I + S Sigma S`` is used.
    """
    d = np.maximum(precision_diag, 0.0)
    L = g.chol
    inner = L.T @ (d[:, None] * L)
    inner[np.diag_indices_from(inner)] += gamma
    try:
        G = cholesky(inner, lower=True)
    except np.linalg.LinAlgError:
        sigma = g.jittered
        s = np.sqrt(d / gamma)
        B = np.eye(sigma.shape[0]) + s[:, None] * sigma * s[None, :]
        V = solve_triangular(np.linalg.cholesky(B), s[:, None] * sigma, lower=True)
        cov = (sigma - V.T @ V) / gamma
    else:
        W = solve_triangular(G, L.T, lower=True)
        cov = W.T @ W
    cov = 0.5 * (cov + cov.T)
    return cov @ rhs, cov


def update_factor(state, mode, r, residual=None):
    """Refresh ``q(u_r^mode)`` in place and return the new ``(mean, cov)``.

    ``residual`` is the running ``O * (Y - reconstruction)`` tensor; when given it
    is updated in place so that it stays consistent with the new mean.
    """
    d = state.data
    O = d.O.astype(float)
    K = state.ndim
    own = residual is None
    if own:
        residual = masked_residual(state)
    vecs = [state.means[l][:, r] for l in range(K)]
    sq = [v ** 2 for v in vecs]
    second = [second_moments(state, l)[:, r] if l != mode else None for l in range(K)]

    tau = state.tau_mean
    weights = contract_except(O, second, mode)
    # residual with component r added back, contracted against the other means
    rhs = contract_except(residual, vecs, mode) + vecs[mode] * contract_except(O, sq, mode)
    mean, cov = _posterior_column(state.grams[mode], state.gamma_used[r], tau * weights, tau * rhs)

    delta = mean - state.means[mode][:, r]
    state.means[mode][:, r] = mean
    state.covs[mode][r] = cov
    if not own:
        step = list(vecs)
        step[mode] = delta
        residual -= O * outer(step)
    return mean, cov


def update_gamma(state):
    hp = state.config.hyper
    quad = quadratic_terms(state)
    state.a_gamma = np.full(state.rank, hp.a_gamma + 0.5 * sum(state.shape))
    state.b_gamma = hp.b_gamma + 0.5 * quad.sum(axis=0)
    return state.a_gamma, state.b_gamma


def update_tau(state):
    hp = state.config.hyper
    state.a_tau = hp.a_tau + 0.5 * state.data.n_obs
    state.b_tau = hp.b_tau + 0.5 * expected_masked_residual(state)
    return state.a_tau, state.b_tau


def mean_energy(state):
    """``||m_r^1 o ... o m_r^K||_F^2`` for every component r."""
    return np.prod([np.sum(m ** 2, axis=0) for m in state.means], axis=0)


def prune_ranks(state):
    """Drop components that have collapsed relative to the strongest one.

    A component goes when its power ``1/<gamma_r>`` or the energy of its mean
    rank-1 term falls below ``prune_ratio`` times the largest such value.
    """
    eps = state.config.prune_ratio
    power = state.component_power
    energy = mean_energy(state)
    keep = (power >= eps * power.max()) & (energy >= eps * energy.max())
    keep[np.argmax(power)] = True
    if keep.all():
        return state
    idx = np.flatnonzero(keep)
    state.means = [m[:, idx].copy() for m in state.means]
    state.covs = [c[idx].copy() for c in state.covs]
    state.a_gamma = state.a_gamma[idx].copy()
    state.b_gamma = state.b_gamma[idx].copy()
    return state


# ---------------------------------------------------------------------------
# evidence lower bound


def _gamma_entropy(a, b):
    return a - np.log(b) + gammaln(a) + (1.0 - a) * digamma(a)


def _gamma_log_prior(a0, b0, mean, log_mean):
    return a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * log_mean - b0 * mean


def compute_elbo(state):
    hp = state.config.hyper
    n_obs = state.data.n_obs
    tau = state.tau_mean
    log_tau = digamma(state.a_tau) - np.log(state.b_tau)
    gamma = state.gamma_mean
    log_gamma = digamma(state.a_gamma) - np.log(state.b_gamma)

    lik = 0.5 * n_obs * (log_tau - LOG_2PI) - 0.5 * tau * expected_masked_residual(state)

    quad = quadratic_terms(state)
    prior_u = 0.0
    entropy_u = 0.0
    for k, g in enumerate(state.grams):
        n = g.size
        prior_u += np.sum(0.5 * n * (log_gamma - LOG_2PI) - 0.5 * g.logdet() - 0.5 * gamma * quad[k])
        for r in range(state.rank):
            _, logdet = np.linalg.slogdet(state.covs[k][r])
            entropy_u += 0.5 * (logdet + n * (1.0 + LOG_2PI))

    prior_gamma = np.sum(_gamma_log_prior(hp.a_gamma, hp.b_gamma, gamma, log_gamma))
    prior_tau = _gamma_log_prior(hp.a_tau, hp.b_tau, tau, log_tau)
    entropy_hyper = np.sum(_gamma_entropy(state.a_gamma, state.b_gamma)) + _gamma_entropy(state.a_tau, state.b_tau)
    return float(lik + prior_u + prior_gamma + prior_tau + entropy_u + entropy_hyper)


# ---------------------------------------------------------------------------
# driver


def sweep(state, update_hyper=True):
    """One pass: every factor block, then gamma, pruning, tau. Returns the state.

    With ``update_hyper=False`` the gamma update and pruning are skipped.
    """
    residual = masked_residual(state)
    for k in range(state.ndim):
        for r in range(state.rank):
            update_factor(state, k, r, residual)
    if update_hyper:
        update_gamma(state)
        prune_ranks(state)
    update_tau(state)
    state.iteration += 1
    return state


def _check_finite(state):
    bad = [k for k in range(state.ndim)
           if not (np.all(np.isfinite(state.means[k])) and np.all(np.isfinite(state.covs[k])))]
    if bad or not np.all(np.isfinite(state.b_gamma)) or not np.isfinite(state.b_tau):
        raise NumericalError(
            f"non-finite posterior at iteration {state.iteration} "
            f"(rank {state.rank}, modes {bad}, tau={state.tau_mean:g})"
        )


def fit(data, cfg, state=None, callback=None):
    """Run sweeps until the reconstruction settles and the rank has been stable.

    Convergence needs ``||X_t - X_{t-1}||_F / ||X_{t-1}||_F < conv_tol`` and an
    unchanged rank for ``cfg.stable_sweeps`` consecutive sweeps. During the first
    ``cfg.warmup_sweeps`` sweeps gamma stays at its initial value and nothing is
    pruned, so that components are not shrunk away before the fit has settled.
    """
    if state is None:
        state = init_state(data, cfg)
    prev = state.reconstruct()
    stable = 0
    for _ in range(cfg.max_iters):
        rank_before = state.rank
        sweep(state, update_hyper=state.iteration >= cfg.warmup_sweeps)
        _check_finite(state)
        state.elbo_trace.append(compute_elbo(state))
        state.rank_trace.append(state.rank)
        current = state.reconstruct()
        denom = np.linalg.norm(prev)
        change = np.linalg.norm(current - prev) / denom if denom > 0 else np.inf
        stable = stable + 1 if state.rank == rank_before else 0
        log.debug("iter %d rank %d change %.3e elbo %.6e", state.iteration, state.rank, change, state.elbo_trace[-1])
        if callback is not None:
            callback(state)
        prev = current
        if change < cfg.conv_tol and stable >= cfg.stable_sweeps and state.iteration > cfg.warmup_sweeps:
            state.converged = True
            break
    return state
