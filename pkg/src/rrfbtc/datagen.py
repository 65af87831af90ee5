"""Synthetic tensors, noise injection and observation sampling."""

import numpy as np

from .tensor_core import cp_reconstruct


def gen_random_cp(dims, rank, seed):
    """Rank-``rank`` CP tensor with i.i.d. standard normal factors."""
    rng = np.random.default_rng(seed)
    factors = [rng.standard_normal((int(d), int(rank))) for d in dims]
    return cp_reconstruct(factors), factors


def f1(x):
    return np.sin(2 * np.pi * x) ** 2 * np.cos(2 * np.pi * x)


def f2(y):
    return np.sin(np.pi * y / 4) * (1 - np.sin(np.pi * y / 2) ** 3)


def f3(z):
    return np.exp(-2 * z) * np.sin(1.5 * np.pi * z)


LATENT_FUNCTIONS = (f1, f2, f3)


def continuous_function(x, y, z):
    """Rank-1 trivariate test function; broadcasts over its arguments."""
    return f1(x) * f2(y) * f3(z)


def gen_continuous(size=(50, 50, 50), seed=0):
    """Sample sorted uniform coordinates on [0, 1] per mode and evaluate the test function.

    Returns ``(coord_sets, truth, fn)``.
    """
    rng = np.random.default_rng(seed)
    coords = [np.sort(rng.uniform(0.0, 1.0, int(n))) for n in size]
    truth = continuous_function(*np.meshgrid(*coords, indexing="ij"))
    return coords, truth, continuous_function


def noise_variance(truth, snr_db):
    truth = np.asarray(truth, dtype=float)
    energy = float(np.sum(truth ** 2))
    if energy == 0:
        raise ValueError("SNR is undefined for an all-zero tensor")
    return energy / (truth.size * 10.0 ** (snr_db / 10.0))


def add_noise_snr(truth, snr_db, seed):
    """Add i.i.d. Gaussian noise whose variance sets ``10 log10(||X||^2 / (T s^2)) = snr_db``."""
    sigma2 = noise_variance(truth, snr_db)
    rng = np.random.default_rng(seed)
    return truth + np.sqrt(sigma2) * rng.standard_normal(np.shape(truth))


def empirical_snr(truth, noisy):
    truth = np.asarray(truth, dtype=float)
    noise = np.asarray(noisy, dtype=float) - truth
    return 10.0 * np.log10(np.sum(truth ** 2) / np.sum(noise ** 2))


def sample_mask(dims, sr, seed):
    """Exactly ``round(sr * T)`` cells flagged, uniformly without replacement."""
    if not 0 < sr <= 1:
        raise ValueError("sampling rate must lie in (0, 1]")
    dims = tuple(int(d) for d in dims)
    total = int(np.prod(dims))
    count = int(round(sr * total))
    rng = np.random.default_rng(seed)
    mask = np.zeros(total, dtype=np.int8)
    mask[rng.choice(total, size=count, replace=False)] = 1
    return mask.reshape(dims)
