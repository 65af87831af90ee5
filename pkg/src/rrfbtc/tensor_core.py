"""Dense tensor algebra.

Tensors are plain C-ordered ``numpy`` arrays, so the flat storage order has the
last mode varying fastest. Modes are 0-based throughout the Python API.

Unfoldings follow the Kolda convention: the columns of ``unfold(t, k)`` enumerate
the remaining modes with the *first* one varying fastest, which makes

    unfold(cp_reconstruct(U), k) == U[k] @ khatri_rao(U[K-1], ..., U[k+1], U[k-1], ..., U[0]).T
"""

from functools import reduce

import numpy as np


def _check_mode(ndim, mode):
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for a {ndim}-way tensor")


def unfold(t, mode):
    """Mode-``mode`` matricization, shape ``(d_mode, prod(other dims))``."""
    t = np.asarray(t)
    _check_mode(t.ndim, mode)
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def fold(mat, mode, dims):
    """Inverse of :func:`unfold`."""
    dims = tuple(int(d) for d in dims)
    _check_mode(len(dims), mode)
    moved = (dims[mode],) + dims[:mode] + dims[mode + 1:]
    return np.moveaxis(np.reshape(np.asarray(mat), moved, order="F"), 0, mode)


def khatri_rao(matrices):
    """Column-wise Kronecker product; the last operand's row index varies fastest."""
    matrices = [np.asarray(m, dtype=float) for m in matrices]
    if not matrices:
        raise ValueError("khatri_rao needs at least one matrix")
    rank = matrices[0].shape[1]
    if any(m.ndim != 2 or m.shape[1] != rank for m in matrices):
        raise ValueError("all matrices must be 2-D with the same number of columns")

    def pair(a, b):
        return (a[:, None, :] * b[None, :, :]).reshape(-1, rank)

    return reduce(pair, matrices)


def cp_reconstruct(factors):
    """Sum of rank-1 outer products of the factor-matrix columns."""
    factors = [np.asarray(f, dtype=float) for f in factors]
    if not factors:
        raise ValueError("no factor matrices given")
    rank = factors[0].shape[1]
    if any(f.ndim != 2 or f.shape[1] != rank for f in factors):
        raise ValueError("factor matrices must share their column count")
    dims = tuple(f.shape[0] for f in factors)
    # C-order flattening == khatri_rao over modes in natural order
    return (khatri_rao(factors) @ np.ones(rank)).reshape(dims)


def outer(vectors):
    """Outer product of a list of vectors."""
    out = np.asarray(vectors[0], dtype=float)
    for v in vectors[1:]:
        out = np.multiply.outer(out, np.asarray(v, dtype=float))
    return out


def contract_except(t, vectors, mode):
    """Contract every mode of ``t`` except ``mode`` with the matching vector.

    ``vectors[mode]`` is ignored. Equivalent to ``unfold(t, mode) @ kr`` where
    ``kr`` is the Khatri-Rao product of the other vectors in descending mode order.
    """
    t = np.asarray(t)
    _check_mode(t.ndim, mode)
    out = t
    for k in range(t.ndim - 1, -1, -1):
        if k == mode:
            continue
        out = np.tensordot(out, vectors[k], axes=([k], [0]))
    return out


def masked_sq_norm(t, mask):
    t = np.asarray(t, dtype=float)
    mask = np.asarray(mask)
    if t.shape != mask.shape:
        raise ValueError(f"shape mismatch: tensor {t.shape} vs mask {mask.shape}")
    return float(np.sum(t[mask.astype(bool)] ** 2))
