"""Allocation of continuous-index observations onto an irregular grid.

Each mode's coordinate set holds the sorted unique values seen in that mode, so
every observation lands exactly on a grid cell. Cells hit by several points hold
the mean of their values.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class ObservationSet:
    """``index`` has shape ``(n, K)``; ``values`` has shape ``(n,)``."""

    index: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.index = np.atleast_2d(np.asarray(self.index, dtype=float))
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.index.shape[0] != self.values.shape[0]:
            raise ValueError("index and values disagree on the number of points")
        if self.values.size == 0:
            raise ValueError("no observations")
        if not (np.all(np.isfinite(self.index)) and np.all(np.isfinite(self.values))):
            raise ValueError("observations must be finite")

    @property
    def ndim(self):
        return self.index.shape[1]

    def __len__(self):
        return self.values.shape[0]


@dataclass
class GriddedData:
    coord_sets: list
    Y: np.ndarray
    O: np.ndarray
    multiplicity: np.ndarray

    @property
    def shape(self):
        return self.Y.shape

    @property
    def n_obs(self):
        return int(self.O.sum())


def build_coord_sets(obs):
    return [np.unique(obs.index[:, k]) for k in range(obs.ndim)]


def merge_coordinates(obs, tol):
    """Snap coordinates to multiples of ``tol`` so nearby values share a grid line."""
    if tol <= 0:
        raise ValueError("merge tolerance must be positive")
    return ObservationSet(np.round(obs.index / tol) * tol, obs.values)


MAX_CELLS = 2 ** 28


def allocate(obs):
    coord_sets = build_coord_sets(obs)
    dims = tuple(len(s) for s in coord_sets)
    if np.prod([float(d) for d in dims]) > MAX_CELLS:
        raise ValueError(
            f"grid {'x'.join(map(str, dims))} is too large to allocate; "
            "round the coordinates first (merge_coordinates / --merge-tol)"
        )
    cells = tuple(np.searchsorted(s, obs.index[:, k]) for k, s in enumerate(coord_sets))
    flat = np.ravel_multi_index(cells, dims)
    total = int(np.prod(dims))
    counts = np.bincount(flat, minlength=total)
    sums = np.bincount(flat, weights=obs.values, minlength=total)
    Y = np.zeros(total)
    hit = counts > 0
    Y[hit] = sums[hit] / counts[hit]
    return GriddedData(
        coord_sets=coord_sets,
        Y=Y.reshape(dims),
        O=hit.astype(np.int8).reshape(dims),
        multiplicity=counts.reshape(dims),
    )


def deallocate(g):
    cells = np.nonzero(g.O)
    if len(cells[0]) == 0:
        raise ValueError("no observations: indicator tensor is empty")
    index = np.column_stack([s[c] for s, c in zip(g.coord_sets, cells)])
    return ObservationSet(index, g.Y[cells])


def from_dense(Y, O=None, coord_sets=None):
    """Grid a dense tensor directly; coordinates default to 1..d_k per mode."""
    Y = np.asarray(Y, dtype=float)
    O = np.ones(Y.shape, dtype=np.int8) if O is None else np.asarray(O).astype(np.int8)
    if O.shape != Y.shape:
        raise ValueError("mask and tensor shapes differ")
    if coord_sets is None:
        coord_sets = [np.arange(1, d + 1, dtype=float) for d in Y.shape]
    return GriddedData(
        coord_sets=[np.asarray(s, dtype=float) for s in coord_sets],
        Y=np.where(O > 0, Y, 0.0),
        O=O,
        multiplicity=O.astype(np.int64),
    )
