from collections import Counter

import numpy as np
import pytest

from rrfbtc.grid import (
    GriddedData,
    ObservationSet,
    allocate,
    build_coord_sets,
    deallocate,
    from_dense,
    merge_coordinates,
)


def multiset(obs):
    return Counter((tuple(i), v) for i, v in zip(obs.index.tolist(), obs.values.tolist()))


def test_coord_sets_dedup():
    obs = ObservationSet([[0.2, 1.0], [0.5, 2.0], [0.2, 3.0]], [1.0, 2.0, 3.0])
    s = build_coord_sets(obs)
    np.testing.assert_array_equal(s[0], [0.2, 0.5])
    np.testing.assert_array_equal(s[1], [1.0, 2.0, 3.0])


def test_coord_sets_random():
    x = np.random.default_rng(0).uniform(size=(1000, 2))
    s = build_coord_sets(ObservationSet(x, np.zeros(1000)))
    for k in range(2):
        assert np.all(np.diff(s[k]) > 0)
        assert len(s[k]) == len(set(x[:, k].tolist()))


def test_two_points():
    g = allocate(ObservationSet([[0.1, 0.7], [0.4, 0.2]], [5.0, -1.0]))
    assert g.shape == (2, 2)
    assert g.n_obs == 2
    assert g.Y[0, 1] == 5.0 and g.Y[1, 0] == -1.0
    assert g.Y[0, 0] == 0.0 and g.O[0, 0] == 0


def test_collision_averages():
    g = allocate(ObservationSet([[1.0, 1.0], [1.0, 1.0]], [1.0, 3.0]))
    assert g.Y[0, 0] == 2.0
    assert g.multiplicity[0, 0] == 2
    assert g.O[0, 0] == 1


def test_full_integer_grid_round_trip():
    truth = np.random.default_rng(1).standard_normal((3, 4, 5))
    idx = np.array(np.meshgrid(*(np.arange(1, d + 1) for d in truth.shape), indexing="ij")).reshape(3, -1).T
    g = allocate(ObservationSet(idx, truth.ravel()))
    assert np.all(g.O == 1)
    np.testing.assert_array_equal(g.Y, truth)
    for k, d in enumerate(truth.shape):
        np.testing.assert_array_equal(g.coord_sets[k], np.arange(1, d + 1))


def test_deallocate_round_trip():
    rng = np.random.default_rng(2)
    obs = ObservationSet(rng.uniform(size=(50, 3)), rng.standard_normal(50))
    back = deallocate(allocate(obs))
    assert multiset(back) == multiset(obs)


def test_flag_count_with_collisions():
    obs = ObservationSet([[0, 0], [0, 0], [1, 1]], [1.0, 2.0, 3.0])
    g = allocate(obs)
    assert g.n_obs == 2 < len(obs)
    assert np.array_equal(g.O == 1, g.multiplicity >= 1)


def test_deallocate_empty():
    g = GriddedData([np.array([0.0]), np.array([0.0])], np.zeros((1, 1)), np.zeros((1, 1), np.int8), np.zeros((1, 1), int))
    with pytest.raises(ValueError):
        deallocate(g)


def test_observation_validation():
    with pytest.raises(ValueError):
        ObservationSet(np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        ObservationSet([[np.inf, 0.0]], [1.0])


def test_merge_tolerance():
    obs = ObservationSet([[0.1001, 0.0], [0.0999, 0.0]], [1.0, 3.0])
    g = allocate(merge_coordinates(obs, 1e-2))
    assert g.shape == (1, 1) and g.Y[0, 0] == 2.0


def test_from_dense_defaults():
    y = np.arange(6.0).reshape(2, 3)
    g = from_dense(y)
    assert g.n_obs == 6
    np.testing.assert_array_equal(g.coord_sets[1], [1, 2, 3])


def test_oversized_grid_rejected():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError, match="merge"):
        allocate(ObservationSet(rng.uniform(size=(1000, 3)), np.ones(1000)))
