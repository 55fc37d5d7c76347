"""Replica topology, group assignment, all-reduce, and batch padding tests."""

import numpy as np
import pytest

from minipod.collectives import (
    GroupAssignment,
    ReplicaTopology,
    all_reduce,
    assign_groups_1d,
    assign_groups_2d,
    most_square_grid,
    padded_batch_utilization,
)


def test_topology_default_grid_most_square():
    assert ReplicaTopology(16).grid == (4, 4)
    assert ReplicaTopology(8).grid == (2, 4)
    assert most_square_grid(1024) == (32, 32)
    assert most_square_grid(7) == (1, 7)


def test_topology_bad_grid():
    with pytest.raises(ValueError):
        ReplicaTopology(8, (3, 3))


@pytest.mark.parametrize("n,g,expected", [
    (8, 8, [tuple(range(8))]),
    (8, 1, [(i,) for i in range(8)]),
    (8, 4, [(0, 1, 2, 3), (4, 5, 6, 7)]),
])
def test_assign_groups_1d(n, g, expected):
    asg = assign_groups_1d(n, g)
    assert list(asg.members) == expected


def test_assign_groups_1d_non_divisor():
    with pytest.raises(ValueError, match="divide"):
        assign_groups_1d(8, 3)


def test_assign_groups_2d_tiling():
    asg = assign_groups_2d(ReplicaTopology(16, (4, 4)), (2, 2))
    assert list(asg.members) == [
        (0, 1, 4, 5), (2, 3, 6, 7), (8, 9, 12, 13), (10, 11, 14, 15)]


def test_assign_groups_2d_degenerate_tiles():
    topo = ReplicaTopology(16, (4, 4))
    assert list(assign_groups_2d(topo, (4, 4)).members) == [tuple(range(16))]
    assert list(assign_groups_2d(topo, (1, 1)).members) == [(i,) for i in range(16)]


def test_assign_groups_2d_non_divisor_tile():
    with pytest.raises(ValueError, match="tile"):
        assign_groups_2d(ReplicaTopology(16, (4, 4)), (3, 2))


@pytest.mark.parametrize("n,g", [(8, 2), (8, 8), (12, 4), (16, 1)])
def test_group_partition_invariants(n, g):
    asg = assign_groups_1d(n, g)
    seen = [r for grp in asg.members for r in grp]
    assert sorted(seen) == list(range(n))
    assert all(len(grp) == g for grp in asg.members)


@pytest.mark.parametrize("n,g", [(8, 2), (8, 4), (6, 3)])
def test_2d_rowtile_on_flat_grid_equals_1d(n, g):
    flat = assign_groups_2d(ReplicaTopology(n, (1, n)), (1, g))
    assert flat.members == assign_groups_1d(n, g).members
    assert flat.group_of == assign_groups_1d(n, g).group_of


def test_all_reduce_sum_hand_case():
    a = [np.array([1.0, 2.0], np.float32), np.array([3.0, 4.0], np.float32)]
    out = all_reduce(a, "sum")
    for t in out:
        assert np.array_equal(t, np.array([4.0, 6.0], np.float32))


def test_all_reduce_group_mean_hand_case():
    vals = [np.array([float(v)], np.float32) for v in (1, 2, 3, 4)]
    out = all_reduce(vals, "mean", assign_groups_1d(4, 2))
    assert [float(t[0]) for t in out] == [1.5, 1.5, 3.5, 3.5]


def test_all_reduce_single_replica_identity():
    x = np.array([5.0, -1.0], np.float32)
    out = all_reduce([x], "sum")
    assert np.array_equal(out[0], x)
    assert out[0] is not x  # reduced value delivered as a fresh tensor


def test_all_reduce_equals_sequential_sum():
    rng = np.random.default_rng(0)
    vals = [rng.standard_normal(7).astype(np.float32) for _ in range(6)]
    acc = vals[0].copy()
    for v in vals[1:]:
        acc += v
    out = all_reduce(vals, "sum")
    assert all(t.tobytes() == acc.tobytes() for t in out)


def test_all_reduce_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        all_reduce([np.zeros(2, np.float32), np.zeros(3, np.float32)], "sum")


def test_all_reduce_unknown_op():
    with pytest.raises(ValueError, match="op"):
        all_reduce([np.zeros(2, np.float32)], "max")


def test_group_assignment_validation():
    with pytest.raises(ValueError, match="members"):
        GroupAssignment(4, 2, (0, 0, 0, 1))
    with pytest.raises(ValueError, match="partition"):
        GroupAssignment(4, 2, (0, 0, 2, 2))


@pytest.mark.parametrize("b,padded,util", [
    (8, 8, 1.0), (4, 8, 0.5), (9, 16, 0.5625), (1, 8, 0.125), (16, 16, 1.0)])
def test_padded_batch_utilization(b, padded, util):
    assert padded_batch_utilization(b) == (padded, util)


def test_padded_batch_utilization_properties():
    for b in range(1, 200):
        padded, util = padded_batch_utilization(b)
        assert (util == 1.0) == (b % 8 == 0)
        assert util >= b / (b + 7)
    with pytest.raises(ValueError):
        padded_batch_utilization(0)
