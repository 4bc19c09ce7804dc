"""Partitioners and domain scenarios: disjointness, coverage, skew, nesting."""

import numpy as np
import pytest

from fedloc.dataset import (
    build_device_scenario,
    build_time_scenario,
    filter_records,
    largest_gap_split_time,
    partition_by_floor,
    partition_by_phone,
    partition_uniform,
    pool_records,
    verify_partition,
)


def _all_train_ids(scenario) -> np.ndarray:
    parts = [c.row_ids for a in (scenario.source, scenario.target) for c in a.clients.values()]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Partitioners


def test_by_phone_clients_hold_single_phones(b1f1):
    a = partition_by_phone(b1f1, 8)
    assert len(a.clients) == 8
    for cid in a.client_ids():
        phones = set(a.clients[cid].phone_id.tolist())
        assert len(phones) == 1
        assert a.client_tags[cid] in phones


def test_by_phone_picks_largest_phones(b1f1):
    a = partition_by_phone(b1f1, 4)
    counts = b1f1.phone_counts()
    chosen = sorted(counts[p] for p in a.client_tags.values())
    top4 = sorted(sorted(counts.values())[-4:])
    assert chosen == top4


def test_by_phone_disjoint(b1f1):
    a = partition_by_phone(b1f1, 8)
    ids = np.concatenate([c.row_ids for c in a.clients.values()])
    assert np.unique(ids).size == ids.size


def test_by_floor_full_partition_and_zero_entropy(b1):
    a = partition_by_floor(b1, clients_per_floor=4, seed=0)
    verify_partition(a, b1)
    assert len(a.clients) == 4 * len(b1.floor_values())
    for cid in a.client_ids():
        floors = np.unique(a.clients[cid].floor)
        assert floors.size == 1  # zero per-client floor-label entropy
        assert int(floors[0]) == a.client_tags[cid]


def test_by_floor_rejects_thin_floor(b1):
    with pytest.raises(ValueError, match="fewer than clients_per_floor"):
        partition_by_floor(b1, clients_per_floor=10 ** 6)


def test_uniform_full_partition_balanced(b1):
    a = partition_uniform(b1, 16, seed=5)
    verify_partition(a, b1)
    sizes = [len(c) for c in a.clients.values()]
    assert max(sizes) - min(sizes) <= 1


def test_uniform_seed_changes_shards(b1):
    a = partition_uniform(b1, 16, seed=1)
    b = partition_uniform(b1, 16, seed=2)
    same = all(
        np.array_equal(a.clients[c].row_ids, b.clients[c].row_ids) for c in a.client_ids()
    )
    assert not same


def test_pool_records_single_client(b1f1):
    a = pool_records(b1f1)
    assert a.axis == "pooled"
    assert a.client_ids() == [0]
    verify_partition(a, b1f1)


def test_pooled_view_round_trip(b1):
    a = partition_uniform(b1, 8, seed=0)
    pooled = a.pooled("all")
    assert np.array_equal(np.sort(pooled.row_ids), np.sort(b1.row_ids))


# ---------------------------------------------------------------------------
# Device scenario


def test_device_scenario_membership(b1f1, v1f1):
    scen = build_device_scenario(b1f1, 2, n_clients=8, rho=1.0, seed=1, validation=v1f1)
    assert scen.kind == "device"
    assert scen.target_phones == (2,)
    # Target shard is a member of the source federation (same rows).
    tgt_ids = np.concatenate([c.row_ids for c in scen.target.clients.values()])
    src_ids = np.concatenate([c.row_ids for c in scen.source.clients.values()])
    assert np.isin(tgt_ids, src_ids).all()
    # Holdout never overlaps anything trainable.
    assert np.intersect1d(_all_train_ids(scen), scen.holdout.row_ids).size == 0
    # With rho=1 the holdout is exactly the target phone's validation rows.
    assert set(scen.holdout.phone_id.tolist()) == {2}
    assert len(scen.holdout) == int((v1f1.phone_id == 2).sum())


def test_device_scenario_rho_shrinks_target(b1f1, v1f1):
    full = build_device_scenario(b1f1, 2, n_clients=8, rho=1.0, seed=1, validation=v1f1)
    half = build_device_scenario(b1f1, 2, n_clients=8, rho=0.5, seed=1, validation=v1f1)
    assert half.target.total_records() == round(0.5 * full.target.total_records())
    # Unsampled target rows move into the holdout, never into training.
    assert len(half.holdout) > len(full.holdout)
    assert np.intersect1d(_all_train_ids(half), half.holdout.row_ids).size == 0


def test_device_scenario_auto_pick_smallest(b1f1, v1f1):
    scen = build_device_scenario(b1f1, None, n_clients=8, rho=1.0, seed=1, validation=v1f1)
    counts = {p: len(c) for p, c in zip(scen.source.client_tags.values(), scen.source.clients.values())}
    assert scen.target_phones == (min(counts, key=lambda p: (counts[p], p)),)


def test_device_scenario_unknown_phone(b1f1, v1f1):
    with pytest.raises(ValueError, match="target phone"):
        build_device_scenario(b1f1, 99, n_clients=8, rho=1.0, seed=1, validation=v1f1)


# ---------------------------------------------------------------------------
# Time scenario


def test_time_scenario_disjoint_and_fixed_holdout(b1f1, v1f1):
    split = largest_gap_split_time(b1f1)
    holdout_ids = None
    target_sizes = {}
    for rho in (0.25, 0.5, 1.0):
        scen = build_time_scenario(b1f1, split, n_clients=8, rho=rho, seed=1, validation=v1f1)
        assert scen.kind == "time"
        src = np.concatenate([c.row_ids for c in scen.source.clients.values()])
        tgt = np.concatenate([c.row_ids for c in scen.target.clients.values()])
        assert np.intersect1d(src, tgt).size == 0
        assert np.intersect1d(np.concatenate([src, tgt]), scen.holdout.row_ids).size == 0
        # Source rows strictly before the split, target rows at/after it.
        assert (b1f1.timestamp[np.isin(b1f1.row_ids, src)] < split).all()
        assert (b1f1.timestamp[np.isin(b1f1.row_ids, tgt)] >= split).all()
        # Fixed evaluation set: the late validation rows, identical across rho.
        ids = set(scen.holdout.row_ids.tolist())
        if holdout_ids is None:
            holdout_ids = ids
            assert ids == set(v1f1.row_ids[v1f1.timestamp >= split].tolist())
        else:
            assert ids == holdout_ids
        target_sizes[rho] = scen.target.total_records()
    assert target_sizes[0.25] < target_sizes[0.5] < target_sizes[1.0]


def test_time_scenario_target_rows_nest_across_rho(b1f1, v1f1):
    split = largest_gap_split_time(b1f1)
    previous = None
    for rho in (0.25, 0.5, 1.0):
        scen = build_time_scenario(b1f1, split, n_clients=8, rho=rho, seed=1, validation=v1f1)
        ids = set(np.concatenate([c.row_ids for c in scen.target.clients.values()]).tolist())
        if previous is not None:
            assert previous < ids  # monotone data: more rho only adds rows
        previous = ids


def test_time_scenario_needs_material_after_split(b1f1):
    late = int(b1f1.timestamp.max()) + 1
    with pytest.raises(ValueError):
        build_time_scenario(b1f1, late, n_clients=8, rho=0.5, seed=1)
