import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedshot import episode
from fedshot.embed import Embedding
from fedshot.episode import DEFAULT_TYPE_MAP
from fedshot.errors import (
    InfeasibleAssignment,
    InsufficientSegments,
    InsufficientSeizureSegments,
    TooFewPatients,
)


def _segments(patient, labels, start=0):
    return [Embedding(np.zeros(2), segment_id=start + i, label=lab, patient_id=patient)
            for i, lab in enumerate(labels)]


def _pool(n_per_type=12, seed=0):
    """Patients with one or two seizure types each, plus background."""
    r = np.random.default_rng(seed)
    out, pid = {}, 100
    for t in (1, 2, 3, 4):
        for _ in range(n_per_type):
            types = {t, 5}
            if r.random() < 0.3:
                types.add(int(r.choice([1, 2, 3])))
            out[pid] = types
            pid += 1
    return out


def _check_task(task, patient):
    support_seizures = sum(e.label != 5 for e in task.support)
    assert len(task.support) == 5 and support_seizures == 4
    assert len(task.validation) == 10 and len(task.query) == 20
    ids = [e.segment_id for e in task.support + task.validation + task.query]
    assert len(set(ids)) == 35
    assert all(e.patient_id == patient for e in task.support + task.validation + task.query)


# E1 ----------------------------------------------------------------------------

def test_partition_e1_sizes():
    a = episode.partition_e1(range(200), 4, seed=3)
    assert a.sizes() == {1: 50, 2: 50, 3: 50, 4: 50}
    b = episode.partition_e1(range(5), 4)
    assert sorted(b.sizes().values()) == [1, 1, 1, 2]


def test_partition_e1_deterministic():
    a = episode.partition_e1(range(37), 4, seed=8)
    b = episode.partition_e1(reversed(range(37)), 4, seed=8)
    assert a.clients == b.clients


def test_partition_e1_too_few():
    with pytest.raises(TooFewPatients):
        episode.partition_e1(range(3), 4)


@given(st.sets(st.integers(0, 10_000), min_size=4, max_size=300), st.integers(1, 4),
       st.integers(0, 100))
def test_partition_e1_disjoint_and_balanced(patients, n_clients, seed):
    a = episode.partition_e1(patients, n_clients, seed)
    flat = [p for ps in a.clients.values() for p in ps]
    assert sorted(flat) == sorted(patients)
    sizes = a.sizes().values()
    assert max(sizes) - min(sizes) <= 1


# E2 ----------------------------------------------------------------------------

def test_partition_e2_table_counts():
    a = episode.partition_e2(_pool(), seed=0, counts={1: 7, 2: 7, 3: 6, 4: 8})
    assert a.sizes() == {1: 7, 2: 7, 3: 6, 4: 8}


@given(st.integers(0, 500))
def test_partition_e2_respects_type_map(seed):
    pool = _pool(seed=seed)
    a = episode.partition_e2(pool, seed=seed)
    flat = [p for ps in a.clients.values() for p in ps]
    assert len(flat) == len(set(flat))
    for cid, patients in a.clients.items():
        assert 5 <= len(patients) <= 8
        allowed = set(DEFAULT_TYPE_MAP[cid])
        hosted = set()
        for p in patients:
            assert pool[p] - {5} <= allowed
            hosted |= pool[p]
        assert allowed - {5} <= hosted


def test_partition_e2_unconstrained_map():
    everything = {c: (0, 1, 2, 3, 4, 5) for c in (1, 2, 3, 4)}
    pool = {p: {p % 5, 5} for p in range(40)}
    a = episode.partition_e2(pool, everything, seed=2, per_client_range=(5, 8))
    flat = [p for ps in a.clients.values() for p in ps]
    assert len(flat) == len(set(flat))
    assert all(5 <= n <= 8 for n in a.sizes().values())


def test_partition_e2_missing_type_four():
    pool = {p: t for p, t in _pool().items() if 4 not in t}
    with pytest.raises(InfeasibleAssignment):
        episode.partition_e2(pool, seed=0)


def test_partition_e2_pool_too_small():
    pool = dict(list(_pool(n_per_type=2).items()))
    with pytest.raises(InfeasibleAssignment):
        episode.partition_e2(pool, seed=0, counts={1: 8, 2: 8, 3: 8, 4: 8})


def test_partition_e2_deterministic():
    pool = _pool(seed=4)
    assert episode.partition_e2(pool, seed=9).clients == episode.partition_e2(pool,
                                                                              seed=9).clients


# tasks ---------------------------------------------------------------------------

def test_minimal_feasible_task():
    segs = _segments(3, [1] * 4 + [5] * 31)
    task = episode.build_task(segs, seed=0)
    _check_task(task, 3)
    assert sorted(e.segment_id for e in task.support if e.label != 5) == [0, 1, 2, 3]
    task.validate()


def test_too_few_seizure_segments():
    with pytest.raises(InsufficientSeizureSegments):
        episode.build_task(_segments(3, [1] * 3 + [5] * 40), seed=0)


def test_too_few_segments_or_background():
    with pytest.raises(InsufficientSegments):
        episode.build_task(_segments(3, [1] * 4 + [5] * 30), seed=0)
    with pytest.raises(InsufficientSegments):
        episode.build_task(_segments(3, [2] * 40), seed=0)
    with pytest.raises(InsufficientSegments):
        episode.build_task([], seed=0)


def test_thousand_seeded_draws():
    r = np.random.default_rng(0)
    labels = list(r.choice([0, 2, 3], 14)) + [5] * 30
    segs = _segments(9, labels, start=1000)
    for seed in range(1000):
        _check_task(episode.build_task(segs, seed), 9)


def test_build_task_deterministic_and_order_free():
    segs = _segments(4, [2] * 10 + [5] * 30)
    a = episode.build_task(segs, seed=5)
    b = episode.build_task(list(reversed(segs)), seed=5)
    for split in ("support", "validation", "query"):
        assert ([e.segment_id for e in a.splits()[split]]
                == [e.segment_id for e in b.splits()[split]])


def test_task_manifest_round_trip(tmp_path):
    assignment = episode.ClientAssignment({1: [10, 11], 2: [12]})
    tasks = {p: episode.build_task(_segments(p, [1] * 6 + [5] * 30, start=p * 100), seed=1)
             for p in (10, 11, 12)}
    episode.write_task_manifest(tmp_path / "t.tsv", assignment, tasks)
    back, splits = episode.read_task_manifest(tmp_path / "t.tsv")
    assert back.clients == assignment.clients
    for p, task in tasks.items():
        assert splits[p]["query"] == [e.segment_id for e in task.query]
    header = (tmp_path / "t.tsv").read_text().splitlines()[0].split("\t")
    assert header == list(episode.MANIFEST_COLUMNS)


def test_assignment_rejects_overlap():
    with pytest.raises(ValueError):
        episode.ClientAssignment({1: [1, 2], 2: [2]})
