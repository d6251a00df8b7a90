"""Patient-level partitioning across clients and per-patient few-shot tasks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embed import Embedding
from .errors import (
    InfeasibleAssignment,
    InsufficientSegments,
    InsufficientSeizureSegments,
    IoError,
    TooFewPatients,
)
from .signal import BACKGROUND

SUPPORT_SEIZURE = 4
SUPPORT_BACKGROUND = 1
N_VALIDATION = 10
N_QUERY = 20
MIN_SEGMENTS = SUPPORT_SEIZURE + SUPPORT_BACKGROUND + N_VALIDATION + N_QUERY

# client id -> event classes hosted there (5 = background)
DEFAULT_TYPE_MAP = {1: (1, 3, 5), 2: (1, 2, 5), 3: (2, 3, 4), 4: (2, 3, 5)}
DEFAULT_PATIENT_COUNTS = {1: 7, 2: 7, 3: 6, 4: 8}


@dataclass
class ClientAssignment:
    clients: dict[int, list[int]]

    def __post_init__(self):
        seen: dict[int, int] = {}
        for cid, patients in self.clients.items():
            for p in patients:
                if p in seen:
                    raise ValueError(f"patient {p} assigned to clients {seen[p]} and {cid}")
                seen[p] = cid
        self._owner = seen

    def client_of(self, patient_id: int) -> int:
        return self._owner[patient_id]

    def sizes(self) -> dict[int, int]:
        return {cid: len(p) for cid, p in self.clients.items()}


def partition_e1(patients: Iterable[int], n_clients: int = 4, seed: int = 0) -> ClientAssignment:
    """Seeded shuffle, then deal patients round-robin to clients ``1..n``."""
    pool = sorted(set(patients))
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if len(pool) < n_clients:
        raise TooFewPatients(f"{len(pool)} patients cannot cover {n_clients} clients")
    order = np.random.default_rng(seed).permutation(len(pool))
    shuffled = [pool[i] for i in order]
    return ClientAssignment({k + 1: shuffled[k::n_clients] for k in range(n_clients)})


def partition_e2(
    patients_with_types: Mapping[int, Iterable[int]],
    type_map: Mapping[int, Iterable[int]] | None = None,
    seed: int = 0,
    per_client_range: tuple[int, int] = (5, 8),
    counts: Mapping[int, int] | None = None,
) -> ClientAssignment:
    """Assign patients to clients under a per-client allowed-class map.

    A patient fits a client when all of its seizure classes are allowed
    there. Every seizure class a client allows must be hosted by at least one
    of its patients. Client sizes come from ``counts`` or, when omitted, are
    drawn uniformly from ``per_client_range``.

    Assignment is greedy: first one patient per (client, class) pair, scarcest
    pairs first, then fill-up preferring patients that fit the fewest clients.
    """
    type_map = {int(c): frozenset(t) for c, t in (type_map or DEFAULT_TYPE_MAP).items()}
    lo, hi = per_client_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid per-client range {per_client_range}")
    clients = sorted(type_map)
    rng = np.random.default_rng(seed)
    if counts is None:
        counts = {c: int(rng.integers(lo, hi + 1)) for c in clients}
    counts = {int(c): int(n) for c, n in counts.items()}
    for c in clients:
        if not lo <= counts.get(c, 0) <= hi:
            raise ValueError(f"client {c} size {counts.get(c)} outside range {per_client_range}")

    types = {int(p): frozenset(t) - {BACKGROUND} for p, t in patients_with_types.items()}
    pool = sorted(p for p, t in types.items() if t)
    rank = {p: i for i, p in enumerate(pool[i] for i in rng.permutation(len(pool)))}
    fits = {p: [c for c in clients if types[p] <= type_map[c]] for p in pool}
    assigned: dict[int, list[int]] = {c: [] for c in clients}
    taken: set[int] = set()

    def candidates(c, needed=None):
        out = [p for p in pool if p not in taken and c in fits[p]
               and (needed is None or needed in types[p])]
        return sorted(out, key=lambda p: (len(fits[p]), rank[p]))

    pairs = [(c, t) for c in clients for t in sorted(type_map[c] - {BACKGROUND})]
    pairs.sort(key=lambda ct: (len(candidates(*ct)), ct))
    for c, t in pairs:
        if any(t in types[p] for p in assigned[c]):
            continue
        cands = candidates(c, t)
        if not cands:
            raise InfeasibleAssignment(f"no unassigned patient with class {t} fits client {c}")
        if len(assigned[c]) >= counts[c]:
            raise InfeasibleAssignment(f"client {c} cannot host all of its classes in "
                                       f"{counts[c]} patients")
        assigned[c].append(cands[0])
        taken.add(cands[0])

    for c in clients:
        while len(assigned[c]) < counts[c]:
            cands = candidates(c)
            if not cands:
                raise InfeasibleAssignment(
                    f"client {c} needs {counts[c]} patients, only {len(assigned[c])} fit")
            assigned[c].append(cands[0])
            taken.add(cands[0])
    return ClientAssignment({c: sorted(assigned[c]) for c in clients})


@dataclass
class FewShotTask:
    patient_id: int
    support: list[Embedding]
    validation: list[Embedding]
    query: list[Embedding]

    def validate(self) -> None:
        seizures = sum(e.label != BACKGROUND for e in self.support)
        if len(self.support) != SUPPORT_SEIZURE + SUPPORT_BACKGROUND or seizures != SUPPORT_SEIZURE:
            raise ValueError("support must hold 4 seizure and 1 background segment")
        if len(self.validation) != N_VALIDATION or len(self.query) != N_QUERY:
            raise ValueError("validation/query sizes must be 10/20")
        ids = [e.segment_id for e in self.support + self.validation + self.query]
        if len(set(ids)) != len(ids):
            raise ValueError("segment reused across splits")
        if any(e.patient_id != self.patient_id
               for e in self.support + self.validation + self.query):
            raise ValueError("task mixes patients")

    def splits(self) -> dict[str, list[Embedding]]:
        return {"support": self.support, "validation": self.validation, "query": self.query}


def build_task(patient_segments: Sequence[Embedding], seed: int = 0) -> FewShotTask:
    """Draw support (4 seizure + 1 background), validation (10) and query (20).

    Sampling is without replacement from a generator seeded by
    ``(seed, patient_id)``; validation and query come uniformly from what the
    support set leaves, so they keep the patient's own class balance.
    """
    if not patient_segments:
        raise InsufficientSegments("patient has no segments")
    patient = patient_segments[0].patient_id
    if any(e.patient_id != patient for e in patient_segments):
        raise ValueError("build_task received segments from several patients")
    segs = sorted(patient_segments, key=lambda e: e.segment_id)
    if len({e.segment_id for e in segs}) != len(segs):
        raise ValueError("duplicate segment ids")
    seizure = [i for i, e in enumerate(segs) if e.label != BACKGROUND]
    background = [i for i, e in enumerate(segs) if e.label == BACKGROUND]
    if len(seizure) < SUPPORT_SEIZURE:
        raise InsufficientSeizureSegments(
            f"patient {patient} has {len(seizure)} seizure segments, needs {SUPPORT_SEIZURE}")
    if len(background) < SUPPORT_BACKGROUND:
        raise InsufficientSegments(f"patient {patient} has no background segment")
    if len(segs) < MIN_SEGMENTS:
        raise InsufficientSegments(
            f"patient {patient} has {len(segs)} segments, needs {MIN_SEGMENTS}")

    rng = np.random.default_rng([seed, patient])
    chosen = [seizure[i] for i in rng.choice(len(seizure), SUPPORT_SEIZURE, replace=False)]
    chosen += [background[i] for i in rng.choice(len(background), SUPPORT_BACKGROUND,
                                                 replace=False)]
    used = set(chosen)
    rest = [i for i in range(len(segs)) if i not in used]
    picks = rng.permutation(len(rest))[: N_VALIDATION + N_QUERY]
    val = [segs[rest[i]] for i in picks[:N_VALIDATION]]
    query = [segs[rest[i]] for i in picks[N_VALIDATION:]]
    return FewShotTask(patient, [segs[i] for i in chosen], val, query)


def patient_types(embeddings: Iterable[Embedding]) -> dict[int, set[int]]:
    """Classes observed per patient."""
    out: dict[int, set[int]] = {}
    for e in embeddings:
        out.setdefault(e.patient_id, set()).add(e.label)
    return out


MANIFEST_COLUMNS = ("client_id", "patient_id", "support", "validation", "query")


def write_task_manifest(path, assignment: ClientAssignment,
                        tasks: Mapping[int, FewShotTask] | None = None) -> None:
    """One row per patient; split columns hold space-separated segment ids."""
    path = Path(path)
    tasks = tasks or {}
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for cid in sorted(assignment.clients):
                for pid in assignment.clients[cid]:
                    task = tasks.get(pid)
                    cols = ["", "", ""] if task is None else [
                        " ".join(str(e.segment_id) for e in split)
                        for split in (task.support, task.validation, task.query)
                    ]
                    w.writerow([cid, pid, *cols])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def read_task_manifest(path) -> tuple[ClientAssignment, dict[int, dict[str, list[int]]]]:
    path = Path(path)
    clients: dict[int, list[int]] = {}
    splits: dict[int, dict[str, list[int]]] = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                cid, pid = int(row["client_id"]), int(row["patient_id"])
                clients.setdefault(cid, []).append(pid)
                splits[pid] = {k: [int(s) for s in row[k].split()]
                               for k in ("support", "validation", "query")}
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    return ClientAssignment(clients), splits
