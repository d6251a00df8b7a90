"""Classification metrics on confusion matrices, and a 2-component PCA for
inspecting embedding clouds.

Confusion matrices are ``C x C`` integer counts, rows = true class,
columns = predicted class. Metrics are computed from integer sums so
chance-level cases come out exactly.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateMarginals, EmptyMatrix, IoError, RankDeficient


class DegenerateMarginalsWarning(RuntimeWarning):
    pass


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _as_counts(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative counts")
    counts = cm.astype(np.int64)
    if not np.array_equal(counts, cm):
        raise ValueError("confusion matrix must hold integer counts")
    if counts.sum() == 0:
        raise EmptyMatrix("confusion matrix is empty")
    return counts


def balanced_accuracy(cm) -> float:
    """Mean recall over classes that occur in the ground truth."""
    cm = _as_counts(cm)
    support = cm.sum(axis=1)
    present = np.flatnonzero(support)
    recalls = [cm[k, k] / support[k] for k in present]
    return float(sum(recalls) / len(recalls))


def kappa_is_degenerate(cm) -> bool:
    cm = _as_counts(cm)
    n = int(cm.sum())
    chance = int(cm.sum(axis=1) @ cm.sum(axis=0))
    return chance == n * n


def cohens_kappa(cm, strict: bool = False) -> float:
    """Chance-corrected agreement ``(p_o - p_e) / (1 - p_e)``.

    When expected agreement is 1 (a single class in both truth and
    prediction) kappa is undefined: returns 0.0 with a
    :class:`DegenerateMarginalsWarning`, or raises if ``strict``.
    """
    cm = _as_counts(cm)
    n = int(cm.sum())
    # scaled by n^2: p_o -> n*trace, p_e -> sum(row*col)
    chance = int(cm.sum(axis=1) @ cm.sum(axis=0))
    agree = n * int(np.trace(cm))
    denom = n * n - chance
    if denom == 0:
        if strict:
            raise DegenerateMarginals("expected agreement is 1; kappa undefined")
        warnings.warn("kappa undefined for degenerate marginals; reporting 0.0",
                      DegenerateMarginalsWarning, stacklevel=2)
        return 0.0
    return (agree - chance) / denom


def f1_per_class(cm) -> np.ndarray:
    cm = _as_counts(cm)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    out = np.zeros(cm.shape[0])
    nz = denom > 0
    out[nz] = 2 * tp[nz] / denom[nz]
    return out


def weighted_f1(cm) -> float:
    """Per-class F1 averaged with weights proportional to true-class support."""
    cm = _as_counts(cm)
    support = cm.sum(axis=1)
    return float((support * f1_per_class(cm)).sum() / support.sum())


def summarize(cm) -> dict[str, float]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMarginalsWarning)
        kappa = cohens_kappa(cm)
    return {
        "balanced_accuracy": balanced_accuracy(cm),
        "cohens_kappa": kappa,
        "weighted_f1": weighted_f1(cm),
        "kappa_degenerate": float(kappa_is_degenerate(cm)),
    }


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaResult:
    points: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, dim), unit rows
    eigenvalues: np.ndarray  # (2,)
    explained: np.ndarray  # fraction of total variance per component
    mean: np.ndarray


def _power_iteration(S, v, tol, max_iter):
    v = v / np.linalg.norm(v)
    scale = max(np.abs(S).max(), np.finfo(float).tiny)
    for _ in range(max_iter):
        w = S @ v
        norm = np.linalg.norm(w)
        if norm <= 1e-14 * scale:
            return 0.0, v
        w = w / norm
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return float(v @ S @ v), v


def _sign_fix(v):
    big = np.abs(v) > 1e-12 * np.abs(v).max()
    first = np.flatnonzero(big)[0]
    return -v if v[first] < 0 else v


def pca2(embeddings, seed: int = 0, tol: float = 1e-10, max_iter: int = 10000) -> PcaResult:
    """Project onto the top two principal directions.

    Eigenvectors of the sample covariance come from power iteration with
    deflation from a seeded start. Each component is signed so its first
    nonzero loading is positive.
    """
    if len(embeddings) and not isinstance(embeddings, np.ndarray):
        X = np.stack([getattr(e, "values", e) for e in embeddings])
    else:
        X = np.asarray(embeddings, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ValueError("pca2 needs at least 3 points of dimension >= 2")
    mean = X.mean(axis=0)
    Xc = X - mean
    S = Xc.T @ Xc / (X.shape[0] - 1)
    total = float(np.trace(S))
    magnitude = np.abs(X).max()
    if magnitude == 0 or total <= (1e-12 * magnitude) ** 2:
        raise RankDeficient("embedding cloud has zero variance")

    rng = np.random.default_rng(seed)
    lam1, v1 = _power_iteration(S, rng.standard_normal(S.shape[0]), tol, max_iter)
    start = rng.standard_normal(S.shape[0])
    start -= (start @ v1) * v1
    lam2, v2 = _power_iteration(S - lam1 * np.outer(v1, v1), start, tol, max_iter)
    v2 -= (v2 @ v1) * v1
    v2 /= np.linalg.norm(v2)
    lam2 = float(v2 @ S @ v2) if lam2 != 0.0 else 0.0

    components = np.stack([_sign_fix(v1), _sign_fix(v2)])
    eig = np.array([lam1, lam2])
    return PcaResult(points=Xc @ components.T, components=components, eigenvalues=eig,
                     explained=eig / total, mean=mean)


PROJECTION_COLUMNS = ("segment_id", "patient_id", "label", "split", "pc1", "pc2")


def write_projection(path, rows: Sequence[tuple], points: np.ndarray) -> None:
    """Write one line per point: ids from ``rows`` (segment, patient, label, split)."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PROJECTION_COLUMNS)
            for (sid, pid, label, split), (a, b) in zip(rows, points):
                w.writerow([sid, pid, label, split, repr(float(a)), repr(float(b))])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def read_projection(path) -> list[dict]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            out = []
            for row in csv.DictReader(fh):
                out.append({
                    "segment_id": int(row["segment_id"]),
                    "patient_id": int(row["patient_id"]),
                    "label": int(row["label"]),
                    "split": row["split"],
                    "pc1": float(row["pc1"]),
                    "pc2": float(row["pc2"]),
                })
            return out
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
