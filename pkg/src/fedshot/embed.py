"""Segment embeddings.

Tokens are reduced to per-channel log band powers, passed through a small
ELU MLP (the reference encoder) and mean-pooled into one vector per segment.
Precomputed embeddings from an external encoder can be loaded from FEMB files
instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadMagic, DimensionMismatch, EmptyTokenSequence, IoError, TruncatedFile
from .nn import elu, uniform_init
from .signal import TARGET_RATE, Token

BANDS = ((0.5, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 70.0))
POWER_FLOOR = 1e-12
DEFAULT_DIM = 256
DEFAULT_HIDDEN = 128


@dataclass
class Embedding:
    values: np.ndarray
    segment_id: int
    label: int
    patient_id: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class EncoderParams:
    """Weights of the reference encoder ``feature_dim -> hidden -> dim``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def dim(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"encoder.b1": self.b1, "encoder.b2": self.b2,
                "encoder.w1": self.w1, "encoder.w2": self.w2}


def init_encoder(feature_dim: int, hidden: int = DEFAULT_HIDDEN, dim: int = DEFAULT_DIM,
                 seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    return EncoderParams(
        w1=uniform_init(rng, feature_dim, (feature_dim, hidden)),
        b1=uniform_init(rng, feature_dim, (hidden,)),
        w2=uniform_init(rng, hidden, (hidden, dim)),
        b2=uniform_init(rng, hidden, (dim,)),
    )


def band_bins(n: int, rate: float = TARGET_RATE) -> list[np.ndarray]:
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    return [np.flatnonzero((freqs >= lo) & (freqs < hi)) for lo, hi in BANDS]


def featurize(token: Token) -> np.ndarray:
    """Log band power per channel, ``len(BANDS) * channel_count`` values.

    One-sided periodogram scaled so a unit-amplitude sine carries power 0.5;
    each band sums the bins in ``[lo, hi)``.
    """
    x = np.asarray(token.data, dtype=np.float64)
    n = x.shape[1]
    spectrum = np.fft.rfft(x, axis=1)
    power = 2.0 * (spectrum.real**2 + spectrum.imag**2) / (n * n)
    bands = np.stack([power[:, idx].sum(axis=1) for idx in band_bins(n, token.sample_rate)],
                     axis=1)
    return np.log(np.maximum(bands, POWER_FLOOR)).reshape(-1)


def token_features(tokens: Sequence[Token]) -> np.ndarray:
    """Stack featurized tokens into a ``(n_tokens, feature_dim)`` matrix."""
    if len(tokens) == 0:
        raise EmptyTokenSequence("no tokens to featurize")
    return np.stack([featurize(t) for t in tokens])


def represent(features: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Per-token MLP output, ``(n_tokens, dim)``."""
    features = np.atleast_2d(features)
    if features.shape[1] != params.feature_dim:
        raise DimensionMismatch(
            f"encoder expects {params.feature_dim} features, got {features.shape[1]}"
        )
    hidden = elu(features @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def encode_features(features: np.ndarray, params: EncoderParams) -> np.ndarray:
    features = np.atleast_2d(features)
    if features.shape[0] == 0:
        raise EmptyTokenSequence("no tokens to encode")
    return represent(features, params).mean(axis=0)


def encode(tokens: Sequence[Token], params: EncoderParams, *, segment_id: int = 0,
           label: int = 0, patient_id: int = 0) -> Embedding:
    if len(tokens) == 0:
        raise EmptyTokenSequence("no tokens to encode")
    values = encode_features(token_features(tokens), params)
    return Embedding(values, segment_id=segment_id, label=label, patient_id=patient_id)


def stack(embeddings: Sequence[Embedding]) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix and label vector for a list of embeddings."""
    if not embeddings:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed embedding dimensions {sorted(dims)}")
    X = np.stack([e.values for e in embeddings])
    y = np.array([e.label for e in embeddings], dtype=np.int64)
    return X, y


# ---------------------------------------------------------------------------
# FEMB file format (little-endian)
#   header: b"FEMB", version u16, dim u32, count u32
#   record: segment_id u64, patient_id u32, label u8, dim x f32
# ---------------------------------------------------------------------------

FEMB_MAGIC = b"FEMB"
FEMB_VERSION = 1
_FEMB_HEADER = struct.Struct("<4sHII")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("segment_id", "<u8"), ("patient_id", "<u4"), ("label", "u1"),
                     ("values", "<f4", (dim,))])


def write_embeddings(path, embeddings: Iterable[Embedding]) -> int:
    embeddings = list(embeddings)
    dims = {e.dim for e in embeddings}
    if len(dims) > 1:
        raise DimensionMismatch(f"mixed embedding dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0
    records = np.zeros(len(embeddings), dtype=_record_dtype(dim))
    for i, e in enumerate(embeddings):
        records[i] = (e.segment_id, e.patient_id, e.label, e.values)
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_FEMB_HEADER.pack(FEMB_MAGIC, FEMB_VERSION, dim, len(embeddings)))
            fh.write(records.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc
    return len(embeddings)


def load_embeddings(path, expected_dim: int | None = None) -> dict[int, Embedding]:
    """Read a FEMB file into a ``segment_id -> Embedding`` mapping (file order)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    if len(blob) < _FEMB_HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    magic, version, dim, count = _FEMB_HEADER.unpack_from(blob)
    if magic != FEMB_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}, expected {FEMB_MAGIC!r}")
    if version != FEMB_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    if expected_dim is not None and count and dim != expected_dim:
        raise DimensionMismatch(f"{path}: dimension {dim}, expected {expected_dim}")
    dtype = _record_dtype(dim)
    body = len(blob) - _FEMB_HEADER.size
    if body < count * dtype.itemsize:
        raise TruncatedFile(f"{path}: {count} records declared, {body} payload bytes")
    if body > count * dtype.itemsize:
        raise DimensionMismatch(f"{path}: payload size inconsistent with dimension {dim}")
    records = np.frombuffer(blob, dtype=dtype, count=count, offset=_FEMB_HEADER.size)
    out: dict[int, Embedding] = {}
    for rec in records:
        sid = int(rec["segment_id"])
        out[sid] = Embedding(rec["values"].astype(np.float64), segment_id=sid,
                             label=int(rec["label"]), patient_id=int(rec["patient_id"]))
    return out
