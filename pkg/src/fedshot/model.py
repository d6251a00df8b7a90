"""Classifier head (ELU then linear), softmax cross-entropy gradients and the
flat parameter vectors exchanged during federation.

Two trainable configurations exist: the head alone over fixed embeddings, and
the reference encoder and head trained jointly from token features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embed import Embedding, EncoderParams
from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyBatch,
    IoError,
    LabelOutOfRange,
    LayoutMismatch,
    TruncatedFile,
)
from .nn import elu, elu_grad, log_softmax, uniform_init

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass
class ClassifierHead:
    weight: np.ndarray  # (dim, n_classes)
    bias: np.ndarray  # (n_classes,)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"head.bias": self.bias, "head.weight": self.weight}


def init_head(dim: int, n_classes: int, seed: int = 0) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    return ClassifierHead(
        weight=uniform_init(rng, dim, (dim, n_classes)),
        bias=uniform_init(rng, dim, (n_classes,)),
    )


class ParamVector:
    """Flat float64 parameter vector plus the layout of its named tensors."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Layout):
        self.values = np.asarray(values, dtype=np.float64).reshape(-1)
        self.layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in layout)
        total = sum(int(np.prod(s)) for _, s in self.layout)
        if total != self.values.size:
            raise LayoutMismatch(f"layout describes {total} values, vector holds {self.values.size}")

    def __len__(self):
        return self.values.size

    def __repr__(self):
        names = ", ".join(n for n, _ in self.layout)
        return f"ParamVector(n={self.values.size}, tensors=[{names}])"

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[offset : offset + size].reshape(shape)
            offset += size
        return out

    def select(self, prefix: str) -> "ParamVector":
        """Sub-vector holding only the tensors whose name starts with ``prefix``."""
        parts = [(n, t) for n, t in self.tensors().items() if n.startswith(prefix)]
        if not parts:
            raise LayoutMismatch(f"no tensors with prefix {prefix!r}")
        return ParamVector(np.concatenate([t.ravel() for _, t in parts]),
                           tuple((n, t.shape) for n, t in parts))


def check_layouts(*vectors: ParamVector) -> None:
    first = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != first:
            raise LayoutMismatch("parameter layouts differ")


def flatten(*parts) -> ParamVector:
    """Concatenate the tensors of heads/encoders, ordered by tensor name."""
    tensors: dict[str, np.ndarray] = {}
    for part in parts:
        for name, t in part.tensors().items():
            if name in tensors:
                raise LayoutMismatch(f"duplicate tensor {name}")
            tensors[name] = np.asarray(t, dtype=np.float64)
    names = sorted(tensors)
    values = np.concatenate([tensors[n].ravel() for n in names]) if names else np.zeros(0)
    return ParamVector(values, tuple((n, tensors[n].shape) for n in names))


def _require(tensors, names):
    missing = [n for n in names if n not in tensors]
    if missing:
        raise LayoutMismatch(f"parameter vector lacks tensors {missing}")


def unflatten_head(pv: ParamVector) -> ClassifierHead:
    t = pv.tensors()
    _require(t, ("head.weight", "head.bias"))
    w, b = t["head.weight"], t["head.bias"]
    if w.ndim != 2 or b.shape != (w.shape[1],):
        raise LayoutMismatch(f"inconsistent head shapes {w.shape}, {b.shape}")
    return ClassifierHead(weight=w.copy(), bias=b.copy())


def unflatten_encoder(pv: ParamVector) -> EncoderParams:
    t = pv.tensors()
    _require(t, ("encoder.w1", "encoder.b1", "encoder.w2", "encoder.b2"))
    enc = EncoderParams(w1=t["encoder.w1"].copy(), b1=t["encoder.b1"].copy(),
                        w2=t["encoder.w2"].copy(), b2=t["encoder.b2"].copy())
    if (enc.b1.shape != (enc.hidden,) or enc.w2.shape[0] != enc.hidden
            or enc.b2.shape != (enc.dim,)):
        raise LayoutMismatch("inconsistent encoder shapes")
    return enc


def unflatten(pv: ParamVector) -> tuple[EncoderParams | None, ClassifierHead | None]:
    names = {n for n, _ in pv.layout}
    encoder = unflatten_encoder(pv) if any(n.startswith("encoder.") for n in names) else None
    head = unflatten_head(pv) if any(n.startswith("head.") for n in names) else None
    if encoder is None and head is None:
        raise LayoutMismatch("parameter vector holds neither encoder nor head tensors")
    return encoder, head


def _as_matrix(x, dim: int) -> np.ndarray:
    if isinstance(x, Embedding):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise DimensionMismatch(f"head expects dimension {dim}, got {x.shape[-1]}")
    return x


def forward(head: ClassifierHead, emb) -> np.ndarray:
    """Logits ``elu(emb) @ W + b`` for one embedding or a batch of rows."""
    x = _as_matrix(emb, head.dim)
    return elu(x) @ head.weight + head.bias


def predict(head: ClassifierHead, X) -> np.ndarray:
    return np.argmax(forward(head, X), axis=-1)


def _check_labels(y, n_classes: int, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if n == 0 or y.size == 0:
        raise EmptyBatch("batch is empty")
    if y.shape != (n,):
        raise ValueError(f"{y.size} labels for {n} examples")
    if y.min() < 0 or y.max() >= n_classes:
        raise LabelOutOfRange(f"labels must lie in 0..{n_classes - 1}")
    return y


def _softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    return float(loss), dlogits / n


def loss_and_grad(head: ClassifierHead, X, y) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over ``(X, y)`` and its gradient.

    The embeddings are fixed inputs, so only the head receives gradient.
    """
    X = np.atleast_2d(_as_matrix(X, head.dim))
    y = _check_labels(y, head.n_classes, X.shape[0])
    act = elu(X)
    loss, dlogits = _softmax_xent(act @ head.weight + head.bias, y)
    grad = ClassifierHead(weight=act.T @ dlogits, bias=dlogits.sum(axis=0))
    return loss, flatten(grad)


@dataclass
class TokenBatch:
    """Token features for several segments, stored contiguously per segment."""

    features: np.ndarray  # (n_tokens, feature_dim)
    counts: np.ndarray  # tokens per segment
    labels: np.ndarray  # one per segment

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.counts.sum() != self.features.shape[0]:
            raise ValueError("token counts do not match feature rows")
        if self.counts.shape != self.labels.shape:
            raise ValueError("one label per segment required")
        if np.any(self.counts < 1):
            raise ValueError("every segment needs at least one token")
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)

    @classmethod
    def from_segments(cls, segments: Sequence[np.ndarray], labels) -> "TokenBatch":
        segments = [np.atleast_2d(s) for s in segments]
        if not segments:
            raise EmptyBatch("no segments")
        return cls(np.concatenate(segments), [s.shape[0] for s in segments], labels)

    def __len__(self):
        return self.labels.size

    def subset(self, idx) -> "TokenBatch":
        idx = np.asarray(idx, dtype=np.int64)
        rows = np.concatenate([np.arange(self.starts[i], self.starts[i] + self.counts[i])
                               for i in idx])
        return TokenBatch(self.features[rows], self.counts[idx], self.labels[idx])


def pool(token_values: np.ndarray, batch: TokenBatch) -> np.ndarray:
    """Mean over each segment's token rows."""
    return np.add.reduceat(token_values, batch.starts, axis=0) / batch.counts[:, None]


def joint_forward(encoder: EncoderParams, head: ClassifierHead, batch: TokenBatch) -> np.ndarray:
    hidden = elu(batch.features @ encoder.w1 + encoder.b1)
    emb = pool(hidden @ encoder.w2 + encoder.b2, batch)
    return forward(head, emb)


def joint_loss_and_grad(encoder: EncoderParams, head: ClassifierHead,
                        batch: TokenBatch) -> tuple[float, ParamVector]:
    """Loss and gradient for encoder and head trained together."""
    if len(batch) == 0:
        raise EmptyBatch("batch is empty")
    if batch.features.shape[1] != encoder.feature_dim:
        raise DimensionMismatch(
            f"encoder expects {encoder.feature_dim} features, got {batch.features.shape[1]}")
    y = _check_labels(batch.labels, head.n_classes, len(batch))
    pre = batch.features @ encoder.w1 + encoder.b1
    hidden = elu(pre)
    emb = pool(hidden @ encoder.w2 + encoder.b2, batch)
    act = elu(emb)
    loss, dlogits = _softmax_xent(act @ head.weight + head.bias, y)

    g_head = ClassifierHead(weight=act.T @ dlogits, bias=dlogits.sum(axis=0))
    d_emb = (dlogits @ head.weight.T) * elu_grad(emb)
    d_tok = np.repeat(d_emb / batch.counts[:, None], batch.counts, axis=0)
    d_pre = (d_tok @ encoder.w2.T) * elu_grad(pre)
    g_enc = EncoderParams(w1=batch.features.T @ d_pre, b1=d_pre.sum(axis=0),
                          w2=hidden.T @ d_tok, b2=d_tok.sum(axis=0))
    return loss, flatten(g_enc, g_head)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    check_layouts(params, grad)
    return params.with_values(params.values - lr * grad.values)


# ---------------------------------------------------------------------------
# FPRM checkpoint format (little-endian)
#   b"FPRM", version u16, tensor count u16,
#   per tensor: name length u8, name, ndim u8, dims u32...
#   then every tensor's f32 values in declared order
# ---------------------------------------------------------------------------

FPRM_MAGIC = b"FPRM"
FPRM_VERSION = 1


def params_to_bytes(pv: ParamVector) -> bytes:
    parts = [struct.pack("<4sHH", FPRM_MAGIC, FPRM_VERSION, len(pv.layout))]
    for name, shape in pv.layout:
        raw = name.encode("utf-8")
        if len(raw) > 255:
            raise ValueError(f"tensor name too long: {name}")
        parts.append(struct.pack("<B", len(raw)) + raw)
        parts.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
    parts.append(pv.values.astype("<f4").tobytes())
    return b"".join(parts)


def params_from_bytes(blob: bytes, source="<bytes>") -> ParamVector:
    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise TruncatedFile(f"{source}: truncated checkpoint")
        return struct.unpack_from(fmt, blob, pos), pos + size

    (magic, version, n_tensors), pos = take("<4sHH", 0)
    if magic != FPRM_MAGIC:
        raise BadMagic(f"{source}: bad magic {magic!r}, expected {FPRM_MAGIC!r}")
    if version != FPRM_VERSION:
        raise BadMagic(f"{source}: unsupported version {version}")
    layout = []
    for _ in range(n_tensors):
        (name_len,), pos = take("<B", pos)
        if pos + name_len > len(blob):
            raise TruncatedFile(f"{source}: truncated checkpoint")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,), pos = take("<B", pos)
        dims, pos = take(f"<{ndim}I", pos)
        layout.append((name, tuple(dims)))
    total = sum(int(np.prod(s)) for _, s in layout)
    if len(blob) - pos < 4 * total:
        raise TruncatedFile(f"{source}: truncated checkpoint values")
    if len(blob) - pos > 4 * total:
        raise LayoutMismatch(f"{source}: trailing bytes after declared tensors")
    values = np.frombuffer(blob, dtype="<f4", count=total, offset=pos).astype(np.float64)
    return ParamVector(values, tuple(layout))


def save_params(path, pv: ParamVector) -> None:
    path = Path(path)
    try:
        path.write_bytes(params_to_bytes(pv))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def load_params(path) -> ParamVector:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    return params_from_bytes(blob, source=path)
