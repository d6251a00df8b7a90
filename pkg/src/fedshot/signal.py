"""Raw EEG preprocessing: bipolar montage, 200 Hz resampling, percentile
normalization and fixed-length overlapping tokenization.

Also home of the FSEG segment file format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    BadMagic,
    EmptyInput,
    EmptySpec,
    IoError,
    MissingChannel,
    TooShort,
    TruncatedFile,
)

TARGET_RATE = 200.0
N_CLASSES = 6
BACKGROUND = 5
CLASS_NAMES = ("spsw", "gped", "pled", "eyem", "artf", "bckg")
NORM_EPS = 1e-8

# Standard 10-20 electrode set, in the order used by the synthetic generator.
DEFAULT_CHANNELS = (
    "FP1", "FP2", "F7", "F3", "FZ", "F4", "F8",
    "T3", "C3", "CZ", "C4", "T4",
    "T5", "P3", "PZ", "P4", "T6",
    "O1", "O2", "A1", "A2",
)

# Longitudinal bipolar ("double banana") chains.
DEFAULT_PAIRS = (
    ("FP1", "F7"), ("F7", "T3"), ("T3", "T5"), ("T5", "O1"),
    ("FP2", "F8"), ("F8", "T4"), ("T4", "T6"), ("T6", "O2"),
    ("FP1", "F3"), ("F3", "C3"), ("C3", "P3"), ("P3", "O1"),
    ("FP2", "F4"), ("F4", "C4"), ("C4", "P4"), ("P4", "O2"),
    ("FZ", "CZ"), ("CZ", "PZ"),
)


@dataclass
class EegRecording:
    """One labeled multi-channel EEG segment.

    ``data`` has shape ``(n_channels, n_samples)``.
    """

    patient_id: int
    channels: tuple[str, ...]
    sample_rate: float
    data: np.ndarray
    label: int
    segment_id: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("data must be 2-d (channels, samples)")
        if self.data.shape[0] != len(self.channels):
            raise ValueError(
                f"{len(self.channels)} channel names for {self.data.shape[0]} data rows"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("recording contains non-finite samples")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if int(self.label) not in range(N_CLASSES):
            raise ValueError(f"label must be in 0..{N_CLASSES - 1}, got {self.label}")
        self.label = int(self.label)

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class MontageSpec:
    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        pairs = tuple((str(a), str(c)) for a, c in self.pairs)
        for anode, cathode in pairs:
            if anode == cathode:
                raise ValueError(f"montage pair references {anode!r} twice")
        object.__setattr__(self, "pairs", pairs)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f"{a}-{c}" for a, c in self.pairs)


DEFAULT_MONTAGE = MontageSpec(DEFAULT_PAIRS)


@dataclass
class Token:
    """Time-aligned window across all channels, shape ``(channels, window)``."""

    data: np.ndarray
    window_index: int
    sample_rate: float = TARGET_RATE
    channel_names: tuple[str, ...] = field(default=())

    @property
    def channel_count(self) -> int:
        return self.data.shape[0]


def apply_montage(rec: EegRecording, spec: MontageSpec) -> EegRecording:
    if not spec.pairs:
        raise EmptySpec("montage has no channel pairs")
    index = {name: i for i, name in enumerate(rec.channels)}
    rows = []
    for anode, cathode in spec.pairs:
        for name in (anode, cathode):
            if name not in index:
                raise MissingChannel(name)
        rows.append(rec.data[index[anode]] - rec.data[index[cathode]])
    return EegRecording(
        patient_id=rec.patient_id,
        channels=spec.names,
        sample_rate=rec.sample_rate,
        data=np.stack(rows),
        label=rec.label,
        segment_id=rec.segment_id,
    )


def resampled_length(n: int, src_rate: float, dst_rate: float) -> int:
    return max(1, int(math.floor(n * dst_rate / src_rate + 0.5)))


def resample_linear(samples, src_rate: float, dst_rate: float) -> np.ndarray:
    """Linearly interpolate a 1-d signal onto a new sample grid.

    Output sample ``i`` sits at time ``i / dst_rate``. Times past the last
    source sample take the final source value.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("cannot resample an empty signal")
    if not (src_rate > 0 and dst_rate > 0):
        raise ValueError("sample rates must be positive")
    if src_rate == dst_rate:
        return x.copy()
    n_out = resampled_length(x.size, src_rate, dst_rate)
    positions = np.arange(n_out) * float(src_rate) / float(dst_rate)
    return np.interp(positions, np.arange(x.size, dtype=np.float64), x)


def normalize_percentile(samples, eps: float = NORM_EPS) -> np.ndarray:
    """Scale by the 95th percentile of absolute amplitude (linear interpolation)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("cannot normalize an empty signal")
    scale = np.percentile(np.abs(x), 95.0)
    return x / max(scale, eps)


def window_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def tokenize(rec: EegRecording, window_s: float = 5.0, hop_s: float = 2.5) -> list[Token]:
    if rec.sample_rate != TARGET_RATE:
        raise ValueError(f"tokenize expects {TARGET_RATE:g} Hz input, got {rec.sample_rate:g}")
    if not window_s > 0:
        raise ValueError("window_s must be positive")
    if not 0 < hop_s <= window_s:
        raise ValueError("hop_s must satisfy 0 < hop_s <= window_s")
    window = int(round(window_s * TARGET_RATE))
    hop = int(round(hop_s * TARGET_RATE))
    count = window_count(rec.n_samples, window, hop)
    if count == 0:
        raise TooShort(
            f"segment of {rec.duration:.3f} s is shorter than the {window_s:g} s window"
        )
    return [
        Token(
            data=rec.data[:, k * hop : k * hop + window].copy(),
            window_index=k,
            sample_rate=TARGET_RATE,
            channel_names=rec.channels,
        )
        for k in range(count)
    ]


def preprocess(rec: EegRecording, montage: MontageSpec = DEFAULT_MONTAGE) -> EegRecording:
    """Montage, resample to 200 Hz and normalize every channel."""
    bipolar = apply_montage(rec, montage)
    rows = [
        normalize_percentile(resample_linear(ch, bipolar.sample_rate, TARGET_RATE))
        for ch in bipolar.data
    ]
    return EegRecording(
        patient_id=bipolar.patient_id,
        channels=bipolar.channels,
        sample_rate=TARGET_RATE,
        data=np.stack(rows),
        label=bipolar.label,
        segment_id=bipolar.segment_id,
    )


# ---------------------------------------------------------------------------
# FSEG file format (little-endian)
#   header: b"FSEG", version u16, record count u32
#   record: patient_id u32, label u8, channel_count u16, sample_rate f32,
#           samples_per_channel u32, channel-major f32 samples
# ---------------------------------------------------------------------------

FSEG_MAGIC = b"FSEG"
FSEG_VERSION = 1
_FSEG_HEADER = struct.Struct("<4sHI")
_FSEG_RECORD = struct.Struct("<IBHfI")


def _resolve_channels(count: int, channels: Sequence[str] | None) -> tuple[str, ...]:
    if channels is not None and len(channels) == count:
        return tuple(channels)
    if count == len(DEFAULT_CHANNELS):
        return DEFAULT_CHANNELS
    return tuple(f"CH{i}" for i in range(count))


def write_fseg(path, recordings: Iterable[EegRecording]) -> int:
    """Write recordings to ``path``; returns the number written.

    Accepts any iterable, so generators stream without holding every
    recording in memory.
    """
    path = Path(path)
    try:
        fh = open(path, "wb")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc
    count = 0
    with fh:
        fh.write(_FSEG_HEADER.pack(FSEG_MAGIC, FSEG_VERSION, 0))
        for rec in recordings:
            fh.write(
                _FSEG_RECORD.pack(
                    int(rec.patient_id),
                    rec.label,
                    rec.data.shape[0],
                    rec.sample_rate,
                    rec.data.shape[1],
                )
            )
            fh.write(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())
            count += 1
        fh.seek(0)
        fh.write(_FSEG_HEADER.pack(FSEG_MAGIC, FSEG_VERSION, count))
    return count


def _read_exact(fh, n: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"{path}: expected {n} bytes, got {len(buf)}")
    return buf


def fseg_count(path) -> int:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic, version, count = _FSEG_HEADER.unpack(_read_exact(fh, _FSEG_HEADER.size, path))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    _check_header(path, magic, version, FSEG_MAGIC, FSEG_VERSION)
    return count


def _check_header(path, magic, version, want_magic, want_version):
    if magic != want_magic:
        raise BadMagic(f"{path}: bad magic {magic!r}, expected {want_magic!r}")
    if version != want_version:
        raise BadMagic(f"{path}: unsupported version {version}")


def iter_fseg(path, channels: Sequence[str] | None = None) -> Iterator[EegRecording]:
    """Yield recordings one at a time. ``segment_id`` is the record index."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        magic, version, count = _FSEG_HEADER.unpack(_read_exact(fh, _FSEG_HEADER.size, path))
        _check_header(path, magic, version, FSEG_MAGIC, FSEG_VERSION)
        for idx in range(count):
            pid, label, n_ch, rate, n_samp = _FSEG_RECORD.unpack(
                _read_exact(fh, _FSEG_RECORD.size, path)
            )
            raw = _read_exact(fh, 4 * n_ch * n_samp, path)
            data = np.frombuffer(raw, dtype="<f4").reshape(n_ch, n_samp)
            yield EegRecording(
                patient_id=pid,
                channels=_resolve_channels(n_ch, channels),
                sample_rate=float(rate),
                data=data,
                label=label,
                segment_id=idx,
            )


def read_fseg(path, channels: Sequence[str] | None = None) -> list[EegRecording]:
    return list(iter_fseg(path, channels))
