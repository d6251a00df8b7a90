"""Seeded synthetic EEG recordings and embeddings.

The six event classes get loosely EEG-like templates laid over 1/f
background noise with a posterior alpha rhythm:

  0 spsw  sparse sharp biphasic spikes, left temporal focus
  1 gped  periodic slow biphasic discharges, fronto-central maximum
  2 pled  periodic sharp discharges over the left hemisphere
  3 eyem  slow frontal deflections of opposite sign on the two sides
  4 artf  broadband high-frequency bursts over temporal muscle sites
  5 bckg  background only

None of this aims at clinical fidelity; it only has to give the pipeline
class structure and patient-level shifts to learn from. Patients can also be
grouped into sites (hospitals): every site distorts the event topographies in
its own way and adds a narrowband interference line, so recordings from
different sites differ systematically, not just patient by patient.

Random streams are split per patient and per segment by seeding
``numpy.random.default_rng`` with ``[seed, patient_id, ...]`` tuples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .embed import DEFAULT_DIM, Embedding
from .errors import InvalidSpec
from .signal import BACKGROUND, DEFAULT_CHANNELS, N_CLASSES, EegRecording

KINDS = ("none", "pulse", "drift", "burst")

_LEFT = {"FP1", "F7", "F3", "T3", "C3", "T5", "P3", "O1", "A1"}
_RIGHT = {"FP2", "F8", "F4", "T4", "C4", "T6", "P4", "O2", "A2"}
_POSTERIOR = {"O1", "O2", "P3", "P4", "PZ", "T5", "T6"}


def topography(name: str, channels) -> np.ndarray:
    """Per-channel gain of an event type."""
    gains = []
    for ch in channels:
        ch = ch.upper()
        if name == "global":
            g = 1.0
        elif name == "left_temporal":
            g = {"F7": 1.0, "T3": 1.0, "T5": 0.7, "FP1": 0.3, "C3": 0.3}.get(ch, 0.05)
        elif name == "frontocentral":
            g = {"FP1": 1.0, "FP2": 1.0, "F3": 0.9, "F4": 0.9, "FZ": 1.0, "F7": 0.7,
                 "F8": 0.7, "C3": 0.6, "C4": 0.6, "CZ": 0.7, "T3": 0.4, "T4": 0.4,
                 "P3": 0.3, "P4": 0.3, "PZ": 0.35}.get(ch, 0.15)
        elif name == "left_hemisphere":
            g = 1.0 if ch in _LEFT else 0.3 if ch in {"FZ", "CZ", "PZ"} else 0.05
        elif name == "frontopolar":
            g = {"FP1": 1.0, "FP2": -1.0, "F7": 0.5, "F8": -0.5,
                 "F3": 0.25, "F4": -0.25}.get(ch, 0.0)
        elif name == "temporal":
            g = {"F7": 1.0, "F8": 1.0, "T3": 1.0, "T4": 1.0, "T5": 0.6,
                 "T6": 0.6}.get(ch, 0.05)
        else:
            raise InvalidSpec(f"unknown topography {name!r}")
        gains.append(g)
    return np.array(gains)


@dataclass(frozen=True)
class ClassParams:
    kind: str = "none"
    noise_level: float = 1.0
    transient_rate: float = 0.0  # events per second
    amplitude: float = 0.0  # in units of noise_level
    width_s: float = 0.05  # spike width, bump length or burst length
    band: tuple[float, float] = (30.0, 70.0)  # burst content
    periodic: bool = False
    topography: str = "global"


DEFAULT_CLASSES = (
    ClassParams("pulse", transient_rate=1.5, amplitude=12.0, width_s=0.04,
                topography="left_temporal"),
    ClassParams("pulse", transient_rate=1.0, amplitude=8.0, width_s=0.2, periodic=True,
                topography="frontocentral"),
    ClassParams("pulse", transient_rate=1.5, amplitude=14.0, width_s=0.08, periodic=True,
                topography="left_hemisphere"),
    ClassParams("drift", transient_rate=0.6, amplitude=16.0, width_s=0.8,
                topography="frontopolar"),
    ClassParams("burst", transient_rate=0.8, amplitude=6.0, width_s=0.5, band=(30.0, 70.0),
                topography="temporal"),
    ClassParams("none"),
)


@dataclass
class SynthSpec:
    """Synthetic recording cohort.

    With ``seizure_types`` unset every patient gets ``segments_per_class``
    recordings of each of the six classes. Otherwise ``seizure_types`` lists
    the non-background classes of each patient (cycled if shorter than
    ``n_patients``) and each patient gets ``n_seizure_segments`` spread over
    its classes plus ``n_background_segments`` background recordings.
    """

    n_patients: int = 8
    segments_per_class: int = 2
    seizure_types: tuple[tuple[int, ...], ...] | None = None
    n_seizure_segments: int = 10
    n_background_segments: int = 30
    channels: tuple[str, ...] = DEFAULT_CHANNELS
    sample_rate: float = 256.0
    duration_s: float = 10.0
    classes: tuple[ClassParams, ...] = DEFAULT_CLASSES
    patient_scale: float = 0.2
    alpha_level: float = 0.6
    first_patient_id: int = 0
    seed: int = 0
    sites: dict[int, int] | None = None  # patient_id -> site id
    site_scale: float = 0.0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise InvalidSpec("n_patients must be >= 1")
        if not (self.sample_rate > 0 and self.duration_s > 0):
            raise InvalidSpec("sample_rate and duration_s must be positive")
        if self.patient_scale < 0 or self.alpha_level < 0 or self.site_scale < 0:
            raise InvalidSpec("scales must be non-negative")
        if len(self.classes) != N_CLASSES:
            raise InvalidSpec(f"need parameters for {N_CLASSES} classes")
        for p in self.classes:
            if p.kind not in KINDS:
                raise InvalidSpec(f"unknown event kind {p.kind!r}")
            if p.noise_level <= 0 or p.transient_rate < 0 or p.amplitude < 0 or p.width_s <= 0:
                raise InvalidSpec(f"invalid class parameters {p}")
            topography(p.topography, self.channels)
        if self.seizure_types is not None:
            for types in self.seizure_types:
                if not types or any(t not in range(N_CLASSES) or t == BACKGROUND
                                    for t in types):
                    raise InvalidSpec(f"invalid seizure types {types}")
            if self.n_seizure_segments < 1 or self.n_background_segments < 1:
                raise InvalidSpec("segment counts must be positive")
        elif self.segments_per_class < 1:
            raise InvalidSpec("segments_per_class must be >= 1")

    def plan(self) -> list[tuple[int, list[int]]]:
        """``(patient_id, labels)`` for every patient, in generation order."""
        out = []
        for k in range(self.n_patients):
            pid = self.first_patient_id + k
            if self.seizure_types is None:
                labels = [c for c in range(N_CLASSES) for _ in range(self.segments_per_class)]
            else:
                types = self.seizure_types[k % len(self.seizure_types)]
                labels = [types[i % len(types)] for i in range(self.n_seizure_segments)]
                labels += [BACKGROUND] * self.n_background_segments
            out.append((pid, labels))
        return out


@dataclass
class _Patient:
    amp: float
    rate: float
    alpha_hz: float
    gains: np.ndarray  # (n_classes, n_channels)
    channel_gain: np.ndarray  # (n_channels,)
    line_hz: float = 0.0
    line_gain: np.ndarray | None = None


@dataclass
class _Site:
    gains: np.ndarray  # (n_classes, n_channels) multiplier on event topographies
    line_hz: float
    line_gain: np.ndarray  # (n_channels,)


def _site(spec: SynthSpec, site: int) -> _Site:
    # third entropy word 2 keeps site streams apart from patient streams
    rng = np.random.default_rng([spec.seed, site, 2])
    s = spec.site_scale
    n_ch = len(spec.channels)
    return _Site(
        gains=1.0 + s * rng.standard_normal((len(spec.classes), n_ch)),
        line_hz=float(rng.uniform(35.0, 65.0)),
        line_gain=s * rng.uniform(0.0, 1.0, n_ch),
    )


def _patient(spec: SynthSpec, pid: int) -> _Patient:
    rng = np.random.default_rng([spec.seed, pid, 0])
    s = spec.patient_scale
    n_ch = len(spec.channels)
    base = np.stack([topography(p.topography, spec.channels) for p in spec.classes])
    gains = base * (1.0 + s * rng.standard_normal(base.shape))
    site = (spec.sites or {}).get(pid)
    line_hz, line_gain = 0.0, np.zeros(n_ch)
    if site is not None and spec.site_scale > 0:
        eff = _site(spec, site)
        gains = gains * eff.gains
        line_hz, line_gain = eff.line_hz, eff.line_gain
    return _Patient(
        amp=float(np.exp(s * rng.standard_normal())),
        rate=float(max(0.25, 1.0 + 0.5 * s * rng.standard_normal())),
        alpha_hz=float(10.0 + 2.0 * s * rng.standard_normal()),
        gains=gains,
        channel_gain=np.exp(0.5 * s * rng.standard_normal(n_ch)),
        line_hz=line_hz,
        line_gain=line_gain,
    )


def pink_noise(rng, n_channels: int, n: int, rate: float) -> np.ndarray:
    """Unit-variance noise with a 1/f power spectrum (flat below 0.5 Hz)."""
    spec = rng.standard_normal((n_channels, n // 2 + 1)) + 1j * rng.standard_normal(
        (n_channels, n // 2 + 1))
    f = np.fft.rfftfreq(n, d=1.0 / rate)
    spec *= 1.0 / np.sqrt(np.maximum(f, 0.5))
    spec[:, 0] = 0.0
    x = np.fft.irfft(spec, n=n, axis=1)
    return x / x.std(axis=1, keepdims=True)


def _band_noise(rng, n: int, rate: float, band) -> np.ndarray:
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.fft.rfftfreq(n, d=1.0 / rate)
    spec[(f < band[0]) | (f > band[1])] = 0.0
    x = np.fft.irfft(spec, n=n)
    sd = x.std()
    return x / sd if sd > 0 else x


def _event_times(rng, p: ClassParams, rate: float, duration: float) -> np.ndarray:
    r = p.transient_rate * rate
    if r <= 0:
        return np.zeros(0)
    if p.periodic:
        return np.arange(rng.uniform(0, 1.0 / r), duration, 1.0 / r)
    return np.sort(rng.uniform(0, duration, rng.poisson(r * duration)))


def _event_trace(rng, p: ClassParams, times, n: int, fs: float) -> np.ndarray:
    """Single-channel waveform of all events, before topography."""
    t = np.arange(n) / fs
    out = np.zeros(n)
    for t0 in times:
        if p.kind == "pulse":
            sigma = p.width_s / 4.0
            u = (t - t0) / sigma
            out += -u * np.exp(0.5 - 0.5 * u * u)
        elif p.kind == "drift":
            u = (t - t0) / p.width_s
            bump = np.where((u >= 0) & (u <= 1), np.sin(np.pi * np.clip(u, 0, 1)) ** 2, 0.0)
            out += rng.choice((-1.0, 1.0)) * bump
        elif p.kind == "burst":
            u = (t - t0) / p.width_s
            win = np.where((u >= 0) & (u <= 1), np.sin(np.pi * np.clip(u, 0, 1)) ** 2, 0.0)
            if win.any():
                out += win * _band_noise(rng, n, fs, p.band)
    return out


def gen_recording(spec: SynthSpec, patient_id: int, label: int, index: int,
                  patient: _Patient | None = None, segment_id: int = 0) -> EegRecording:
    patient = patient or _patient(spec, patient_id)
    rng = np.random.default_rng([spec.seed, patient_id, 1, index])
    fs = spec.sample_rate
    n = int(round(spec.duration_s * fs))
    params = spec.classes[label]
    n_ch = len(spec.channels)
    noise = params.noise_level * patient.amp

    data = noise * pink_noise(rng, n_ch, n, fs)
    t = np.arange(n) / fs
    alpha = np.sin(2 * np.pi * patient.alpha_hz * t + rng.uniform(0, 2 * np.pi))
    posterior = np.array([ch.upper() in _POSTERIOR for ch in spec.channels], dtype=float)
    data += spec.alpha_level * noise * np.outer(posterior, alpha)

    if params.kind != "none" and params.amplitude > 0:
        times = _event_times(rng, params, patient.rate, spec.duration_s)
        trace = _event_trace(rng, params, times, n, fs)
        data += params.amplitude * noise * np.outer(patient.gains[label], trace)
    if patient.line_gain is not None and patient.line_gain.any():
        line = np.sin(2 * np.pi * patient.line_hz * t + rng.uniform(0, 2 * np.pi))
        data += noise * np.outer(patient.line_gain, line)
    data *= patient.channel_gain[:, None]
    return EegRecording(patient_id=patient_id, channels=spec.channels, sample_rate=fs,
                        data=data, label=label, segment_id=segment_id)


def iter_recordings(spec: SynthSpec) -> Iterator[EegRecording]:
    spec.validate()
    seg = 0
    for pid, labels in spec.plan():
        patient = _patient(spec, pid)
        for i, label in enumerate(labels):
            yield gen_recording(spec, pid, label, i, patient, segment_id=seg)
            seg += 1


def gen_recordings(spec: SynthSpec) -> list[EegRecording]:
    return list(iter_recordings(spec))


def gen_embeddings(n_per_class_per_patient: int, class_means_separation: float,
                   noise_scale: float, seed: int = 0, n_patients: int = 4,
                   dim: int = DEFAULT_DIM, classes=tuple(range(N_CLASSES)),
                   patient_offset_scale: float | None = None,
                   first_patient_id: int = 0) -> list[Embedding]:
    """Gaussian class clusters in ``dim`` dimensions with per-patient shifts.

    Class means are ``separation`` times random unit vectors; each patient
    shifts all of its clusters by a Gaussian offset (default scale
    ``noise_scale``) and adds isotropic noise of scale ``noise_scale``.
    """
    if class_means_separation <= 0 or noise_scale < 0:
        raise InvalidSpec("separation must be positive and noise_scale non-negative")
    if n_per_class_per_patient < 1 or n_patients < 1 or dim < 1:
        raise InvalidSpec("counts and dimension must be positive")
    offset_scale = noise_scale if patient_offset_scale is None else patient_offset_scale
    rng = np.random.default_rng([seed, 0])
    directions = rng.standard_normal((N_CLASSES, dim))
    means = class_means_separation * directions / np.linalg.norm(directions, axis=1,
                                                                 keepdims=True)
    out = []
    sid = 0
    for k in range(n_patients):
        pid = first_patient_id + k
        prng = np.random.default_rng([seed, pid, 1])
        offset = offset_scale * prng.standard_normal(dim)
        for c in classes:
            for _ in range(n_per_class_per_patient):
                values = means[c] + offset + noise_scale * prng.standard_normal(dim)
                out.append(Embedding(values, segment_id=sid, label=c, patient_id=pid))
                sid += 1
    return out


def e1_spec(n_patients: int = 40, segments_per_class: int = 2, duration_s: float = 10.0,
            seed: int = 0, **kw) -> SynthSpec:
    return SynthSpec(n_patients=n_patients, segments_per_class=segments_per_class,
                     duration_s=duration_s, seed=seed, **kw)


def e2_spec(n_patients: int = 40, seizure_types=((1,), (2,), (3,), (4,)),
            n_seizure_segments: int = 10, n_background_segments: int = 30,
            duration_s: float = 5.0, seed: int = 0, first_patient_id: int = 1000,
            **kw) -> SynthSpec:
    return SynthSpec(n_patients=n_patients, seizure_types=tuple(map(tuple, seizure_types)),
                     n_seizure_segments=n_seizure_segments,
                     n_background_segments=n_background_segments, duration_s=duration_s,
                     seed=seed, first_patient_id=first_patient_id, **kw)


def with_class(spec: SynthSpec, label: int, **changes) -> SynthSpec:
    """Copy of ``spec`` with one class's parameters changed."""
    classes = list(spec.classes)
    classes[label] = replace(classes[label], **changes)
    return replace(spec, classes=tuple(classes))
