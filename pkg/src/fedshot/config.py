"""Experiment configuration: one flat JSON object of typed keys.

Every key has a default; the fully resolved config is written into each run's
manifest so a run can be replayed from the manifest alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .episode import DEFAULT_PATIENT_COUNTS, DEFAULT_TYPE_MAP
from .errors import AlphaOutOfRange, ConfigError
from .fed import DEFAULT_ALPHA, DEFAULT_MAX_ROUNDS, DEFAULT_PATIENCE
from .signal import DEFAULT_CHANNELS, DEFAULT_PAIRS


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    n_clients: int = 4
    alpha: float = DEFAULT_ALPHA
    patience: int = DEFAULT_PATIENCE
    max_rounds: int = DEFAULT_MAX_ROUNDS
    avg_mode: str = "weighted"  # or "uniform"
    threads: int = 0  # 0 -> FEDSHOT_THREADS or 1

    # preprocessing / embedding
    window_s: float = 5.0
    hop_s: float = 2.5
    embedding_dim: int = 256
    hidden_dim: int = 128
    channels: list = field(default_factory=lambda: list(DEFAULT_CHANNELS))
    montage: list = field(default_factory=lambda: [list(p) for p in DEFAULT_PAIRS])

    # E1: federated fine-tuning of encoder + head
    e1_lr: float = 0.01
    e1_local_epochs: int = 1
    e1_batch_size: int = 32  # 0 -> full batch
    e1_val_fraction: float = 0.2

    # E2: federated few-shot personalization of the head
    e2_lr: float = 0.05
    e2_local_epochs: int = 5
    e2_batch_size: int = 0
    e2_head_init: str = "e1"  # or "random"
    client_seizure_types: list = field(
        default_factory=lambda: [list(DEFAULT_TYPE_MAP[c]) for c in sorted(DEFAULT_TYPE_MAP)])
    client_patient_counts: list = field(
        default_factory=lambda: [DEFAULT_PATIENT_COUNTS[c] for c in sorted(DEFAULT_PATIENT_COUNTS)])
    per_client_patient_range: list = field(default_factory=lambda: [5, 8])

    # data paths; empty -> default file names inside out_dir
    e1_data: str = ""
    e2_data: str = ""
    encoder_checkpoint: str = ""

    # synthetic cohort
    synth_sample_rate: float = 256.0
    synth_patient_scale: float = 0.2
    synth_e1_patients: int = 40
    synth_e1_segments_per_class: int = 2
    synth_e1_duration_s: float = 10.0
    synth_e2_patients: int = 40
    synth_e2_seizure_segments: int = 10
    synth_e2_background_segments: int = 30
    synth_e2_duration_s: float = 5.0
    synth_site_scale: float = 0.5  # 0 disables per-site acquisition effects
    synth_emb_per_class: int = 10
    synth_emb_separation: float = 10.0
    synth_emb_noise: float = 1.0

    def validate(self) -> "ExperimentConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.avg_mode not in ("weighted", "uniform"):
            raise ConfigError(f"avg_mode must be 'weighted' or 'uniform', got {self.avg_mode!r}")
        if self.e2_head_init not in ("e1", "random"):
            raise ConfigError("e2_head_init must be 'e1' or 'random'")
        if not (self.window_s > 0 and 0 < self.hop_s <= self.window_s):
            raise ConfigError("need window_s > 0 and 0 < hop_s <= window_s")
        if min(self.e1_local_epochs, self.e2_local_epochs) < 1:
            raise ConfigError("local epochs must be >= 1")
        if min(self.e1_lr, self.e2_lr) < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 <= self.e1_val_fraction < 1.0:
            raise ConfigError("e1_val_fraction must lie in [0, 1)")
        if len(self.per_client_patient_range) != 2:
            raise ConfigError("per_client_patient_range must be [min, max]")
        for pair in self.montage:
            if len(pair) != 2:
                raise ConfigError(f"montage entries must be [anode, cathode], got {pair}")
        return self

    def check_e2(self) -> None:
        """Consistency of the few-shot client map; only E2 stages need it."""
        if len(self.client_seizure_types) != self.n_clients:
            raise ConfigError("client_seizure_types needs one entry per client")
        if self.client_patient_counts and len(self.client_patient_counts) != self.n_clients:
            raise ConfigError("client_patient_counts needs one entry per client")

    @property
    def uniform_avg(self) -> bool:
        return self.avg_mode == "uniform"

    def type_map(self) -> dict[int, tuple[int, ...]]:
        return {k + 1: tuple(t) for k, t in enumerate(self.client_seizure_types)}

    def patient_counts(self) -> dict[int, int] | None:
        if not self.client_patient_counts:
            return None
        return {k + 1: int(n) for k, n in enumerate(self.client_patient_counts)}

    def path(self, key: str, default_name: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else Path(self.out_dir) / default_name

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = cls()
        values = {}
        for key, value in data.items():
            values[key] = _coerce(key, value, getattr(defaults, key))
        return cls(**values).validate()


def _coerce(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, "
                          f"got {type(value).__name__}")
    return value


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a JSON config (or start from defaults) and apply non-None overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)
