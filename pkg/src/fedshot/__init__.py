"""Federated few-shot EEG event classification simulator.

Stages: preprocessing and embedding (``signal``, ``embed``), classifier head
and parameter vectors (``model``), federated training (``fed``), patient
partitioning and few-shot tasks (``episode``), evaluation (``metrics``) and a
seeded synthetic cohort (``synth``). ``pipeline`` and ``cli`` wire them up.
"""

from .errors import ConfigError, DataError, FedshotError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "FedshotError", "NumericError", "__version__"]
