"""Defense probes run against trained models.

These are *measurement instruments*, not hardened defenses: each one
implements the standard form of a published detection technique so the
toolkit can quantify how visible a given trigger is to it.

* :mod:`strip` — overlay-entropy detection (perturbation consistency).
* :mod:`pruning` — fine-pruning of dormant channels plus residual-attack
  measurement.
* :mod:`cleanse` — per-class trigger reversal with an anomaly index over
  reversed-mask sizes.
"""

from .cleanse import anomaly_index, neural_cleanse, reverse_trigger
from .pruning import fine_prune, rank_channels
from .strip import prediction_entropies, strip_report

__all__ = [
    "anomaly_index",
    "fine_prune",
    "neural_cleanse",
    "prediction_entropies",
    "rank_channels",
    "reverse_trigger",
    "strip_report",
]
