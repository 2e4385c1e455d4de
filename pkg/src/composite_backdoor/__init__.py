"""Data-poisoning toolkit for composite multi-trigger backdoor experiments.

The package builds low-magnitude composite image triggers, plans and
materializes poisoned training sets with joint/noise sample modes, trains
small residual networks deterministically on CPU, analyzes how attack
success degrades as trigger magnitude shrinks, and probes trained models
with standard backdoor defenses.
"""

from .data import DatasetBundle, load_folder, load_npz, make_synthetic
from .errors import (
    ConfigError,
    InvalidSpecError,
    ManifestError,
    ProbeFailureError,
    ProvenanceError,
    StoreLockError,
    TrainingFailureError,
)
from .magnitude_sweep import DEFAULT_DIVISORS, plot_sweep, run_sweep
from .poisoning import (
    ModeProbabilities,
    PoisonSampleRecord,
    build_manifest,
    load_cache,
    materialize_arrays,
    materialize_cache,
    triggered_inputs,
)
from .training import (
    ResidualNetClassifier,
    clone_fitted,
    eval_accuracy,
    eval_attack_success,
    load_classifier,
)
from .triggers import (
    BlendTrigger,
    CompositeTrigger,
    PatchTrigger,
    SharpenKernelTrigger,
    WarpTrigger,
)

__version__ = "0.1.0"

__all__ = [
    "BlendTrigger",
    "CompositeTrigger",
    "ConfigError",
    "DEFAULT_DIVISORS",
    "DatasetBundle",
    "InvalidSpecError",
    "ManifestError",
    "ModeProbabilities",
    "PatchTrigger",
    "PoisonSampleRecord",
    "ProbeFailureError",
    "ProvenanceError",
    "ResidualNetClassifier",
    "SharpenKernelTrigger",
    "StoreLockError",
    "TrainingFailureError",
    "WarpTrigger",
    "build_manifest",
    "clone_fitted",
    "eval_accuracy",
    "eval_attack_success",
    "load_cache",
    "load_classifier",
    "load_folder",
    "load_npz",
    "make_synthetic",
    "materialize_arrays",
    "materialize_cache",
    "plot_sweep",
    "run_sweep",
    "triggered_inputs",
]
