"""Fine-pruning probe: disable dormant channels, then measure what survives.

The defender ranks the channels of the network's final convolutional stage
by their mean activation over a clean holdout set — backdoor circuitry tends
to hide in channels that clean data barely excites — and disables them in
ascending order of activity.  Pruning stops just before clean accuracy on
the holdout falls more than a fixed budget below its starting value.

The probe then reports the attack success rate that *remains* on the pruned
model, which is the quantity of interest: a trigger entangled with features
the clean task needs will survive pruning largely intact.
"""

from __future__ import annotations

import numpy as np
import torch

from .._validation import check_images, check_labels
from ..errors import InvalidSpecError
from ..training import (
    ResidualNetClassifier,
    clone_fitted,
    eval_accuracy,
    eval_attack_success,
)

__all__ = ["fine_prune", "rank_channels"]

_REPORT_VERSION = 1


def rank_channels(
    clf: ResidualNetClassifier, X: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Final-stage channel indices ordered from least to most active on ``X``."""
    X = check_images(X, "X")
    model = clf.model_
    model.eval()
    totals = torch.zeros(model.n_final_channels, dtype=torch.float64)
    n = 0
    for start in range(0, len(X), batch_size):
        xb = torch.from_numpy(
            np.ascontiguousarray(
                X[start : start + batch_size].transpose(0, 3, 1, 2), dtype=np.float32
            )
        )
        totals += model.final_activation_means(xb).double() * len(xb)
        n += len(xb)
    means = (totals / n).numpy()
    return np.argsort(means, kind="stable")


def fine_prune(
    clf: ResidualNetClassifier,
    X_holdout: np.ndarray,
    y_holdout: np.ndarray,
    trigger,
    target_label: int,
    X_eval: np.ndarray | None = None,
    y_eval: np.ndarray | None = None,
    ca_drop_budget: float = 0.10,
    quantize: bool = True,
) -> dict:
    """Prune dormant channels under an accuracy budget; report residual attack.

    ``X_holdout/y_holdout`` is the defender's clean data, used both to rank
    channels and to monitor accuracy.  ``X_eval/y_eval`` (defaults to the
    holdout) is the experimenter's set for measuring attack success before
    and after pruning.
    """
    if not 0.0 < ca_drop_budget < 1.0:
        raise InvalidSpecError(
            f"ca_drop_budget must lie in (0, 1), got {ca_drop_budget}"
        )
    y_holdout = check_labels(np.asarray(y_holdout), len(X_holdout))
    if X_eval is None:
        X_eval, y_eval = X_holdout, y_holdout

    probe = clone_fitted(clf)
    model = probe.model_
    order = rank_channels(probe, X_holdout)

    initial_ca = eval_accuracy(probe, X_holdout, y_holdout)
    floor = initial_ca - ca_drop_budget
    asr_before = eval_attack_success(
        clf, X_eval, y_eval, trigger, target_label, quantize=quantize
    )

    pruned: list[int] = []
    trace = [{"n_pruned": 0, "channel": None, "clean_accuracy": initial_ca}]
    stop_reason = "all_but_one_pruned"
    for ch in order[:-1]:  # at least one channel always survives
        model.prune_channels([int(ch)])
        ca = eval_accuracy(probe, X_holdout, y_holdout)
        if ca < floor:
            # revert the step that broke the budget and stop
            model.channel_mask[int(ch)] = 1.0
            stop_reason = "accuracy_floor"
            break
        pruned.append(int(ch))
        trace.append(
            {"n_pruned": len(pruned), "channel": int(ch), "clean_accuracy": ca}
        )

    residual_asr = eval_attack_success(
        probe, X_eval, y_eval, trigger, target_label, quantize=quantize
    )
    return {
        "kind": "pruning-report",
        "version": _REPORT_VERSION,
        "ca_drop_budget": float(ca_drop_budget),
        "n_channels": int(model.n_final_channels),
        "n_pruned": len(pruned),
        "pruned_channels": pruned,
        "stop_reason": stop_reason,
        "initial_clean_accuracy": initial_ca,
        "final_clean_accuracy": trace[-1]["clean_accuracy"],
        "eval_clean_accuracy": eval_accuracy(probe, X_eval, y_eval),
        "asr_before": asr_before,
        "residual_asr": residual_asr,
        "trace": trace,
    }
