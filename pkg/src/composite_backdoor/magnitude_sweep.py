"""Magnitude sweep: how far the trigger weakens before the attack fails.

A trained backdoored model is evaluated against progressively attenuated
copies of its own trigger — the composite scaled by ``1/n`` for a rising
sequence of divisors ``n`` — while clean accuracy is monitored on the same
fixed model.  The sweep stops at the first divisor whose attack success rate
drops below the floor (0.90 by default), which locates the minimum trigger
magnitude the deployed attack could get away with.

The model is trained once; no point in the sweep retrains it.  Clean accuracy
is therefore evaluated on the identical model at every divisor and serves as
a control row: it must not move.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidSpecError
from .serialization import write_json
from .training import ResidualNetClassifier, eval_accuracy, eval_attack_success
from .triggers import CompositeTrigger

__all__ = [
    "DEFAULT_DIVISORS",
    "load_sweep_csv",
    "plot_sweep",
    "run_sweep",
    "write_sweep_csv",
    "write_sweep_report",
]

DEFAULT_DIVISORS = (1.0, 1.25, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 8.0)

_REPORT_VERSION = 1


def _check_divisors(divisors: Sequence[float]) -> tuple[float, ...]:
    divisors = tuple(float(d) for d in divisors)
    if not divisors:
        raise InvalidSpecError("divisor list must not be empty")
    if divisors[0] != 1.0:
        raise InvalidSpecError(
            f"the sweep must start at divisor 1 (the trained magnitude), "
            f"got {divisors[0]}"
        )
    if any(b <= a for a, b in zip(divisors, divisors[1:])):
        raise InvalidSpecError(f"divisors must be strictly increasing, got {divisors}")
    return divisors


def run_sweep(
    clf: ResidualNetClassifier,
    X: np.ndarray,
    y: np.ndarray,
    composite: CompositeTrigger,
    target_label: int,
    divisors: Sequence[float] = DEFAULT_DIVISORS,
    asr_floor: float = 0.90,
    quantize: bool = True,
) -> dict:
    """Evaluate attack success across attenuated triggers; returns the report."""
    divisors = _check_divisors(divisors)
    if not 0.0 < asr_floor <= 1.0:
        raise InvalidSpecError(f"asr_floor must lie in (0, 1], got {asr_floor}")

    # the model and clean inputs never change during the sweep, so clean
    # accuracy is computed once and repeated as a per-point control value
    baseline_ca = eval_accuracy(clf, X, y)

    points = []
    stop_reason = "exhausted"
    for n in divisors:
        attenuated = composite.scaled(1.0 / n)
        asr = eval_attack_success(
            clf, X, y, attenuated, target_label, quantize=quantize
        )
        points.append(
            {
                "divisor": n,
                "scale": 1.0 / n,
                "asr": asr,
                "clean_accuracy": baseline_ca,
                "magnitudes": attenuated.magnitudes(),
            }
        )
        if asr < asr_floor:
            stop_reason = "asr_below_floor"
            break

    return {
        "kind": "magnitude-sweep",
        "version": _REPORT_VERSION,
        "target_label": int(target_label),
        "asr_floor": float(asr_floor),
        "quantize": bool(quantize),
        "divisors_requested": list(divisors),
        "baseline_clean_accuracy": baseline_ca,
        "points": points,
        "stop_reason": stop_reason,
        "stopped_at_divisor": points[-1]["divisor"] if stop_reason != "exhausted" else None,
    }


def write_sweep_report(report: dict, path: str | Path) -> Path:
    return write_json(path, report)


def write_sweep_csv(report: dict, path: str | Path) -> Path:
    """Write the per-divisor table as a CSV sidecar; floats survive round-trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["divisor", "scale", "asr", "clean_accuracy"])
        for p in report["points"]:
            writer.writerow(
                [repr(p["divisor"]), repr(p["scale"]), repr(p["asr"]), repr(p["clean_accuracy"])]
            )
    return path


def load_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: float(v) for k, v in row.items()} for row in reader]


def plot_sweep(report: dict, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    divisors = [p["divisor"] for p in report["points"]]
    asr = [p["asr"] for p in report["points"]]
    ca = [p["clean_accuracy"] for p in report["points"]]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(divisors, asr, marker="o", label="attack success rate")
    ax.plot(divisors, ca, marker="s", label="clean accuracy")
    ax.axhline(report["asr_floor"], linestyle="--", color="gray", linewidth=1,
               label=f"floor {report['asr_floor']:.2f}")
    ax.set_xlabel("magnitude divisor n (trigger scaled by 1/n)")
    ax.set_ylabel("rate")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
