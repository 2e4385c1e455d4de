"""Poisoned-dataset construction.

Every training sample is independently assigned one of four modes:

* ``clean`` — untouched image, original label.
* ``backdoor`` — full composite trigger applied, label replaced by the attack
  target.
* ``noise`` (one per component) — a randomized-structure variant of a single
  component applied at the component's magnitude, original label kept.  These
  teach the model that the trigger *structure* matters, not just its signal
  band.
* ``joint`` (one per component) — the true single component applied alone,
  original label kept.  These suppress partial-trigger activation.

Mode assignment, trigger structures, and all randomized variants derive from a
single master seed, so the same configuration always yields a byte-identical
manifest.  Materialization quantizes every poisoned image to 8-bit, matching
what a camera or file format would do to a physically deployed trigger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import from_uint8, to_uint8
from .data import DatasetBundle
from .errors import InvalidSpecError, ManifestError, ProvenanceError
from .serialization import read_json, sha256_arrays, sha256_json, write_json
from .triggers import CompositeTrigger

__all__ = [
    "MODE_BACKDOOR",
    "MODE_CLEAN",
    "MODE_JOINT",
    "MODE_NOISE",
    "ModeProbabilities",
    "PoisonSampleRecord",
    "build_manifest",
    "draw_modes",
    "load_cache",
    "materialize_arrays",
    "materialize_cache",
    "mode_table",
]

MODE_CLEAN = "clean"
MODE_BACKDOOR = "backdoor"
MODE_NOISE = "noise"
MODE_JOINT = "joint"

_MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ModeProbabilities:
    """Per-sample mode probabilities; the remainder is the clean fraction."""

    backdoor: float = 0.1
    noise: tuple[float, ...] = (0.05, 0.05, 0.05)
    joint: tuple[float, ...] = (0.05, 0.05, 0.05)

    def __post_init__(self) -> None:
        object.__setattr__(self, "noise", tuple(float(p) for p in self.noise))
        object.__setattr__(self, "joint", tuple(float(p) for p in self.joint))

    def validate(self, n_components: int | None = None) -> "ModeProbabilities":
        parts = (self.backdoor, *self.noise, *self.joint)
        for p in parts:
            if not 0.0 <= p <= 1.0 or not np.isfinite(p):
                raise InvalidSpecError(
                    f"mode probabilities must lie in [0, 1], got {p!r}"
                )
        if len(self.noise) != len(self.joint):
            raise InvalidSpecError(
                "noise and joint probability lists must have equal length "
                f"({len(self.noise)} != {len(self.joint)})"
            )
        total = math.fsum(parts)
        if total >= 1.0:
            raise InvalidSpecError(
                "backdoor + noise + joint probabilities must sum to less than 1 "
                f"so a clean fraction remains, got {total}"
            )
        if n_components is not None and len(self.noise) != n_components:
            raise InvalidSpecError(
                f"probability lists cover {len(self.noise)} components but the "
                f"trigger has {n_components}"
            )
        return self

    @property
    def clean(self) -> float:
        return 1.0 - math.fsum((self.backdoor, *self.noise, *self.joint))

    def edges(self) -> np.ndarray:
        """Cumulative interval edges over [0, 1) in mode-table order."""
        return np.cumsum((self.backdoor, *self.noise, *self.joint))

    def to_dict(self) -> dict:
        return {
            "backdoor": self.backdoor,
            "noise": list(self.noise),
            "joint": list(self.joint),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModeProbabilities":
        return ModeProbabilities(
            backdoor=float(d["backdoor"]),
            noise=tuple(d["noise"]),
            joint=tuple(d["joint"]),
        )


def mode_table(n_components: int) -> list[tuple[str, int | None]]:
    """Mode order matching :meth:`ModeProbabilities.edges`; clean is last."""
    table: list[tuple[str, int | None]] = [(MODE_BACKDOOR, None)]
    table += [(MODE_NOISE, i) for i in range(n_components)]
    table += [(MODE_JOINT, i) for i in range(n_components)]
    table.append((MODE_CLEAN, None))
    return table


def draw_modes(u: np.ndarray, probs: ModeProbabilities) -> np.ndarray:
    """Map uniform draws ``u`` in [0, 1) to indices into :func:`mode_table`.

    Each mode occupies a half-open subinterval of [0, 1) whose length equals
    its probability, so mode frequencies match the configuration exactly in
    distribution.
    """
    u = np.asarray(u, dtype=np.float64)
    return np.searchsorted(probs.edges(), u, side="right")


@dataclass(frozen=True)
class PoisonSampleRecord:
    """One training sample's assignment in the poisoning plan."""

    index: int
    mode: str
    component: int | None
    label: int
    assigned_label: int
    variant_seed: int | None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "mode": self.mode,
            "component": self.component,
            "label": self.label,
            "assigned_label": self.assigned_label,
            "variant_seed": self.variant_seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "PoisonSampleRecord":
        return PoisonSampleRecord(
            index=int(d["index"]),
            mode=str(d["mode"]),
            component=None if d["component"] is None else int(d["component"]),
            label=int(d["label"]),
            assigned_label=int(d["assigned_label"]),
            variant_seed=None if d["variant_seed"] is None else int(d["variant_seed"]),
        )


def build_manifest(
    bundle: DatasetBundle,
    composite: CompositeTrigger,
    target_label: int,
    probabilities: ModeProbabilities | None = None,
    master_seed: int = 0,
    dynamic: bool = False,
) -> dict:
    """Plan the poisoning of ``bundle``'s training split.

    The returned manifest is a plain JSON-serializable dict; identical inputs
    produce an identical manifest.  ``dynamic=True`` marks the plan as
    re-randomizing noise-mode structures every epoch (an ablation mode);
    the per-sample ``variant_seed`` then seeds a per-epoch stream instead of
    a single fixed structure.
    """
    probs = (probabilities or ModeProbabilities()).validate(
        n_components=len(composite.components)
    )
    if not 0 <= target_label < bundle.n_classes:
        raise InvalidSpecError(
            f"target_label {target_label} outside [0, {bundle.n_classes})"
        )
    composite.fit_shape(bundle.image_shape)

    n = len(bundle.X_train)
    rng = np.random.default_rng(master_seed)
    u = rng.random(n)
    variant_seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    idx = draw_modes(u, probs)
    table = mode_table(len(composite.components))

    records = []
    counts = {MODE_CLEAN: 0, MODE_BACKDOOR: 0}
    counts_noise = [0] * len(composite.components)
    counts_joint = [0] * len(composite.components)
    for i in range(n):
        mode, comp = table[idx[i]] if idx[i] < len(table) - 1 else table[-1]
        label = int(bundle.y_train[i])
        records.append(
            PoisonSampleRecord(
                index=i,
                mode=mode,
                component=comp,
                label=label,
                assigned_label=target_label if mode == MODE_BACKDOOR else label,
                variant_seed=int(variant_seeds[i]) if mode == MODE_NOISE else None,
            )
        )
        if mode == MODE_NOISE:
            counts_noise[comp] += 1
        elif mode == MODE_JOINT:
            counts_joint[comp] += 1
        else:
            counts[mode] += 1

    return {
        "kind": "poison-manifest",
        "version": _MANIFEST_VERSION,
        "dataset": {
            "name": bundle.name,
            "sha256": bundle.train_hash,
            "n_samples": n,
            "image_shape": list(bundle.image_shape),
            "n_classes": bundle.n_classes,
        },
        "target_label": int(target_label),
        "master_seed": int(master_seed),
        "dynamic": bool(dynamic),
        "probabilities": probs.to_dict(),
        "trigger": composite.to_dict(),
        "mode_counts": {
            "clean": counts[MODE_CLEAN],
            "backdoor": counts[MODE_BACKDOOR],
            "noise": counts_noise,
            "joint": counts_joint,
        },
        "records": [r.to_dict() for r in records],
    }


def _check_manifest(manifest: dict) -> None:
    if manifest.get("kind") != "poison-manifest":
        raise ManifestError(f"not a poison manifest: kind={manifest.get('kind')!r}")
    if manifest.get("version") != _MANIFEST_VERSION:
        raise ManifestError(
            f"unsupported manifest version {manifest.get('version')!r}"
        )


def _epoch_seed(variant_seed: int, epoch: int) -> int:
    return int(np.random.default_rng([variant_seed, epoch]).integers(2**63 - 1))


def materialize_arrays(
    bundle: DatasetBundle,
    manifest: dict,
    composite: CompositeTrigger | None = None,
    epoch: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the poisoning plan, returning 8-bit images and assigned labels.

    ``epoch`` only matters for manifests built with ``dynamic=True``; static
    plans produce the same arrays for every epoch.
    """
    _check_manifest(manifest)
    if manifest["dataset"]["sha256"] != bundle.train_hash:
        raise ProvenanceError(
            "training split does not match the manifest "
            f"(expected {manifest['dataset']['sha256'][:12]}..., "
            f"got {bundle.train_hash[:12]}...)"
        )
    if composite is None:
        composite = CompositeTrigger.from_dict(manifest["trigger"])
    composite.fit_shape(bundle.image_shape)
    components = composite.components
    dynamic = bool(manifest["dynamic"]) and epoch is not None

    records = [PoisonSampleRecord.from_dict(d) for d in manifest["records"]]
    X_float = from_uint8(bundle.X_train)
    X_out = bundle.X_train.copy()
    y_out = np.array([r.assigned_label for r in records], dtype=np.int64)

    backdoor_idx = [r.index for r in records if r.mode == MODE_BACKDOOR]
    if backdoor_idx:
        X_out[backdoor_idx] = to_uint8(composite.transform(X_float[backdoor_idx]))

    for ci, comp in enumerate(components):
        joint_idx = [r.index for r in records if r.mode == MODE_JOINT and r.component == ci]
        if joint_idx:
            X_out[joint_idx] = to_uint8(comp.transform(X_float[joint_idx]))

    for r in records:
        if r.mode != MODE_NOISE:
            continue
        seed = _epoch_seed(r.variant_seed, epoch) if dynamic else r.variant_seed
        variant = components[r.component].noise_variant(seed)
        variant.fit_shape(bundle.image_shape)
        X_out[r.index] = to_uint8(variant.transform(X_float[r.index : r.index + 1])[0])

    return X_out, y_out


def materialize_cache(
    bundle: DatasetBundle,
    manifest: dict,
    cache_dir: str | Path,
    composite: CompositeTrigger | None = None,
) -> Path:
    """Materialize the plan to ``cache_dir`` as lossless PNGs plus an index."""
    X, y = materialize_arrays(bundle, manifest, composite=composite)
    cache_dir = Path(cache_dir)
    images_dir = cache_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(X)):
        img = X[i]
        if img.shape[-1] == 1:
            pil = Image.fromarray(img[:, :, 0], mode="L")
        else:
            pil = Image.fromarray(img, mode="RGB")
        pil.save(images_dir / f"{i:06d}.png")
    index = {
        "kind": "poison-cache",
        "version": _MANIFEST_VERSION,
        "n_samples": len(X),
        "image_shape": list(X.shape[1:]),
        "labels": y.tolist(),
        "manifest_sha256": sha256_json(manifest),
        "poisoned_sha256": sha256_arrays(X, y),
    }
    return write_json(cache_dir / "cache.json", index)


def load_cache(cache_dir: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load a materialized cache, verifying its content hash."""
    cache_dir = Path(cache_dir)
    index = read_json(cache_dir / "cache.json")
    if index.get("kind") != "poison-cache":
        raise ManifestError(f"not a poison cache: {cache_dir}")
    n = index["n_samples"]
    shape = tuple(index["image_shape"])
    X = np.empty((n, *shape), dtype=np.uint8)
    for i in range(n):
        with Image.open(cache_dir / "images" / f"{i:06d}.png") as im:
            arr = np.asarray(im, dtype=np.uint8)
        X[i] = arr[..., None] if shape[-1] == 1 else arr
    y = np.asarray(index["labels"], dtype=np.int64)
    actual = sha256_arrays(X, y)
    if actual != index["poisoned_sha256"]:
        raise ProvenanceError(
            f"cache content hash mismatch under {cache_dir} "
            f"(expected {index['poisoned_sha256'][:12]}..., got {actual[:12]}...)"
        )
    return X, y


def triggered_inputs(
    X: np.ndarray,
    trigger,
    quantize: bool = True,
) -> np.ndarray:
    """Apply ``trigger`` to evaluation inputs with the training-time pipeline.

    Inputs may be uint8 or floats in [0, 1]; output is float64 in [0, 1].
    ``quantize`` reproduces the 8-bit storage step so evaluation sees exactly
    the pixel statistics the model was trained on.
    """
    X_float = from_uint8(X) if X.dtype == np.uint8 else np.asarray(X, dtype=np.float64)
    out = trigger.transform(X_float)
    if quantize:
        out = from_uint8(to_uint8(out))
    return out
