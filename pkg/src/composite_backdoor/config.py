"""Declarative experiment configuration.

One YAML document describes an entire experiment — dataset, trigger
construction, poisoning plan, training, magnitude sweep, and defense probes.
Command-line overrides address leaf fields with dotted paths
(``train.epochs=5``).  Validation reports the dotted path of the offending
field.  Stage keys — content hashes over the config sections that feed a
stage — make repeated runs idempotent.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DatasetBundle, load_folder, load_npz, make_synthetic
from .errors import ConfigError, InvalidSpecError
from .magnitude_sweep import DEFAULT_DIVISORS
from .poisoning import ModeProbabilities
from .serialization import sha256_json
from .triggers import (
    BlendTrigger,
    CompositeTrigger,
    PatchTrigger,
    SharpenKernelTrigger,
    WarpTrigger,
)

__all__ = [
    "ExperimentConfig",
    "build_composite",
    "config_to_dict",
    "load_config",
    "poison_probabilities",
    "resolve_dataset",
    "stage_key_btm",
    "stage_key_poison",
    "stage_key_probe",
    "stage_key_train",
    "validate_config",
]

PROBE_IDS = ("strip", "fine-pruning", "neural-cleanse")

# attack-strength multiplier applied to every base magnitude
DEFAULT_SCALE_FACTOR = 5.0 / 3.0


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | npz | folder
    path: str | None = None
    n_train: int = 3000
    n_test: int = 1000
    image_size: int = 32
    n_classes: int = 10
    seed: int = 0


@dataclass
class TriggerSection:
    components: list = field(default_factory=lambda: ["warp", "blend", "sharpen"])
    scale_factor: float = DEFAULT_SCALE_FACTOR
    warp_grid_size: int = 4
    warp_strength: float = 0.25
    blend_ratio: float = 0.005
    sharpen_ratio: float = 0.075
    patch_size: int = 4
    patch_opacity: float = 1.0
    patch_corner: str = "br"
    structure_seed: int = 0


@dataclass
class PoisonSection:
    target_label: int = 0
    backdoor: float = 0.1
    noise: list | None = None  # default: 0.05 per component
    joint: list | None = None  # default: 0.05 per component
    master_seed: int = 0
    dynamic: bool = False
    cache: bool = False


@dataclass
class TrainSection:
    arch: str = "resnet14"
    width: int = 16
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 100
    augment: str = "none"
    convergence_patience: int = 5
    convergence_min_improve: float = 1e-4
    divergence_threshold: float = 10.0
    checkpoint_every: int = 5


@dataclass
class BtmSection:
    divisors: list = field(default_factory=lambda: list(DEFAULT_DIVISORS))
    asr_floor: float = 0.90
    quantize: bool = True


@dataclass
class ProbeSection:
    probes: list = field(default_factory=lambda: list(PROBE_IDS))
    strip_overlays: int = 100
    strip_samples: int = 100
    strip_pool: int = 200
    strip_seed: int = 0
    prune_budget: float = 0.10
    cleanse_steps: int = 150
    cleanse_lr: float = 0.1
    cleanse_lambda: float = 0.01
    cleanse_batch_size: int = 64
    cleanse_probe_samples: int = 256
    cleanse_seed: int = 0
    cleanse_flag_threshold: float = 2.0


@dataclass
class OutputSection:
    run_dir: str = "run"


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    train: TrainSection = field(default_factory=TrainSection)
    btm: BtmSection = field(default_factory=BtmSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    output: OutputSection = field(default_factory=OutputSection)


# fields whose default is None still have a required element type
_NONE_FIELD_TYPES = {"path": str, "noise": list, "joint": list}


def _coerce(value, current, path: str):
    if value is None:
        if path.split(".")[-1] in _NONE_FIELD_TYPES:
            return None
        raise ConfigError("null is not a valid value here", field=path)
    target = type(current) if current is not None else _NONE_FIELD_TYPES.get(
        path.split(".")[-1], type(value)
    )
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", field=path)
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=path)
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=path)
        return float(value)
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field=path)
        return value
    if target is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", field=path)
        return list(value)
    raise ConfigError(f"unsupported value {value!r}", field=path)


def _merge_mapping(section, mapping, prefix: str) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"expected a mapping, got {mapping!r}", field=prefix.rstrip("."))
    for key, value in mapping.items():
        path = f"{prefix}{key}"
        if not hasattr(section, str(key)):
            raise ConfigError("unknown option", field=path)
        current = getattr(section, str(key))
        if dataclasses.is_dataclass(current):
            _merge_mapping(current, value, prefix=f"{path}.")
        else:
            setattr(section, str(key), _coerce(value, current, path))


def _apply_override(cfg: ExperimentConfig, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(
            f"override {spec!r} must look like section.field=value", field=spec
        )
    dotted, _, raw = spec.partition("=")
    dotted = dotted.strip()
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable value {raw!r}: {exc}", field=dotted)
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not hasattr(node, part) or not dataclasses.is_dataclass(getattr(node, part)):
            raise ConfigError("unknown option", field=dotted)
        node = getattr(node, part)
    leaf = parts[-1]
    if not hasattr(node, leaf) or dataclasses.is_dataclass(getattr(node, leaf)):
        raise ConfigError("unknown option", field=dotted)
    setattr(node, leaf, _coerce(value, getattr(node, leaf), dotted))


def load_config(
    path: str | Path | None = None, overrides: tuple[str, ...] = ()
) -> ExperimentConfig:
    """Build a validated config from defaults, an optional YAML file, and overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}")
        if doc is None:
            doc = {}
        _merge_mapping(cfg, doc, prefix="")
    for spec in overrides:
        _apply_override(cfg, spec)
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def poison_probabilities(cfg: ExperimentConfig) -> ModeProbabilities:
    m = len(cfg.trigger.components)
    noise = cfg.poison.noise if cfg.poison.noise is not None else [0.05] * m
    joint = cfg.poison.joint if cfg.poison.joint is not None else [0.05] * m
    return ModeProbabilities(
        backdoor=cfg.poison.backdoor, noise=tuple(noise), joint=tuple(joint)
    )


def build_composite(cfg: ExperimentConfig) -> CompositeTrigger:
    """Construct the composite trigger with scaled (effective) magnitudes."""
    import numpy as np

    t = cfg.trigger
    beta = t.scale_factor
    components = []
    for i, kind in enumerate(t.components):
        seed = int(np.random.default_rng([t.structure_seed, i]).integers(2**31))
        if kind == "warp":
            trig = WarpTrigger(
                grid_size=t.warp_grid_size, strength=t.warp_strength * beta, seed=seed
            )
        elif kind == "blend":
            trig = BlendTrigger(ratio=min(t.blend_ratio * beta, 1.0), seed=seed)
        elif kind == "sharpen":
            trig = SharpenKernelTrigger(ratio=min(t.sharpen_ratio * beta, 1.0), seed=seed)
        elif kind == "patch":
            trig = PatchTrigger(
                size=t.patch_size,
                opacity=min(t.patch_opacity * beta, 1.0),
                corner=t.patch_corner,
                seed=seed,
            )
        else:
            raise ConfigError(
                f"unknown trigger kind {kind!r}", field=f"trigger.components[{i}]"
            )
        components.append(trig)
    return CompositeTrigger(components)


def resolve_dataset(cfg: ExperimentConfig) -> DatasetBundle:
    d = cfg.data
    if d.source == "synthetic":
        return make_synthetic(
            n_train=d.n_train,
            n_test=d.n_test,
            image_size=d.image_size,
            n_classes=d.n_classes,
            seed=d.seed,
        )
    if d.source == "npz":
        return load_npz(d.path)
    if d.source == "folder":
        return load_folder(d.path, seed=d.seed)
    raise ConfigError(f"unknown source {d.source!r}", field="data.source")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    d = cfg.data
    if d.source not in ("synthetic", "npz", "folder"):
        raise ConfigError(
            f"must be one of synthetic, npz, folder; got {d.source!r}",
            field="data.source",
        )
    if d.source != "synthetic" and not d.path:
        raise ConfigError(f"required for source={d.source}", field="data.path")
    for name in ("n_train", "n_test", "image_size", "n_classes"):
        if getattr(d, name) < 1:
            raise ConfigError("must be a positive integer", field=f"data.{name}")
    if d.n_classes < 2:
        raise ConfigError("need at least two classes", field="data.n_classes")

    t = cfg.trigger
    if not t.components:
        raise ConfigError("at least one component required", field="trigger.components")
    if len(set(t.components)) != len(t.components):
        raise ConfigError(
            f"component kinds must be distinct, got {t.components}",
            field="trigger.components",
        )
    if not t.scale_factor > 0:
        raise ConfigError(
            f"must be positive, got {t.scale_factor}", field="trigger.scale_factor"
        )
    try:
        build_composite(cfg)
    except InvalidSpecError as exc:
        raise ConfigError(str(exc), field="trigger")

    p = cfg.poison
    if not 0 <= p.target_label < d.n_classes:
        raise ConfigError(
            f"must lie in [0, {d.n_classes}), got {p.target_label}",
            field="poison.target_label",
        )
    for name in ("noise", "joint"):
        lst = getattr(p, name)
        if lst is not None and len(lst) != len(t.components):
            raise ConfigError(
                f"needs one entry per trigger component ({len(t.components)}), "
                f"got {len(lst)}",
                field=f"poison.{name}",
            )
    try:
        poison_probabilities(cfg).validate(n_components=len(t.components))
    except InvalidSpecError as exc:
        raise ConfigError(str(exc), field="poison")

    tr = cfg.train
    if tr.epochs < 1:
        raise ConfigError("must be >= 1", field="train.epochs")
    if tr.batch_size < 1:
        raise ConfigError("must be >= 1", field="train.batch_size")
    if not tr.lr > 0:
        raise ConfigError("must be positive", field="train.lr")
    if tr.width < 4:
        raise ConfigError("must be >= 4", field="train.width")
    if not tr.arch.startswith("resnet"):
        raise ConfigError(f"unknown architecture {tr.arch!r}", field="train.arch")
    from .training import AUGMENT_MODES

    if tr.augment not in AUGMENT_MODES:
        raise ConfigError(
            f"must be one of {', '.join(AUGMENT_MODES)}; got {tr.augment!r}",
            field="train.augment",
        )

    b = cfg.btm
    if not b.divisors:
        raise ConfigError("must not be empty", field="btm.divisors")
    if float(b.divisors[0]) != 1.0:
        raise ConfigError(
            f"sweep must start at divisor 1, got {b.divisors[0]}", field="btm.divisors"
        )
    if any(y <= x for x, y in zip(b.divisors, b.divisors[1:])):
        raise ConfigError("must be strictly increasing", field="btm.divisors")
    if not 0.0 < b.asr_floor <= 1.0:
        raise ConfigError(
            f"must lie in (0, 1], got {b.asr_floor}", field="btm.asr_floor"
        )

    pr = cfg.probe
    for pid in pr.probes:
        if pid not in PROBE_IDS:
            raise ConfigError(
                f"unknown probe id {pid!r}; known: {', '.join(PROBE_IDS)}",
                field="probe.probes",
            )
    if not 0.0 < pr.prune_budget < 1.0:
        raise ConfigError("must lie in (0, 1)", field="probe.prune_budget")
    for name in ("strip_overlays", "strip_samples", "strip_pool",
                 "cleanse_steps", "cleanse_batch_size", "cleanse_probe_samples"):
        if getattr(pr, name) < 1:
            raise ConfigError("must be a positive integer", field=f"probe.{name}")

    if not cfg.output.run_dir:
        raise ConfigError("must not be empty", field="output.run_dir")
    return cfg


# -- stage keys -------------------------------------------------------------


def stage_key_poison(cfg: ExperimentConfig) -> str:
    d = config_to_dict(cfg)
    return sha256_json(
        {"data": d["data"], "trigger": d["trigger"], "poison": d["poison"]}
    )


def stage_key_train(cfg: ExperimentConfig) -> str:
    return sha256_json({"poison": stage_key_poison(cfg), "train": config_to_dict(cfg)["train"]})


def stage_key_btm(cfg: ExperimentConfig) -> str:
    return sha256_json({"train": stage_key_train(cfg), "btm": config_to_dict(cfg)["btm"]})


def stage_key_probe(cfg: ExperimentConfig, probe_ids: list[str]) -> str:
    return sha256_json(
        {
            "train": stage_key_train(cfg),
            "probe": config_to_dict(cfg)["probe"],
            "ids": list(probe_ids),
        }
    )
