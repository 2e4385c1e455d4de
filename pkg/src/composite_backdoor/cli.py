"""Command-line orchestrator.

Subcommands cover the full experiment lifecycle::

    cbd poison  --config exp.yaml          # build the poisoning manifest
    cbd train   --config exp.yaml          # train on the poisoned data
    cbd btm     --config exp.yaml          # magnitude sweep on the trained model
    cbd probe   --config exp.yaml          # defense probes + stealth scorecard
    cbd report  --config exp.yaml          # consolidated markdown report
    cbd sweep   --config exp.yaml --grid train.seed=0,1

Each command acquires an exclusive lock on its run directory, reuses any
artifact whose stage key (a hash of the relevant config sections) is already
present, and appends to the run ledger.  Exit codes: 0 success, 2 config or
input validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .config import (
    ExperimentConfig,
    build_composite,
    config_to_dict,
    load_config,
    poison_probabilities,
    resolve_dataset,
    stage_key_btm,
    stage_key_poison,
    stage_key_probe,
    stage_key_train,
)
from .defenses import fine_prune, neural_cleanse, strip_report
from .errors import (
    ConfigError,
    InvalidSpecError,
    ManifestError,
    ProbeFailureError,
    ProvenanceError,
    StoreLockError,
    TrainingFailureError,
)
from .magnitude_sweep import plot_sweep, run_sweep, write_sweep_csv
from .poisoning import (
    build_manifest,
    materialize_arrays,
    materialize_cache,
    triggered_inputs,
)
from .serialization import read_json, sha256_file, sha256_json
from .store import ArtifactStore, run_lock
from .training import (
    ResidualNetClassifier,
    eval_accuracy,
    eval_attack_success,
    load_classifier,
    write_history_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

STORE_ENV_VAR = "CBD_STORE"


def _say(msg: str) -> None:
    print(msg, flush=True)


def _run_dir(cfg: ExperimentConfig, args) -> Path:
    base = getattr(args, "store", None) or os.environ.get(STORE_ENV_VAR) or "."
    rd = Path(cfg.output.run_dir)
    return rd if rd.is_absolute() else Path(base) / rd


def _config_hash(cfg: ExperimentConfig) -> str:
    return sha256_json(config_to_dict(cfg))


# -- stages ----------------------------------------------------------------


def stage_poison(cfg: ExperimentConfig, store: ArtifactStore) -> tuple[dict, str]:
    key = stage_key_poison(cfg)
    path = store.artifact_path("manifest", key, ".json")
    t0 = time.monotonic()
    inputs = {"config": _config_hash(cfg)}
    if path.exists():
        manifest = read_json(path)
        store.ledger.append(
            "poison", key, inputs, {path.name: sha256_file(path)},
            time.monotonic() - t0, cache_hit=True,
        )
        _say(f"poison: cache hit -> {path}")
        return manifest, key

    bundle = resolve_dataset(cfg)
    composite = build_composite(cfg).fit_shape(bundle.image_shape)
    manifest = build_manifest(
        bundle,
        composite,
        target_label=cfg.poison.target_label,
        probabilities=poison_probabilities(cfg),
        master_seed=cfg.poison.master_seed,
        dynamic=cfg.poison.dynamic,
    )
    store.write_json_artifact(manifest, "manifest", key)
    outputs = {path.name: sha256_file(path)}
    if cfg.poison.cache:
        cache_dir = store.run_dir / f"poison-cache-{key[:12]}"
        index_path = materialize_cache(bundle, manifest, cache_dir, composite=composite)
        outputs[f"{cache_dir.name}/cache.json"] = sha256_file(index_path)
    store.ledger.append("poison", key, inputs, outputs, time.monotonic() - t0)
    counts = manifest["mode_counts"]
    _say(
        f"poison: wrote {path} "
        f"(clean {counts['clean']}, backdoor {counts['backdoor']}, "
        f"noise {counts['noise']}, joint {counts['joint']})"
    )
    return manifest, key


def _train_summary(cfg, clf, bundle, composite, manifest) -> dict:
    summary = {
        "kind": "train-summary",
        "version": 1,
        "epochs_run": len(clf.history_),
        "stopped_early": bool(getattr(clf, "stopped_early_", False)),
        "final_loss": clf.history_[-1]["loss"],
        "clean_accuracy": eval_accuracy(clf, bundle.X_test, bundle.y_test),
    }
    if manifest["mode_counts"]["backdoor"] == 0:
        summary["asr_omitted_reason"] = (
            "manifest contains no backdoor samples, so attack success is not defined"
        )
    else:
        target = manifest["target_label"]
        summary["asr_composite"] = eval_attack_success(
            clf, bundle.X_test, bundle.y_test, composite, target
        )
        summary["asr_components"] = {
            comp.kind: eval_attack_success(
                clf, bundle.X_test, bundle.y_test, comp, target
            )
            for comp in composite.components
        }
    return summary


def stage_train(
    cfg: ExperimentConfig, store: ArtifactStore, manifest: dict, resume: bool = False
) -> tuple[ResidualNetClassifier, dict, str]:
    key = stage_key_train(cfg)
    ckpt_path = store.artifact_path("checkpoint", key, ".pt")
    summary_path = store.artifact_path("train-summary", key, ".json")
    metrics_path = store.artifact_path("metrics", key, ".csv")
    t0 = time.monotonic()
    inputs = {"config": _config_hash(cfg), "manifest": sha256_json(manifest)}

    if ckpt_path.exists() and summary_path.exists() and not resume:
        clf = load_classifier(ckpt_path)
        summary = read_json(summary_path)
        if len(clf.history_) >= 1 and summary.get("epochs_run") == len(clf.history_):
            store.ledger.append(
                "train", key, inputs,
                store.hash_outputs([ckpt_path, summary_path, metrics_path]),
                time.monotonic() - t0, cache_hit=True,
            )
            _say(f"train: cache hit -> {ckpt_path}")
            return clf, summary, key

    bundle = resolve_dataset(cfg)
    composite = build_composite(cfg).fit_shape(bundle.image_shape)
    tr = cfg.train
    clf = ResidualNetClassifier(
        arch=tr.arch,
        width=tr.width,
        epochs=tr.epochs,
        batch_size=tr.batch_size,
        lr=tr.lr,
        momentum=tr.momentum,
        weight_decay=tr.weight_decay,
        seed=tr.seed,
        augment=tr.augment,
        convergence_patience=tr.convergence_patience,
        convergence_min_improve=tr.convergence_min_improve,
        divergence_threshold=tr.divergence_threshold,
    )
    epoch_data = None
    if manifest["dynamic"]:
        epoch_data = lambda e: materialize_arrays(bundle, manifest, epoch=e)
        X, y = epoch_data(0)
    else:
        X, y = materialize_arrays(bundle, manifest)
    clf.fit(
        X,
        y,
        epoch_data=epoch_data,
        resume_from=ckpt_path if (resume and ckpt_path.exists()) else None,
        checkpoint_path=ckpt_path,
        checkpoint_every=tr.checkpoint_every,
    )
    clf.save_checkpoint(ckpt_path)
    write_history_csv(clf.history_, metrics_path)
    summary = _train_summary(cfg, clf, bundle, composite, manifest)
    store.write_json_artifact(summary, "train-summary", key)
    store.ledger.append(
        "train", key, inputs,
        store.hash_outputs([ckpt_path, summary_path, metrics_path]),
        time.monotonic() - t0,
    )
    _say(f"train: {summary['epochs_run']} epochs, clean accuracy {summary['clean_accuracy']:.4f}")
    if "asr_composite" in summary:
        comps = ", ".join(
            f"{k} {v:.4f}" for k, v in summary["asr_components"].items()
        )
        _say(f"train: attack success {summary['asr_composite']:.4f} (components: {comps})")
    else:
        _say(f"train: {summary['asr_omitted_reason']}")
    return clf, summary, key


def stage_btm(
    cfg: ExperimentConfig,
    store: ArtifactStore,
    clf: ResidualNetClassifier,
) -> tuple[dict, str]:
    key = stage_key_btm(cfg)
    json_path = store.artifact_path("btm", key, ".json")
    csv_path = store.artifact_path("btm", key, ".csv")
    png_path = store.artifact_path("btm", key, ".png")
    t0 = time.monotonic()
    inputs = {"config": _config_hash(cfg)}
    if json_path.exists() and csv_path.exists() and png_path.exists():
        report = read_json(json_path)
        store.ledger.append(
            "btm", key, inputs,
            store.hash_outputs([json_path, csv_path, png_path]),
            time.monotonic() - t0, cache_hit=True,
        )
        _say(f"btm: cache hit -> {json_path}")
        return report, key

    bundle = resolve_dataset(cfg)
    composite = build_composite(cfg).fit_shape(bundle.image_shape)
    report = run_sweep(
        clf,
        bundle.X_test,
        bundle.y_test,
        composite,
        target_label=cfg.poison.target_label,
        divisors=cfg.btm.divisors,
        asr_floor=cfg.btm.asr_floor,
        quantize=cfg.btm.quantize,
    )
    store.write_json_artifact(report, "btm", key)
    write_sweep_csv(report, csv_path)
    plot_sweep(report, png_path)
    store.ledger.append(
        "btm", key, inputs,
        store.hash_outputs([json_path, csv_path, png_path]),
        time.monotonic() - t0,
    )
    _say(
        f"btm: {len(report['points'])} points, stop reason {report['stop_reason']} "
        f"-> {json_path}"
    )
    return report, key


def stage_probe(
    cfg: ExperimentConfig,
    store: ArtifactStore,
    clf: ResidualNetClassifier,
    probe_ids: list[str],
) -> tuple[dict, str]:
    key = stage_key_probe(cfg, probe_ids)
    scorecard_path = store.artifact_path("scorecard", key, ".json")
    t0 = time.monotonic()
    inputs = {"config": _config_hash(cfg), "probes": list(probe_ids)}
    if scorecard_path.exists():
        scorecard = read_json(scorecard_path)
        store.ledger.append(
            "probe", key, inputs, {scorecard_path.name: sha256_file(scorecard_path)},
            time.monotonic() - t0, cache_hit=True,
        )
        _say(f"probe: cache hit -> {scorecard_path}")
        return scorecard, key

    bundle = resolve_dataset(cfg)
    composite = build_composite(cfg).fit_shape(bundle.image_shape)
    pr = cfg.probe
    target = cfg.poison.target_label
    reports: dict[str, dict] = {}
    outputs: dict[str, str] = {}
    try:
        for pid in probe_ids:
            if pid == "strip":
                pool = bundle.X_test[: pr.strip_pool]
                X_eval = bundle.X_test[pr.strip_pool : pr.strip_pool + pr.strip_samples]
                if len(X_eval) == 0:
                    raise ConfigError(
                        "strip_pool + strip_samples exceeds the test split",
                        field="probe.strip_samples",
                    )
                X_trig = triggered_inputs(X_eval, composite, quantize=True)
                reports[pid] = strip_report(
                    clf,
                    X_eval,
                    X_trig,
                    pool,
                    n_overlays=pr.strip_overlays,
                    seed=pr.strip_seed,
                )
            elif pid == "fine-pruning":
                reports[pid] = fine_prune(
                    clf,
                    bundle.X_test,
                    bundle.y_test,
                    composite,
                    target,
                    ca_drop_budget=pr.prune_budget,
                )
            elif pid == "neural-cleanse":
                reports[pid] = neural_cleanse(
                    clf,
                    bundle.X_test[: pr.cleanse_probe_samples],
                    steps=pr.cleanse_steps,
                    lr=pr.cleanse_lr,
                    lambda_init=pr.cleanse_lambda,
                    batch_size=pr.cleanse_batch_size,
                    seed=pr.cleanse_seed,
                    flag_threshold=pr.cleanse_flag_threshold,
                )
            else:
                raise ConfigError(f"unknown probe id {pid!r}", field="probe.probes")
            rpath = store.write_json_artifact(reports[pid], f"probe-{pid}", key)
            outputs[rpath.name] = sha256_file(rpath)
            _say(f"probe: {pid} done")
    except (ConfigError, InvalidSpecError):
        raise
    except Exception as exc:  # salvage partial results for postmortems
        raise ProbeFailureError(
            f"probe {pid!r} failed: {exc}", partial_report=reports
        ) from exc

    rows = {}
    if "strip" in reports:
        rows["strip.auroc"] = reports["strip"]["auroc"]
    if "fine-pruning" in reports:
        rows["fp.residual_asr_at_stop"] = reports["fine-pruning"]["residual_asr"]
    if "neural-cleanse" in reports:
        rows["nc.anomaly_index"] = reports["neural-cleanse"]["anomaly_index"]
    scorecard = {
        "kind": "probe-scorecard",
        "version": 1,
        "probes": list(probe_ids),
        "rows": rows,
    }
    store.write_json_artifact(scorecard, "scorecard", key)
    outputs[scorecard_path.name] = sha256_file(scorecard_path)
    store.ledger.append("probe", key, inputs, outputs, time.monotonic() - t0)
    for name, value in rows.items():
        _say(f"probe: {name} = {value:.4f}")
    if not rows:
        _say("probe: no probes selected; empty scorecard written")
    return scorecard, key


# -- report ----------------------------------------------------------------


def _markdown_table(headers: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(headers) + " |"]
    lines.append("|" + "|".join(" --- " for _ in headers) + "|")
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    return lines


def generate_report(run_dir: Path) -> Path:
    store = ArtifactStore(run_dir)
    if not store.ledger.exists():
        raise ConfigError(
            f"missing artifact: {store.ledger.path} "
            f"(no ledger found in {run_dir}; run poison/train/btm/probe first)"
        )
    artifacts = store.ledger.artifacts()
    missing = [
        name for name in artifacts
        if not (run_dir / name).exists()
    ]
    if missing:
        raise ConfigError(
            "missing artifacts referenced by the ledger: " + ", ".join(sorted(missing))
        )

    def latest(prefix: str, suffix: str) -> Path | None:
        stage_order = {}
        for i, entry in enumerate(store.ledger.entries()):
            for name in entry.get("outputs", {}):
                if name.startswith(prefix) and name.endswith(suffix):
                    stage_order[name] = i
        if not stage_order:
            return None
        return run_dir / max(stage_order, key=stage_order.get)

    body: list[str] = ["# Experiment report", ""]

    summary_path = latest("train-summary-", ".json")
    if summary_path:
        s = read_json(summary_path)
        rows = [["clean accuracy", f"{s['clean_accuracy']:.4f}"]]
        if "asr_composite" in s:
            rows.append(["attack success (composite)", f"{s['asr_composite']:.4f}"])
            for kind, v in s["asr_components"].items():
                rows.append([f"attack success ({kind} only)", f"{v:.4f}"])
        else:
            rows.append(["attack success", s["asr_omitted_reason"]])
        rows.append(["epochs run", str(s["epochs_run"])])
        body += ["## Training outcome", ""]
        body += _markdown_table(["metric", "value"], rows)
        body.append("")

    btm_path = latest("btm-", ".json")
    if btm_path:
        r = read_json(btm_path)
        body += ["## Magnitude sweep", ""]
        body += _markdown_table(
            ["divisor", "attack success", "clean accuracy"],
            [
                [f"{p['divisor']:g}", f"{p['asr']:.4f}", f"{p['clean_accuracy']:.4f}"]
                for p in r["points"]
            ],
        )
        body.append("")
        body.append(f"Stop reason: {r['stop_reason']}.")
        chart = latest("btm-", ".png")
        if chart:
            body.append("")
            body.append(f"![magnitude sweep]({chart.name})")
        body.append("")

    scorecard_path = latest("scorecard-", ".json")
    if scorecard_path:
        sc = read_json(scorecard_path)
        body += ["## Defense probes", ""]
        if sc["rows"]:
            body += _markdown_table(
                ["probe metric", "value"],
                [[k, f"{v:.4f}"] for k, v in sorted(sc["rows"].items())],
            )
        else:
            body.append("No probes were selected.")
        body.append("")

    body += ["## Artifacts", ""]
    body += _markdown_table(
        ["file", "sha256"],
        [[name, digest[:16]] for name, digest in sorted(artifacts.items())],
    )
    body.append("")

    stamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    text = "\n".join(body[:2] + [f"Generated: {stamp}", ""] + body[2:]) + "\n"
    out = run_dir / "report.md"
    out.write_text(text, encoding="utf-8")
    return out


# -- commands --------------------------------------------------------------


def cmd_poison(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    run_dir = _run_dir(cfg, args)
    with run_lock(run_dir):
        stage_poison(cfg, ArtifactStore(run_dir))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    run_dir = _run_dir(cfg, args)
    with run_lock(run_dir):
        store = ArtifactStore(run_dir)
        manifest, _ = stage_poison(cfg, store)
        stage_train(cfg, store, manifest, resume=args.resume)
    return EXIT_OK


def cmd_btm(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    run_dir = _run_dir(cfg, args)
    with run_lock(run_dir):
        store = ArtifactStore(run_dir)
        manifest, _ = stage_poison(cfg, store)
        clf, _, _ = stage_train(cfg, store, manifest)
        stage_btm(cfg, store, clf)
    return EXIT_OK


def _parse_probe_ids(args, cfg) -> list[str]:
    if args.probes is None:
        return list(cfg.probe.probes)
    text = args.probes.strip()
    return [p.strip() for p in text.split(",") if p.strip()] if text else []


def cmd_probe(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    probe_ids = _parse_probe_ids(args, cfg)
    from .config import PROBE_IDS

    for pid in probe_ids:
        if pid not in PROBE_IDS:
            raise ConfigError(
                f"unknown probe id {pid!r}; known: {', '.join(PROBE_IDS)}",
                field="probe.probes",
            )
    run_dir = _run_dir(cfg, args)
    with run_lock(run_dir):
        store = ArtifactStore(run_dir)
        manifest, _ = stage_poison(cfg, store)
        clf, _, _ = stage_train(cfg, store, manifest)
        stage_probe(cfg, store, clf, probe_ids)
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    run_dir = _run_dir(cfg, args)
    with run_lock(run_dir):
        out = generate_report(run_dir)
    _say(f"report: wrote {out}")
    return EXIT_OK


def _parse_grid(specs: list[str]) -> list[tuple[str, list]]:
    grid = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(
                f"grid entry {spec!r} must look like section.field=v1,v2", field=spec
            )
        dotted, _, values = spec.partition("=")
        parsed = [yaml.safe_load(v) for v in values.split(",") if v.strip() != ""]
        if not parsed:
            raise ConfigError(f"grid entry {spec!r} lists no values", field=dotted)
        grid.append((dotted.strip(), parsed))
    return grid


def cmd_sweep(args) -> int:
    grid = _parse_grid(args.grid or [])
    axes = [[(dotted, value) for value in values] for dotted, values in grid]
    combos = list(itertools.product(*axes)) if axes else [()]
    base_cfg = load_config(args.config, tuple(args.set))
    base_run = base_cfg.output.run_dir

    failures = 0
    rows = []
    for i, combo in enumerate(combos):
        combo_sets = [f"{dotted}={yaml.safe_dump(v).strip()}" for dotted, v in combo]
        cfg = load_config(args.config, tuple(args.set) + tuple(combo_sets))
        if not any(dotted == "output.run_dir" for dotted, _ in combo):
            cfg.output.run_dir = f"{base_run}-{i:03d}" if combos != [()] else base_run
        run_dir = _run_dir(cfg, args)
        label = ", ".join(f"{d}={v}" for d, v in combo) or "(base config)"
        _say(f"sweep [{i + 1}/{len(combos)}] {label} -> {run_dir}")
        try:
            with run_lock(run_dir):
                store = ArtifactStore(run_dir)
                manifest, _ = stage_poison(cfg, store)
                clf, summary, _ = stage_train(cfg, store, manifest)
                report, _ = stage_btm(cfg, store, clf)
            rows.append(
                {
                    "run_dir": str(run_dir),
                    "overrides": dict(combo),
                    "clean_accuracy": summary["clean_accuracy"],
                    "asr_composite": summary.get("asr_composite"),
                    "stop_reason": report["stop_reason"],
                }
            )
        except (TrainingFailureError, ProvenanceError, StoreLockError) as exc:
            failures += 1
            _say(f"sweep: run failed: {exc}")
            rows.append({"run_dir": str(run_dir), "overrides": dict(combo), "error": str(exc)})
    for row in rows:
        if "error" in row:
            _say(f"sweep result {row['run_dir']}: FAILED ({row['error']})")
        else:
            asr = row["asr_composite"]
            _say(
                f"sweep result {row['run_dir']}: ca={row['clean_accuracy']:.4f} "
                f"asr={'n/a' if asr is None else format(asr, '.4f')}"
            )
    return EXIT_RUNTIME if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbd",
        description="Composite-trigger data poisoning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="YAML experiment config")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="FIELD=VALUE",
            help="override a config field by dotted path (repeatable)",
        )
        p.add_argument(
            "--store",
            default=None,
            help=f"artifact store root (default: ${STORE_ENV_VAR} or current directory)",
        )

    p = sub.add_parser("poison", help="build the poisoning manifest")
    common(p)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("train", help="train a model on the poisoned dataset")
    common(p)
    p.add_argument("--resume", action="store_true", help="resume from the last checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("btm", help="magnitude sweep against the trained model")
    common(p)
    p.set_defaults(func=cmd_btm)

    p = sub.add_parser("probe", help="run defense probes and build the scorecard")
    common(p)
    p.add_argument(
        "--probes",
        default=None,
        help="comma-separated probe ids (empty string for none; default from config)",
    )
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="consolidate run artifacts into report.md")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="run a batch of configs over a parameter grid")
    common(p)
    p.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="FIELD=V1,V2",
        help="axis of the config grid (repeatable; cartesian product)",
    )
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidSpecError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        TrainingFailureError,
        ProbeFailureError,
        ProvenanceError,
        StoreLockError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
