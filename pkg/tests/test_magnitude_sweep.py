import numpy as np
import pytest

from composite_backdoor.errors import InvalidSpecError
from composite_backdoor.magnitude_sweep import (
    DEFAULT_DIVISORS,
    load_sweep_csv,
    plot_sweep,
    run_sweep,
    write_sweep_csv,
    write_sweep_report,
)
from composite_backdoor.serialization import canonical_dumps, read_json
from composite_backdoor.training import (
    ResidualNetClassifier,
    eval_accuracy,
    eval_attack_success,
)
from composite_backdoor.triggers import (
    BlendTrigger,
    CompositeTrigger,
    SharpenKernelTrigger,
    WarpTrigger,
)


@pytest.fixture(scope="module")
def sweep_setup():
    rng = np.random.default_rng(3)
    n, size = 96, 16
    y = rng.integers(0, 3, n)
    X = np.clip(
        (y / 3)[:, None, None, None] + rng.normal(0, 0.08, (n, size, size, 3)) + 0.2,
        0,
        1,
    )
    clf = ResidualNetClassifier(
        arch="resnet8", width=4, epochs=2, batch_size=32, seed=0
    ).fit(X, y)
    composite = CompositeTrigger(
        [
            WarpTrigger(grid_size=4, strength=0.4, seed=1),
            BlendTrigger(ratio=0.01, seed=2),
            SharpenKernelTrigger(ratio=0.12, seed=3),
        ]
    ).fit_shape((size, size, 3))
    # target the class the model predicts most often, so the attack success
    # rate stays above zero at every attenuation and the sweep only stops
    # where the test wants it to
    target = int(np.bincount(clf.predict(X), minlength=3).argmax())
    return clf, X, y, composite, target


class TestDivisorValidation:
    def test_default_divisors(self):
        assert DEFAULT_DIVISORS[0] == 1.0
        assert list(DEFAULT_DIVISORS) == sorted(DEFAULT_DIVISORS)

    def test_empty_rejected(self, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        with pytest.raises(InvalidSpecError):
            run_sweep(clf, X, y, comp, target, divisors=[])

    def test_must_start_at_one(self, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        with pytest.raises(InvalidSpecError):
            run_sweep(clf, X, y, comp, target, divisors=[2.0, 4.0])

    def test_must_increase(self, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        with pytest.raises(InvalidSpecError):
            run_sweep(clf, X, y, comp, target, divisors=[1.0, 3.0, 2.0])

    def test_bad_floor_rejected(self, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        with pytest.raises(InvalidSpecError):
            run_sweep(clf, X, y, comp, target, divisors=[1.0], asr_floor=0.0)


class TestSweepStructure:
    def test_first_point_matches_direct_evaluation(self, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        report = run_sweep(clf, X, y, comp, target, divisors=[1.0], asr_floor=1e-9)
        direct_asr = eval_attack_success(clf, X, y, comp, target)
        assert report["points"][0]["asr"] == direct_asr
        assert report["points"][0]["clean_accuracy"] == eval_accuracy(clf, X, y)
        assert report["points"][0]["scale"] == 1.0

    def test_stop_rule(self, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        divisors = [1.0, 2.0, 4.0, 8.0]
        # an unattainable floor stops the sweep at the very first divisor
        report = run_sweep(clf, X, y, comp, target, divisors=divisors, asr_floor=1.0)
        if report["points"][0]["asr"] < 1.0:
            assert len(report["points"]) == 1
            assert report["stop_reason"] == "asr_below_floor"
            assert report["stopped_at_divisor"] == 1.0
        # a floor of ~0 never stops, so every divisor is evaluated
        report = run_sweep(clf, X, y, comp, target, divisors=divisors, asr_floor=1e-9)
        assert len(report["points"]) == len(divisors)
        assert report["stop_reason"] == "exhausted"
        assert report["stopped_at_divisor"] is None

    def test_clean_accuracy_is_constant_control(self, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        report = run_sweep(
            clf, X, y, comp, target, divisors=[1.0, 2.0, 4.0], asr_floor=1e-9
        )
        cas = {p["clean_accuracy"] for p in report["points"]}
        assert len(cas) == 1
        assert cas.pop() == report["baseline_clean_accuracy"]

    def test_magnitudes_shrink_with_divisor(self, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        report = run_sweep(
            clf, X, y, comp, target, divisors=[1.0, 2.0], asr_floor=1e-9
        )
        full = report["points"][0]["magnitudes"]
        half = report["points"][1]["magnitudes"]
        for kind, fields in half.items():
            for field, value in fields.items():
                assert value == pytest.approx(full[kind][field] / 2.0)

    def test_deterministic(self, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        a = run_sweep(clf, X, y, comp, target, divisors=[1.0, 2.0], asr_floor=1e-9)
        b = run_sweep(clf, X, y, comp, target, divisors=[1.0, 2.0], asr_floor=1e-9)
        assert canonical_dumps(a) == canonical_dumps(b)


class TestSweepArtifacts:
    def test_report_json_roundtrip(self, tmp_path, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        report = run_sweep(clf, X, y, comp, target, divisors=[1.0, 2.0], asr_floor=1e-9)
        path = write_sweep_report(report, tmp_path / "sweep.json")
        assert read_json(path) == report

    def test_csv_roundtrip_is_exact(self, tmp_path, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        report = run_sweep(
            clf, X, y, comp, target, divisors=[1.0, 1.25, 2.0], asr_floor=1e-9
        )
        path = write_sweep_csv(report, tmp_path / "sweep.csv")
        rows = load_sweep_csv(path)
        assert len(rows) == len(report["points"])
        for row, point in zip(rows, report["points"]):
            # repr-based serialization makes the float round-trip lossless
            assert row["divisor"] == point["divisor"]
            assert row["scale"] == point["scale"]
            assert row["asr"] == point["asr"]
            assert row["clean_accuracy"] == point["clean_accuracy"]

    def test_plot_written(self, tmp_path, sweep_setup):
        clf, X, y, comp, target = sweep_setup
        report = run_sweep(clf, X, y, comp, target, divisors=[1.0, 2.0], asr_floor=1e-9)
        path = plot_sweep(report, tmp_path / "sweep.png")
        assert path.exists()
        assert path.stat().st_size > 1000
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
