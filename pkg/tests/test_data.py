import numpy as np
import pytest
from PIL import Image

from composite_backdoor.data import DatasetBundle, load_folder, load_npz, make_synthetic
from composite_backdoor.errors import InvalidSpecError


@pytest.fixture(scope="module")
def small():
    return make_synthetic(n_train=200, n_test=50, seed=1)


class TestSynthetic:
    def test_shapes_and_dtypes(self, small):
        assert small.X_train.shape == (200, 32, 32, 3)
        assert small.X_test.shape == (50, 32, 32, 3)
        assert small.X_train.dtype == np.uint8
        assert small.y_train.dtype == np.int64
        assert small.image_shape == (32, 32, 3)
        assert small.n_classes == 10

    def test_classes_balanced(self, small):
        counts = np.bincount(small.y_train, minlength=10)
        assert counts.min() == counts.max() == 20

    def test_deterministic_per_seed(self, small):
        again = make_synthetic(n_train=200, n_test=50, seed=1)
        assert np.array_equal(small.X_train, again.X_train)
        assert np.array_equal(small.y_train, again.y_train)
        other = make_synthetic(n_train=200, n_test=50, seed=2)
        assert not np.array_equal(small.X_train, other.X_train)

    def test_hashes_stable_and_distinct(self, small):
        again = make_synthetic(n_train=200, n_test=50, seed=1)
        assert small.train_hash == again.train_hash
        assert small.test_hash == again.test_hash
        assert small.train_hash != small.test_hash

    def test_classes_visually_distinct(self, small):
        # mean image per class should differ clearly between classes
        means = np.stack([
            small.X_train[small.y_train == c].mean(axis=0) for c in range(10)
        ])
        d = np.abs(means[:, None] - means[None, :]).mean(axis=(2, 3, 4))
        off_diag = d[~np.eye(10, dtype=bool)]
        assert off_diag.min() > 1.0  # at least one gray level apart on average

    def test_invalid_class_count(self):
        with pytest.raises(InvalidSpecError):
            make_synthetic(n_train=10, n_test=5, n_classes=11)


class TestBundleValidation:
    def test_rejects_float_images(self, small):
        with pytest.raises(InvalidSpecError):
            DatasetBundle(
                X_train=small.X_train.astype(np.float32),
                y_train=small.y_train,
                X_test=small.X_test,
                y_test=small.y_test,
                n_classes=10,
            )

    def test_rejects_out_of_range_labels(self, small):
        bad = small.y_train.copy()
        bad[0] = 10
        with pytest.raises(InvalidSpecError):
            DatasetBundle(
                X_train=small.X_train,
                y_train=bad,
                X_test=small.X_test,
                y_test=small.y_test,
                n_classes=10,
            )


class TestRoundTrips:
    def test_npz(self, small, tmp_path):
        p = small.to_npz(tmp_path / "ds.npz")
        back = load_npz(p)
        assert np.array_equal(back.X_train, small.X_train)
        assert np.array_equal(back.y_test, small.y_test)
        assert back.train_hash == small.train_hash
        assert back.name == small.name

    def test_folder(self, tmp_path):
        rng = np.random.default_rng(0)
        for cls in ("apple", "pear"):
            d = tmp_path / "ds" / cls
            d.mkdir(parents=True)
            for i in range(5):
                arr = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
                Image.fromarray(arr).save(d / f"{i}.png")
        ds = load_folder(tmp_path / "ds", test_fraction=0.2, seed=0)
        assert ds.n_classes == 2
        assert len(ds.X_train) + len(ds.X_test) == 10
        assert len(ds.X_test) == 2
        assert ds.image_shape == (8, 8, 3)
        again = load_folder(tmp_path / "ds", test_fraction=0.2, seed=0)
        assert np.array_equal(ds.X_train, again.X_train)

    def test_folder_rejects_mixed_shapes(self, tmp_path):
        for cls, size in (("a", 8), ("b", 9)):
            d = tmp_path / "ds2" / cls
            d.mkdir(parents=True)
            Image.fromarray(np.zeros((size, size, 3), dtype=np.uint8)).save(d / "0.png")
        with pytest.raises(InvalidSpecError):
            load_folder(tmp_path / "ds2")
