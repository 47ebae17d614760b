"""Unit tests for virtual centers."""

import json

import numpy as np
import pytest

from itl_sim.data_centers import (
    Clean,
    GaussianNoise,
    Split,
    apply_noise,
    as_mask_task,
    balanced_batches,
    class_weights,
    export_centers,
    load_external,
    make_synthetic_task,
    pool_centers,
    reorder_centers,
    shuffled_batches,
)
from itl_sim.errors import ConfigurationError, DataError


def write_manifest(path, centers, num_classes=3):
    path.write_text(json.dumps({"num_classes": num_classes, "centers": centers}))
    return path


@pytest.mark.unit
class TestSyntheticTask:
    def test_counts_per_center(self):
        centers = make_synthetic_task(num_classes=3, dim=4, per_center_counts=(8, 2, 2), num_centers=2)
        assert [len(c.train) for c in centers] == [24, 24]
        assert [len(c.val) for c in centers] == [6, 6]
        assert all((c.train.class_counts(3) == 8).all() for c in centers)
        assert [c.center for c in centers] == [1, 2]
        assert centers[0].input_shape == (4,)

    def test_integer_count_is_split(self):
        centers = make_synthetic_task(num_classes=2, dim=3, per_center_counts=50, num_centers=1)
        assert (len(centers[0].train), len(centers[0].val), len(centers[0].test)) == (64, 16, 20)

    def test_ids_are_disjoint_across_centers_and_splits(self, tiny_centers):
        ids = np.concatenate([s.ids for c in tiny_centers for s in c.splits()])
        assert len(np.unique(ids)) == len(ids)

    def test_deterministic(self):
        a = make_synthetic_task(num_classes=3, dim=4, per_center_counts=(4, 2, 2), num_centers=2, seed=5)
        b = make_synthetic_task(num_classes=3, dim=4, per_center_counts=(4, 2, 2), num_centers=2, seed=5)
        assert np.array_equal(a[1].train.x, b[1].train.x)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_centers": 0},
            {"num_classes": 1},
            {"dim": 0},
            {"per_center_counts": (4, 0, 2)},
            {"per_center_counts": (4, 2)},
        ],
    )
    def test_infeasible(self, kwargs):
        with pytest.raises(DataError):
            make_synthetic_task(**kwargs)

    def test_duplicate_ids_rejected(self, tiny_centers):
        c = tiny_centers[0]
        with pytest.raises(DataError, match="more than one split"):
            type(c)(1, c.train, c.train, c.test, c.num_classes)


@pytest.mark.unit
class TestHeterogeneity:
    def test_noise_scale(self):
        center = make_synthetic_task(num_classes=2, dim=50, per_center_counts=(200, 2, 2), num_centers=1)[0]
        noisy = apply_noise(center, sigma=51.0, seed=1)
        diff = noisy.train.x - center.train.x
        assert np.std(diff) == pytest.approx(0.2, rel=0.05)
        assert np.array_equal(noisy.train.y, center.train.y)
        assert noisy.heterogeneity == GaussianNoise(51.0)

    def test_zero_sigma_is_identity(self, tiny_centers):
        assert apply_noise(tiny_centers[0], 0.0) is tiny_centers[0]

    def test_negative_sigma(self, tiny_centers):
        with pytest.raises(DataError):
            apply_noise(tiny_centers[0], -1.0)

    def test_clipping(self, tiny_centers):
        noisy = apply_noise(tiny_centers[0], 200.0, clip=True)
        assert noisy.train.x.min() >= 0.0
        assert noisy.train.x.max() <= 1.0

    def test_reorder_keeps_source(self, tiny_centers):
        reordered = reorder_centers(tiny_centers, [3, 1, 2])
        assert [c.center for c in reordered] == [1, 2, 3]
        assert [c.source for c in reordered] == ["center-3", "center-1", "center-2"]
        assert np.array_equal(reordered[0].train.x, tiny_centers[2].train.x)

    def test_invalid_permutation(self, tiny_centers):
        with pytest.raises(ConfigurationError):
            reorder_centers(tiny_centers, [1, 1, 2])

    def test_swap_first_and_last(self, tiny_centers):
        swapped = reorder_centers(tiny_centers, [3, 2, 1])
        assert [c.source for c in swapped] == ["center-3", "center-2", "center-1"]
        assert np.array_equal(swapped[1].train.x, tiny_centers[1].train.x)

    def test_pool(self, tiny_centers):
        pooled = pool_centers(tiny_centers)
        assert len(pooled.train) == 3 * 36
        assert pooled.source == "pooled"
        assert pooled.heterogeneity == Clean()

    def test_mask_task(self, tiny_centers):
        masks = as_mask_task(tiny_centers[0])
        assert masks.train.y.shape == (36, 3)
        assert (masks.train.y.sum(axis=1) == 1).all()


@pytest.mark.unit
class TestBatching:
    def test_balanced_epoch_size_and_balance(self):
        y = np.array([0.0] * 90 + [1.0] * 10)
        split = Split(np.arange(100, dtype=float).reshape(100, 1), y, np.arange(100))
        rng = np.random.default_rng(0)
        labels = np.concatenate([b[1] for _ in range(50) for b in balanced_batches(split, 16, rng, 2)])
        assert len(labels) == 50 * 100
        assert labels.mean() == pytest.approx(0.5, abs=0.03)

    def test_class_weights(self):
        split = Split(np.zeros((4, 1)), np.array([0.0, 0.0, 0.0, 1.0]), np.arange(4))
        np.testing.assert_allclose(class_weights(split, 2), [1 / 6, 1 / 6, 1 / 6, 1 / 2])

    def test_missing_class_cannot_balance(self):
        split = Split(np.zeros((2, 1)), np.zeros(2), np.arange(2))
        with pytest.raises(DataError, match="absent"):
            class_weights(split, 2)

    def test_shuffled_covers_split(self, tiny_centers):
        split = tiny_centers[0].train
        batches = list(shuffled_batches(split, 10, np.random.default_rng(0)))
        assert [len(b[0]) for b in batches] == [10, 10, 10, 6]
        assert sorted(np.concatenate([b[1] for b in batches])) == sorted(split.y)

    def test_batch_size_positive(self, tiny_centers):
        with pytest.raises(ConfigurationError):
            next(shuffled_batches(tiny_centers[0].train, 0, np.random.default_rng(0)))


@pytest.mark.unit
class TestExternal:
    @pytest.mark.parametrize("format", ["csv-labels", "raw-tensor-dir"])
    def test_export_then_load(self, tiny_centers, tmp_path, format):
        centers = [tiny_centers[0], apply_noise(tiny_centers[1], 10.0)]
        manifest = export_centers(centers, tmp_path / format, format)
        loaded = load_external(manifest, format)
        assert len(loaded) == 2
        for original, restored in zip(centers, loaded):
            assert restored.source == original.source
            assert restored.heterogeneity == original.heterogeneity
            for a, b in zip(original.splits(), restored.splits()):
                assert np.array_equal(a.x, b.x)
                assert np.array_equal(a.y, b.y)
                assert np.array_equal(a.ids, b.ids)

    def test_single_file_split_by_fractions(self, tmp_path):
        rows = ["label,f0,f1"] + [f"{i % 3},{i * 0.1},{i * 0.2}" for i in range(50)]
        (tmp_path / "c1.csv").write_text("\n".join(rows) + "\n")
        manifest = write_manifest(tmp_path / "manifest.json", [{"name": "site-a", "path": "c1.csv"}])
        (center,) = load_external(manifest)
        assert (len(center.train), len(center.val), len(center.test)) == (32, 8, 10)
        assert center.source == "site-a"

    def test_bad_label_names_line(self, tmp_path):
        (tmp_path / "c1.csv").write_text("label,f0\n0,0.5\n7,0.1\n")
        manifest = write_manifest(tmp_path / "manifest.json", [{"path": "c1.csv"}])
        with pytest.raises(DataError, match="line 3"):
            load_external(manifest)

    @pytest.mark.parametrize("label", ["nan", "inf", "-inf"])
    def test_non_finite_label(self, tmp_path, label):
        (tmp_path / "c1.csv").write_text(f"label,f0\n0,0.5\n{label},0.1\n")
        manifest = write_manifest(tmp_path / "manifest.json", [{"path": "c1.csv"}])
        with pytest.raises(DataError, match="line 3: non-finite value"):
            load_external(manifest)

    def test_non_finite_feature_and_id(self, tmp_path):
        (tmp_path / "c1.csv").write_text("id,label,f0\n0,0,0.5\n1,1,nan\n")
        (tmp_path / "c2.csv").write_text("id,label,f0\n0,0,0.5\ninf,1,0.2\n")
        for name in ("c1.csv", "c2.csv"):
            manifest = write_manifest(tmp_path / "manifest.json", [{"path": name}])
            with pytest.raises(DataError, match=f"{name}, line 3"):
                load_external(manifest)

    def test_ragged_row(self, tmp_path):
        (tmp_path / "c1.csv").write_text("label,f0,f1\n0,0.5,0.2\n1,0.1\n")
        manifest = write_manifest(tmp_path / "manifest.json", [{"path": "c1.csv"}])
        with pytest.raises(DataError, match="expected 2 features, got 1"):
            load_external(manifest)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_external(tmp_path / "manifest.json")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_external(tmp_path / "manifest.json", "hdf5")
