import json

import numpy as np
import pytest

from icgen.data import (
    ManifestError,
    SynthSpec,
    Volume,
    build_synthetic_suite,
    ct_window,
    gen_synthetic,
    load_manifest,
    read_png16,
    resize_crop,
    write_dataset,
    write_png16,
)


class TestCtWindow:
    def test_window_bounds_map_to_unit_range(self):
        raw = np.array([[-100.0, 200.0]])
        np.testing.assert_allclose(ct_window(raw), [[0.0, 1.0]])

    def test_midpoint(self):
        assert ct_window(np.array([[50.0]]))[0, 0] == pytest.approx(0.5)

    def test_clamping_below_and_above(self):
        out = ct_window(np.array([[-500.0, 900.0]]))
        np.testing.assert_allclose(out, [[0.0, 1.0]])

    def test_monotone_in_raw_value(self):
        raw = np.linspace(-300, 400, 200).reshape(1, -1)
        out = ct_window(raw)[0]
        assert (np.diff(out) >= 0).all()

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            ct_window(np.zeros((2, 2)), lo=10, hi=10)


class TestResizeCrop:
    def test_output_shape(self):
        img = np.random.default_rng(0).random((300, 300)).astype(np.float32)
        out, _ = resize_crop(img, resize_to=512, crop=448, rng=np.random.default_rng(1))
        assert out.shape == (448, 448)

    def test_paired_label_shares_crop_offsets(self):
        # crop a coordinate ramp: matching offsets give matching corner values
        size = 64
        ramp = np.arange(size * size, dtype=np.float32).reshape(size, size)
        label = np.arange(size * size, dtype=np.int64).reshape(size, size)
        img, lbl = resize_crop(ramp, resize_to=size, crop=32, rng=np.random.default_rng(3),
                               paired=label)
        assert img.shape == lbl.shape == (32, 32)
        # identity resize keeps values; the crop must align exactly
        np.testing.assert_allclose(img, lbl.astype(np.float32))

    def test_label_resize_introduces_no_new_ids(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            label = rng.integers(0, 5, size=(37, 53))
            _, lbl = resize_crop(rng.random((37, 53)).astype(np.float32),
                                 resize_to=64, crop=48, rng=rng, paired=label)
            assert set(np.unique(lbl)) <= set(np.unique(label))

    def test_determinism_under_seed(self):
        img = np.random.default_rng(5).random((100, 100)).astype(np.float32)
        a, _ = resize_crop(img, 128, 96, np.random.default_rng(7))
        b, _ = resize_crop(img, 128, 96, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_crop_larger_than_resize_rejected(self):
        with pytest.raises(ValueError):
            resize_crop(np.zeros((10, 10), dtype=np.float32), resize_to=64, crop=65)


class TestSyntheticGenerators:
    def test_segmentation_contains_exactly_the_declared_ids(self):
        vol = gen_synthetic(SynthSpec("segmentation", class_count=3, slice_count=6, seed=1))
        assert sorted(np.unique(vol.labels).tolist()) == [0, 1, 2, 3]

    def test_denoising_mae_matches_folded_normal(self):
        # E|N(0, sigma)| = sigma * sqrt(2/pi); clipping is negligible because
        # clean values stay inside [0.25, 0.75]
        sigma = 0.1
        diffs = []
        vol = gen_synthetic(SynthSpec("denoising", noise_sigma=sigma, slice_count=64, seed=2))
        diffs = np.abs(vol.slices - vol.targets)
        expected = sigma * np.sqrt(2 / np.pi)
        assert diffs.mean() == pytest.approx(expected, rel=0.05)

    def test_same_seed_bit_identical(self):
        for kind in ("segmentation", "denoising", "synthesis", "inpainting"):
            a = gen_synthetic(SynthSpec(kind, slice_count=4, seed=5))
            b = gen_synthetic(SynthSpec(kind, slice_count=4, seed=5))
            np.testing.assert_array_equal(a.slices, b.slices)
            for attr in ("labels", "targets"):
                x, y = getattr(a, attr), getattr(b, attr)
                assert (x is None) == (y is None)
                if x is not None:
                    np.testing.assert_array_equal(x, y)

    def test_synthesis_remap_is_deterministic_function_of_input(self):
        vol = gen_synthetic(SynthSpec("synthesis", slice_count=4, seed=6))
        # same input intensity always maps to the same target intensity
        x, y = vol.slices.ravel(), vol.targets.ravel()
        order = np.argsort(x)
        assert (np.diff(y[order]) >= -1e-6).all()

    def test_inpainting_holes_are_zeroed_and_target_intact(self):
        vol = gen_synthetic(SynthSpec("inpainting", slice_count=4, seed=7))
        holes = vol.slices == 0.0
        assert holes.any(), "expected zeroed holes"
        assert (vol.targets[holes] > 0).all()
        np.testing.assert_array_equal(vol.slices[~holes], vol.targets[~holes])

    def test_values_stay_in_unit_range(self):
        for kind in ("segmentation", "denoising", "synthesis", "inpainting"):
            vol = gen_synthetic(SynthSpec(kind, slice_count=8, seed=8))
            assert vol.slices.min() >= 0.0 and vol.slices.max() <= 1.0

    def test_slices_deform_smoothly(self):
        vol = gen_synthetic(SynthSpec("segmentation", slice_count=16, seed=9))
        step_change = [
            np.mean(vol.labels[i] != vol.labels[i + 1]) for i in range(15)
        ]
        far_change = np.mean(vol.labels[0] != vol.labels[15])
        assert max(step_change) < far_change + 0.05
        assert np.mean(step_change) < 0.1

    def test_infeasible_class_count_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec("segmentation", image_size=32, class_count=9)

    def test_suite_builder_varies_slice_counts(self):
        suite = build_synthetic_suite("segmentation", 8, seed=10, slice_range=(8, 32))
        counts = {len(v) for v in suite.volumes}
        assert all(8 <= c <= 32 for c in counts)
        assert len(counts) > 1


class TestManifests:
    def write_suite(self, tmp_path, task="segmentation", instances=2):
        suite = build_synthetic_suite(task, instances, seed=11, image_size=32,
                                      class_count=2, slice_range=(10, 10))
        return write_dataset(suite, tmp_path / "ds"), suite

    def test_round_trip_counts_and_values(self, tmp_path):
        manifest_path, suite = self.write_suite(tmp_path)
        manifest = load_manifest(manifest_path)
        assert len(list(manifest.iter_samples())) == 20
        vol = manifest.volume(0)
        np.testing.assert_allclose(vol.slices, suite.volumes[0].slices, atol=1.1 / 65535)
        np.testing.assert_array_equal(vol.labels, suite.volumes[0].labels)

    def test_generation_manifest_without_labels_accepted(self, tmp_path):
        manifest_path, _ = self.write_suite(tmp_path, task="denoising")
        manifest = load_manifest(manifest_path)
        assert manifest.volume(0).labels is None
        assert manifest.volume(0).targets is not None

    def test_short_label_list_rejected_naming_instance(self, tmp_path):
        manifest_path, _ = self.write_suite(tmp_path)
        raw = json.loads(manifest_path.read_text())
        raw["instances"][1]["labels"] = raw["instances"][1]["labels"][:-1]
        manifest_path.write_text(json.dumps(raw))
        with pytest.raises(ManifestError, match=raw["instances"][1]["instance_id"]):
            load_manifest(manifest_path)

    def test_missing_file_reported_with_path(self, tmp_path):
        manifest_path, _ = self.write_suite(tmp_path)
        raw = json.loads(manifest_path.read_text())
        (manifest_path.parent / raw["instances"][0]["slices"][0]).unlink()
        with pytest.raises(ManifestError, match="missing file"):
            load_manifest(manifest_path)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.json")

    def test_missing_required_key_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"name": "x", "modality": "ct", "instances": []}))
        with pytest.raises(ManifestError, match="task_kind"):
            load_manifest(path)

    def test_png16_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        img = rng.random((16, 16)).astype(np.float32)
        write_png16(tmp_path / "x.png", img)
        back = read_png16(tmp_path / "x.png")
        np.testing.assert_allclose(back, img, atol=1.0 / 65535)

    def test_volume_minmax_normalization(self, tmp_path):
        manifest_path, _ = self.write_suite(tmp_path, task="denoising")
        raw = json.loads(manifest_path.read_text())
        raw["normalization"] = "volume_minmax"
        manifest_path.write_text(json.dumps(raw))
        vol = load_manifest(manifest_path).volume(0)
        assert vol.slices.min() == pytest.approx(0.0)
        assert vol.slices.max() == pytest.approx(1.0)


class TestVolume:
    def test_misaligned_labels_rejected(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((3, 8, 8)), "v", labels=np.zeros((2, 8, 8), dtype=int))

    def test_empty_volume_rejected(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((0, 8, 8)), "v")
