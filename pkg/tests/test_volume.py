import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ridl.errors import VolumeFormatError
from ridl.volume import (
    CtVolume, RoiMask, Sample, load_mask, load_sample, load_volume, normalize_intensities,
    pad_to_shape, read_manifest, save_mask, save_volume, synth_dataset, synth_phantom,
    threshold_roi, with_ext, write_dataset, write_raw,
)


def _write(tmp_path, name, dims, payload, spacing=(1.0, 1.0, 1.0), dtype="int16le"):
    stem = tmp_path / name
    (tmp_path / f"{name}.vol").write_bytes(payload)
    sp = "" if spacing is None else f"spacing_mm = [{', '.join(map(str, spacing))}]\n"
    (tmp_path / f"{name}.volhdr").write_text(f"dims = {list(dims)}\n{sp}dtype = \"{dtype}\"\n")
    return stem


class TestLoadVolume:
    def test_zero_volume(self, tmp_path):
        vol = load_volume(_write(tmp_path, "z", (2, 2, 2), bytes(16)))
        assert vol.dims == (2, 2, 2)
        assert vol.voxels.size == 8 and not vol.voxels.any()

    def test_clinical_dims(self, tmp_path):
        dims = (96, 128, 128)
        vol = load_volume(_write(tmp_path, "big", dims, bytes(2 * 96 * 128 * 128)))
        assert vol.voxels.size == 1_572_864

    def test_size_mismatch(self, tmp_path):
        with pytest.raises(VolumeFormatError):
            load_volume(_write(tmp_path, "bad", (2, 2, 2), bytes(10)))

    def test_missing_header(self, tmp_path):
        (tmp_path / "x.vol").write_bytes(bytes(16))
        with pytest.raises(VolumeFormatError):
            load_volume(tmp_path / "x")

    def test_corrupt_header(self, tmp_path):
        (tmp_path / "c.vol").write_bytes(bytes(16))
        (tmp_path / "c.volhdr").write_text("dims = [2, 2\n")
        with pytest.raises(VolumeFormatError):
            load_volume(tmp_path / "c")

    @pytest.mark.parametrize("dims,spacing", [((0, 2, 2), (1, 1, 1)), ((2, 2, 2), (1, 0, 1)), ((2, 2, 2), (1, -1, 1))])
    def test_non_positive(self, tmp_path, dims, spacing):
        n = int(np.prod(dims)) * 2
        with pytest.raises(VolumeFormatError):
            load_volume(_write(tmp_path, "np", dims, bytes(n), spacing))

    def test_layout_x_fastest(self, tmp_path):
        arr = np.arange(24, dtype="<i2").reshape(2, 3, 4)
        vol = load_volume(_write(tmp_path, "o", (2, 3, 4), arr.tobytes()))
        assert vol.voxels[1, 2, 3] == 23 and vol.voxels[0, 0, 1] == 1

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        vol = CtVolume(rng.integers(-1000, 1000, (3, 4, 5)).astype(float), (2.0, 0.5, 0.5))
        back = load_volume(save_volume(tmp_path / "r", vol))
        np.testing.assert_array_equal(back.voxels, vol.voxels)
        assert back.spacing == vol.spacing

    def test_names_with_dots_keep_their_sidecars_apart(self, tmp_path):
        write_raw(tmp_path / "a.b", np.zeros((2, 2, 2)), "int16le", (1, 1, 1))
        write_raw(with_ext(tmp_path / "a.b", ".valid"), np.ones((2, 2, 2)), "uint8")
        assert not load_volume(tmp_path / "a.b").voxels.any()


class TestThreshold:
    @pytest.mark.parametrize("hu,expected", [(-100, 1), (10, 0), (-250, 1), (0, 1), (-251, 0)])
    def test_bounds(self, hu, expected):
        vol = CtVolume(np.full((1, 1, 1), float(hu)), (1, 1, 1))
        assert threshold_roi(vol).voxels[0, 0, 0] == expected

    def test_low_above_high(self):
        with pytest.raises(ValueError):
            threshold_roi(CtVolume(np.zeros((1, 1, 1)), (1, 1, 1)), 5, -5)

    @given(st.integers(-400, 100), st.integers(0, 200), st.integers(0, 200))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_window(self, low, width, widen):
        rng = np.random.default_rng([low + 400, width])
        vol = CtVolume(rng.integers(-500, 200, (4, 4, 4)).astype(float), (1, 1, 1))
        inner = threshold_roi(vol, low, low + width).voxels
        outer = threshold_roi(vol, low - widen, low + width + widen).voxels
        assert np.all(outer >= inner)

    def test_commutes_with_normalization(self):
        rng = np.random.default_rng(1)
        vol = CtVolume(rng.integers(-600, 300, (5, 5, 5)).astype(float), (1, 1, 1))
        normalized = normalize_intensities(vol)
        # the default window maps HU to HU / 1024, exactly representable for integer HU
        after = threshold_roi(normalized, -250 / 1024, 0.0).voxels
        np.testing.assert_array_equal(after, threshold_roi(vol).voxels)


class TestNormalize:
    def test_endpoints_and_clip(self):
        vol = CtVolume(np.array([[[-1024.0, 0.0, 1024.0, 3000.0, -5000.0]]]), (1, 1, 1))
        out = normalize_intensities(vol).voxels.ravel()
        np.testing.assert_array_equal(out, [-1.0, 0.0, 1.0, 1.0, -1.0])

    def test_custom_window(self):
        vol = CtVolume(np.array([[[-250.0, -125.0, 0.0]]]), (1, 1, 1))
        np.testing.assert_allclose(normalize_intensities(vol, -250, 0).voxels.ravel(), [-1, 0, 1])

    def test_bad_window(self):
        with pytest.raises(ValueError):
            normalize_intensities(CtVolume(np.zeros((1, 1, 1)), (1, 1, 1)), 1, 1)


class TestPad:
    def _sample(self, dims):
        rng = np.random.default_rng(0)
        vox = rng.integers(-200, -10, dims).astype(float)
        vol = CtVolume(vox, (1, 1, 1))
        return Sample("s", vol, threshold_roi(vol), 1)

    def test_pad_counts(self):
        s = self._sample((2, 2, 2))
        p = pad_to_shape(s, (4, 4, 4))
        assert p.volume.dims == (4, 4, 4)
        np.testing.assert_array_equal(p.volume.voxels[:2, :2, :2], s.volume.voxels)
        assert np.count_nonzero(p.volume.voxels[2:, :, :]) + np.count_nonzero(p.volume.voxels[:2, 2:, :]) \
            + np.count_nonzero(p.volume.voxels[:2, :2, 2:]) == 0
        assert p.mask.count == s.mask.count

    def test_identity(self):
        s = self._sample((3, 3, 3))
        p = pad_to_shape(s, (3, 3, 3))
        np.testing.assert_array_equal(p.volume.voxels, s.volume.voxels)
        np.testing.assert_array_equal(p.mask.voxels, s.mask.voxels)

    def test_too_large(self):
        with pytest.raises(ValueError):
            pad_to_shape(self._sample((5, 5, 5)), (4, 4, 4))


class TestPhantom:
    def test_deterministic(self):
        a, b = synth_phantom(1, 7, (16, 16, 16)), synth_phantom(1, 7, (16, 16, 16))
        np.testing.assert_array_equal(a.volume.voxels, b.volume.voxels)
        np.testing.assert_array_equal(a.mask.voxels, b.mask.voxels)

    def test_shell_in_fat_range(self):
        s = synth_phantom(0, 3)
        hu = s.volume.voxels[s.mask.voxels > 0]
        assert hu.size > 0 and hu.min() >= -250 and hu.max() <= 0

    def test_too_small(self):
        with pytest.raises(ValueError):
            synth_phantom(0, 0, (8, 16, 16))

    def test_dataset_balanced_and_written(self, tmp_path):
        samples = synth_dataset(3, seed=2, dims=(16, 16, 16))
        assert [s.label for s in samples].count(1) == 3
        manifest = write_dataset(samples, tmp_path / "d")
        records = read_manifest(manifest)
        assert [r["id"] for r in records] == [s.id for s in samples]
        back = load_sample(records[0])
        np.testing.assert_array_equal(back.volume.voxels, samples[0].volume.voxels)
        np.testing.assert_array_equal(back.mask.voxels, samples[0].mask.voxels)


class TestManifest:
    def test_mask_optional(self, tmp_path):
        vol = CtVolume(np.array([[[-100.0, 50.0]]]), (1, 1, 1))
        save_volume(tmp_path / "v", vol)
        (tmp_path / "m.jsonl").write_text(json.dumps({"id": "a", "volume": "v.vol", "label": 0}) + "\n")
        s = load_sample(read_manifest(tmp_path / "m.jsonl")[0])
        np.testing.assert_array_equal(s.mask.voxels.ravel(), [1, 0])

    def test_bad_label(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps({"id": "a", "volume": "v.vol", "label": 2}) + "\n")
        with pytest.raises(VolumeFormatError):
            read_manifest(tmp_path / "m.jsonl")

    def test_mask_roundtrip(self, tmp_path):
        m = RoiMask(np.array([[[1, 0], [0, 1]]], dtype=np.uint8))
        back = load_mask(save_mask(tmp_path / "m", m))
        np.testing.assert_array_equal(back.voxels, m.voxels)
