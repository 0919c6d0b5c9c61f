"""Manifest handling, patch extraction, splits, and the synthetic corpus."""

import numpy as np
import pytest

from sciqa import dataset as ds


def write_manifest(tmp_path, rows, header=None):
    header = header or "dist_path,ref_path,ref_id,distortion_type,distortion_level,dmos"
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    return path


class TestManifest:
    def test_round_trip_preserves_entries(self, tmp_path):
        manifest = ds.DatabaseManifest(root=tmp_path, entries=[
            ds.ManifestEntry("d/a.png", "r/a.png", "refA", "GN", 3, 41.25),
            ds.ManifestEntry("d/b.png", None, "refB", "JC", 1, 0.1 + 0.2),
        ])
        path = tmp_path / "m.csv"
        ds.save_manifest(manifest, path)
        loaded = ds.load_manifest(path)
        assert loaded.entries == manifest.entries
        assert loaded.root == tmp_path

    def test_missing_file(self, tmp_path):
        with pytest.raises(ds.ManifestError, match="not found"):
            ds.load_manifest(tmp_path / "nope.csv")

    def test_missing_columns(self, tmp_path):
        path = write_manifest(tmp_path, ["a,b"], header="dist_path,ref_id")
        with pytest.raises(ds.ManifestError, match="missing columns"):
            ds.load_manifest(path)

    def test_row_errors_name_the_row(self, tmp_path):
        cases = [
            (",r.png,refA,GN,1,10", "row 2: empty dist_path"),
            ("d.png,r.png,,GN,1,10", "row 2: empty ref_id"),
            ("d.png,r.png,refA,BLUR,1,10", "row 2: unknown distortion_type"),
            ("d.png,r.png,refA,GN,x,10", "row 2: non-integer distortion_level"),
            ("d.png,r.png,refA,GN,0,10", "row 2: distortion_level must be >= 1"),
            ("d.png,r.png,refA,GN,1,abc", "row 2: non-numeric dmos"),
            ("d.png,r.png,refA,GN,1,nan", "row 2: non-finite dmos"),
        ]
        for row, message in cases:
            path = write_manifest(tmp_path, ["d0.png,r.png,refZ,GN,1,5"][0:0] + [row])
            with pytest.raises(ds.ManifestError, match=message):
                ds.load_manifest(path)

    def test_later_row_number_reported(self, tmp_path):
        path = write_manifest(tmp_path, [
            "d1.png,r.png,refA,GN,1,10",
            "d2.png,r.png,refA,GN,0,10",
        ])
        with pytest.raises(ds.ManifestError, match="row 3"):
            ds.load_manifest(path)

    def test_type_normalized_to_upper(self, tmp_path):
        path = write_manifest(tmp_path, ["d.png,r.png,refA,gn,2,10"])
        assert ds.load_manifest(path).entries[0].distortion_type == "GN"

    def test_ref_ids_first_appearance_order(self):
        entries = [ds.ManifestEntry(f"d{i}.png", None, rid, "GN", 1, 1.0)
                   for i, rid in enumerate(["b", "a", "b", "c", "a"])]
        manifest = ds.DatabaseManifest(root=None, entries=entries)
        assert manifest.ref_ids() == ["b", "a", "c"]


class TestImages:
    def test_grayscale_bt601(self):
        rgb = np.zeros((1, 1, 3))
        rgb[0, 0] = [255, 0, 0]
        assert ds.to_grayscale(rgb)[0, 0] == pytest.approx(0.299 * 255)
        gray = np.array([[10.0, 20.0]])
        out = ds.to_grayscale(gray)
        np.testing.assert_array_equal(out, gray)
        out[0, 0] = 99.0
        assert gray[0, 0] == 10.0

    def test_grayscale_rejects_bad_input(self):
        with pytest.raises(ValueError, match="HxWx3"):
            ds.to_grayscale(np.zeros((2, 2, 4)))
        with pytest.raises(ValueError, match="non-finite"):
            ds.to_grayscale(np.full((1, 1, 3), np.nan))

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = np.round(rng.uniform(0, 255, (40, 50)))
        path = tmp_path / "img.png"
        ds.save_image(img, path)
        np.testing.assert_array_equal(ds.load_image(path), img)

    def test_load_rgb_converts(self, tmp_path):
        from PIL import Image
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        arr[..., 1] = 200
        path = tmp_path / "rgb.png"
        Image.fromarray(arr, mode="RGB").save(path)
        np.testing.assert_allclose(ds.load_image(path), 0.587 * 200, atol=0.01)


class TestPatches:
    def test_grid_tiles_match_image_regions(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 255, (70, 100))
        patches, positions = ds.patch_grid(img)
        assert patches.shape == (2 * 3, 32, 32)
        assert patches.dtype == np.float32
        assert patches.min() >= 0.0 and patches.max() <= 1.0
        for patch, (r, c) in zip(patches, positions):
            region = img[32 * r: 32 * (r + 1), 32 * c: 32 * (c + 1)] / 255.0
            np.testing.assert_allclose(patch, region, atol=1e-7)

    def test_grid_positions_row_major(self):
        img = np.zeros((64, 96))
        _, positions = ds.patch_grid(img)
        assert positions.tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]

    def test_grid_rejects_small_images(self):
        with pytest.raises(ValueError, match="smaller"):
            ds.patch_grid(np.zeros((31, 64)))

    def test_extract_patches_labels(self):
        batch = ds.extract_patches(np.zeros((32, 64)), label=55.5, source_id="img7")
        assert len(batch) == 2
        assert batch.labels.tolist() == [55.5, 55.5]
        assert batch.source_ids.tolist() == ["img7", "img7"]

    def test_concat_batches(self):
        a = ds.extract_patches(np.zeros((32, 32)), 1.0, "a")
        b = ds.extract_patches(np.full((32, 64), 255.0), 2.0, "b")
        merged = ds.concat_batches([a, b])
        assert len(merged) == 3
        assert merged.labels.tolist() == [1.0, 2.0, 2.0]
        assert merged.patches[1].min() == 1.0
        with pytest.raises(ValueError, match="no batches"):
            ds.concat_batches([])

    def test_take_reorders_all_fields(self):
        a = ds.extract_patches(np.zeros((32, 32)), 1.0, "a")
        b = ds.extract_patches(np.full((32, 64), 255.0), 2.0, "b")
        merged = ds.concat_batches([a, b])
        sub = merged.take([2, 0])
        assert len(sub) == 2
        assert sub.labels.tolist() == [2.0, 1.0]
        assert sub.source_ids.tolist() == ["b", "a"]
        assert sub.grid_positions.tolist() == [[0, 1], [0, 0]]


def manifest_with_groups(n_groups, per_group=3):
    entries = []
    for g in range(n_groups):
        for j in range(per_group):
            entries.append(ds.ManifestEntry(
                f"d{g}_{j}.png", None, f"ref{g:02d}", "GN", j + 1, 10.0 * g + j))
    return ds.DatabaseManifest(root=None, entries=entries)


class TestSplitByReference:
    def test_groups_never_straddle_the_split(self):
        manifest = manifest_with_groups(10)
        train, test = ds.split_by_reference(manifest, 0.8, seed=0)
        train_ids = set(e.ref_id for e in train.entries)
        test_ids = set(e.ref_id for e in test.entries)
        assert not train_ids & test_ids
        assert len(train.entries) + len(test.entries) == len(manifest.entries)

    def test_half_up_group_count(self):
        train, test = ds.split_by_reference(manifest_with_groups(10), 0.8, seed=1)
        assert len(set(e.ref_id for e in train.entries)) == 8
        train, _ = ds.split_by_reference(manifest_with_groups(3), 0.5, seed=1)
        assert len(set(e.ref_id for e in train.entries)) == 2
        train, _ = ds.split_by_reference(manifest_with_groups(7), 0.5, seed=1)
        assert len(set(e.ref_id for e in train.entries)) == 4

    def test_deterministic_and_seed_sensitive(self):
        manifest = manifest_with_groups(12)
        a1, _ = ds.split_by_reference(manifest, 0.5, seed=7)
        a2, _ = ds.split_by_reference(manifest, 0.5, seed=7)
        assert a1.entries == a2.entries
        picks = {frozenset(e.ref_id for e in
                           ds.split_by_reference(manifest, 0.5, seed=s)[0].entries)
                 for s in range(6)}
        assert len(picks) > 1

    def test_degenerate_splits_rejected(self):
        manifest = manifest_with_groups(4)
        with pytest.raises(ValueError, match="train_fraction"):
            ds.split_by_reference(manifest, 1.0, seed=0)
        with pytest.raises(ValueError, match="no group"):
            ds.split_by_reference(manifest, 0.95, seed=0)
        single = manifest_with_groups(1)
        with pytest.raises(ValueError, match="at least 2"):
            ds.split_by_reference(single, 0.5, seed=0)


@pytest.fixture(scope="module")
def ref():
    return ds.make_reference_image(seed=42, size=96)


class TestSyntheticDistortions:
    @pytest.mark.parametrize("kind", ds.SYNTH_KINDS)
    def test_output_range_and_shape(self, ref, kind):
        for level in (1, 5):
            out = ds.synth_distort(ref, kind, level, seed=3)
            assert out.shape == ref.shape
            assert out.min() >= 0.0 and out.max() <= 255.0

    def test_noise_deterministic_per_seed(self, ref):
        a = ds.synth_distort(ref, "GN", 3, seed=5)
        b = ds.synth_distort(ref, "GN", 3, seed=5)
        c = ds.synth_distort(ref, "GN", 3, seed=6)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("kind", ["GB", "MB", "CC", "JC"])
    def test_deterministic_kinds_ignore_seed(self, ref, kind):
        np.testing.assert_array_equal(ds.synth_distort(ref, kind, 2, seed=1),
                                      ds.synth_distort(ref, kind, 2, seed=999))

    def test_contrast_law(self):
        img = np.array([[28.0, 128.0, 228.0]])
        out = ds.synth_distort(img, "CC", 4, seed=0)
        gain = ds.CC_CONTRAST_GAIN[4]
        np.testing.assert_allclose(out, 128.0 + gain * (img - 128.0))

    def test_blur_reduces_variance(self, ref):
        noisy = ds.synth_distort(ref, "GN", 5, seed=1)
        blurred = ds.synth_distort(noisy, "GB", 3, seed=0)
        assert blurred.var() < noisy.var()

    def test_motion_blur_is_horizontal(self):
        rows = np.linspace(0, 255, 48)[:, None]
        row_constant = np.tile(rows, (1, 48))
        np.testing.assert_allclose(
            ds.synth_distort(row_constant, "MB", 4, seed=0), row_constant, atol=1e-9)
        col_constant = row_constant.T
        out = ds.synth_distort(col_constant, "MB", 4, seed=0)
        assert np.abs(out - col_constant).max() > 1.0

    def test_quantization_fixes_flat_midgray(self):
        img = np.full((24, 24), 128.0)
        for level in (1, 2, 3, 4, 5):
            np.testing.assert_allclose(ds.synth_distort(img, "JC", level, seed=0),
                                       img, atol=1e-9)

    def test_severity_increases_distance(self, ref):
        for kind in ds.SYNTH_KINDS:
            errs = [np.abs(ds.synth_distort(ref, kind, lv, seed=2) - ref).mean()
                    for lv in (1, 3, 5)]
            assert errs[0] < errs[1] < errs[2], f"{kind} severity not monotone: {errs}"

    def test_bad_arguments(self, ref):
        with pytest.raises(ValueError, match="unknown distortion kind"):
            ds.synth_distort(ref, "ZZ", 1, seed=0)
        with pytest.raises(ValueError, match="level"):
            ds.synth_distort(ref, "GN", 6, seed=0)

    def test_proxy_label_law(self):
        kinds = ["GN", "GB", "CC"]
        assert ds.proxy_dmos("GN", 1, kinds) == 34.0
        assert ds.proxy_dmos("GB", 1, kinds) == 36.0
        assert ds.proxy_dmos("CC", 5, kinds) == 94.0


class TestSyntheticCorpus:
    def test_reference_images_deterministic_and_varied(self):
        a = ds.make_reference_image(seed=1, size=128)
        b = ds.make_reference_image(seed=1, size=128)
        c = ds.make_reference_image(seed=2, size=128)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.shape == (128, 128)
        assert a.min() >= 0.0 and a.max() <= 255.0
        assert a.var() > 100.0

    def test_corpus_layout_and_labels(self, tmp_path):
        manifest = ds.make_synthetic_manifest(tmp_path / "corpus", n_refs=2,
                                              kinds=["GN", "CC"], levels=3,
                                              seed=9, size=96)
        assert len(manifest.entries) == 2 * 2 * 3
        assert (tmp_path / "corpus" / "manifest.csv").is_file()
        for entry in manifest.entries:
            assert (manifest.root / entry.dist_path).is_file()
            assert (manifest.root / entry.ref_path).is_file()
            assert entry.dmos == ds.proxy_dmos(entry.distortion_type,
                                               entry.distortion_level, ["GN", "CC"])
        img = ds.load_image(manifest.root / manifest.entries[0].dist_path)
        assert img.shape == (96, 96)
        reloaded = ds.load_manifest(tmp_path / "corpus" / "manifest.csv")
        assert reloaded.entries == manifest.entries

    def test_corpus_deterministic_across_directories(self, tmp_path):
        m1 = ds.make_synthetic_manifest(tmp_path / "c1", n_refs=2, levels=2,
                                        seed=4, size=64)
        m2 = ds.make_synthetic_manifest(tmp_path / "c2", n_refs=2, levels=2,
                                        seed=4, size=64)
        assert [e.dist_path for e in m1.entries] == [e.dist_path for e in m2.entries]
        for e1 in m1.entries:
            img1 = ds.load_image(m1.root / e1.dist_path)
            img2 = ds.load_image(m2.root / e1.dist_path)
            np.testing.assert_array_equal(img1, img2)

    def test_corpus_argument_validation(self, tmp_path):
        with pytest.raises(ValueError, match="at least 2"):
            ds.make_synthetic_manifest(tmp_path, n_refs=1)
        with pytest.raises(ValueError, match="unknown distortion kind"):
            ds.make_synthetic_manifest(tmp_path, n_refs=2, kinds=["XX"])
        with pytest.raises(ValueError, match="levels"):
            ds.make_synthetic_manifest(tmp_path, n_refs=2, levels=0)
