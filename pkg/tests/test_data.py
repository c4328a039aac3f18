"""Datasets, IDX files and the augmentation family."""

import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from embdyn.data import (
    IDX_IMAGES,
    AugRecord,
    AugSpec,
    augment,
    load_idx_images,
    make_gaussian_clusters,
    make_multicrop_batch,
    make_view_batch,
    replay,
    write_idx_images,
    write_idx_labels,
)
from embdyn.evaluation import knn_classify


def _image(seed=0, c=3, h=8, w=8):
    return np.random.default_rng(seed).random((c, h, w))


def _image_dataset(n=6, seed=0):
    ds = make_gaussian_clusters(2, n // 2, 4, 0.1, seed)
    imgs = np.random.default_rng(seed).random((n, 3, 6, 6))
    return replace(ds, images=imgs)


class TestGaussianClusters:
    def test_zero_spread_is_centers(self):
        ds = make_gaussian_clusters(3, 5, 4, 0.0, seed=1)
        for c in range(3):
            rows = ds.images[ds.labels == c]
            np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))
            assert np.linalg.norm(rows[0]) == pytest.approx(1.0)

    def test_separable_at_small_spread(self):
        ds = make_gaussian_clusters(2, 50, 16, 0.1, seed=2, test_per_class=50)
        tr, te = ds.subset("train"), ds.subset("test")
        assert knn_classify(tr.images, tr.labels, te.images, te.labels, k=1) >= 0.99

    def test_deterministic(self):
        a = make_gaussian_clusters(4, 10, 8, 0.3, seed=3)
        b = make_gaussian_clusters(4, 10, 8, 0.3, seed=3)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_split_tags(self):
        ds = make_gaussian_clusters(2, 3, 2, 0.1, seed=0, test_per_class=2)
        assert len(ds.subset("train")) == 6 and len(ds.subset("test")) == 4

    def test_negative_spread(self):
        with pytest.raises(ValueError):
            make_gaussian_clusters(2, 3, 2, -0.1, seed=0)


class TestIdx:
    def test_scaling(self, tmp_path):
        write_idx_images(tmp_path / "img", np.array([[[0, 255], [0, 255]]]))
        ds = load_idx_images(tmp_path / "img")
        np.testing.assert_array_equal(ds.images[0, 0], [[0.0, 1.0], [0.0, 1.0]])

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        pix = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
        labels = rng.integers(0, 3, 5)
        write_idx_images(tmp_path / "img", pix)
        write_idx_labels(tmp_path / "lab", labels)
        ds = load_idx_images(tmp_path / "img", tmp_path / "lab")
        np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), pix)
        np.testing.assert_array_equal(ds.labels, labels)
        assert (tmp_path / "img").read_bytes()[:4] == b"\x00\x00\x08\x03"

    def test_label_count_mismatch(self, tmp_path):
        write_idx_images(tmp_path / "img", np.zeros((3, 2, 2)))
        write_idx_labels(tmp_path / "lab", np.zeros(2))
        with pytest.raises(ValueError, match="label count"):
            load_idx_images(tmp_path / "img", tmp_path / "lab")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "img").write_bytes(struct.pack(">I", 0x801) + struct.pack(">I", 0))
        with pytest.raises(ValueError, match="magic"):
            load_idx_images(tmp_path / "img")

    def test_truncated(self, tmp_path):
        write_idx_images(tmp_path / "img", np.zeros((2, 2, 2)))
        raw = (tmp_path / "img").read_bytes()
        (tmp_path / "img").write_bytes(raw[:-1])
        with pytest.raises(ValueError, match="truncated"):
            load_idx_images(tmp_path / "img")
        (tmp_path / "img").write_bytes(raw[:10])
        with pytest.raises(ValueError, match="truncated"):
            load_idx_images(tmp_path / "img")

    def test_dimension_overflow(self, tmp_path):
        header = struct.pack(">I", IDX_IMAGES) + struct.pack(">3I", 2**31, 2**31, 2)
        (tmp_path / "img").write_bytes(header)
        with pytest.raises(ValueError, match="overflow"):
            load_idx_images(tmp_path / "img")


class TestAugment:
    def test_identity_spec(self):
        x = _image()
        v, rec = augment(x, AugSpec.identity(), np.random.default_rng(0))
        np.testing.assert_array_equal(v, x)
        assert rec.crop is None and not rec.flip

    def test_flip_is_involution(self):
        x = _image(1)
        rec = AugRecord(kind="image", flip=True)
        spec = AugSpec.identity()
        np.testing.assert_array_equal(replay(replay(x, rec, spec), rec, spec), x)

    @pytest.mark.parametrize("seed", range(10))
    def test_replay_bit_exact(self, seed):
        x = _image(seed)
        spec = AugSpec(noise_p=0.5)
        v, rec = augment(x, spec, np.random.default_rng(seed))
        np.testing.assert_array_equal(replay(x, rec, spec), v)

    def test_vector_replay_bit_exact(self):
        x = np.random.default_rng(0).standard_normal(16)
        v, rec = augment(x, AugSpec(), np.random.default_rng(1))
        np.testing.assert_array_equal(replay(x, rec, AugSpec()), v)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_output_range(self, seed):
        v, _ = augment(_image(seed % 100), AugSpec(noise_p=1.0, noise_std=0.5), np.random.default_rng(seed))
        assert np.all(np.isfinite(v)) and v.min() >= 0.0 and v.max() <= 1.0

    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError):
            augment(_image() + 1.0, AugSpec(), np.random.default_rng(0))

    def test_crop_window_inside_image(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            _, rec = augment(_image(), AugSpec(), rng)
            top, left, ch, cw = rec.crop
            assert ch >= 1 and cw >= 1 and top + ch <= 8 and left + cw <= 8

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            AugSpec(flip_p=1.5)
        with pytest.raises(ValueError):
            AugSpec(crop_scale=(0.0, 1.0))

    def test_vector_views_closer_to_each_other(self):
        ds = make_gaussian_clusters(10, 20, 32, 0.2, seed=5)
        vb = make_view_batch(ds, np.arange(len(ds)), 2, AugSpec(), np.random.default_rng(6))
        a, b = vb.views[:, 0], vb.views[:, 1]
        pos = np.mean(np.sum((a - b) ** 2, axis=1))
        neg = np.mean(np.sum((a - np.roll(b, 1, axis=0)) ** 2, axis=1))
        assert pos < neg


class TestViewBatch:
    def test_shapes_and_ids(self):
        ds = _image_dataset()
        vb = make_view_batch(ds, [4, 0, 2], 4, AugSpec(), np.random.default_rng(0))
        assert vb.views.shape == (3, 4, 3 * 6 * 6)
        np.testing.assert_array_equal(vb.image_ids, [4, 0, 2])
        for row, idx in enumerate(vb.image_ids):
            for j, rec in enumerate(vb.records[row]):
                np.testing.assert_array_equal(replay(ds.images[idx], rec, AugSpec()).reshape(-1), vb.views[row, j])

    def test_needs_two_views(self):
        with pytest.raises(ValueError, match="K"):
            make_view_batch(_image_dataset(), [0], 1, AugSpec(), np.random.default_rng(0))

    def test_deterministic(self):
        ds = _image_dataset()
        a = make_view_batch(ds, range(6), 2, AugSpec(), np.random.default_rng(9)).views
        b = make_view_batch(ds, range(6), 2, AugSpec(), np.random.default_rng(9)).views
        np.testing.assert_array_equal(a, b)

    def test_flip_bits_independent_across_views(self):
        ds = _image_dataset(n=2)
        spec = AugSpec.identity()
        spec = replace(spec, flip_p=0.5)
        vb = make_view_batch(ds, np.zeros(2000, dtype=int), 2, spec, np.random.default_rng(10))
        bits = np.array([[r.flip for r in recs] for recs in vb.records])
        table = np.array([[np.sum(~bits[:, 0] & ~bits[:, 1]), np.sum(~bits[:, 0] & bits[:, 1])],
                          [np.sum(bits[:, 0] & ~bits[:, 1]), np.sum(bits[:, 0] & bits[:, 1])]])
        assert stats.chi2_contingency(table).pvalue > 1e-3

    def test_multicrop_vector_windows(self):
        ds = make_gaussian_clusters(2, 3, 20, 0.1, seed=0)
        vb = make_multicrop_batch(ds, range(6), 3, AugSpec.identity(), np.random.default_rng(1), (0.2, 0.4))
        assert vb.views.shape == (6, 5, 20)
        np.testing.assert_array_equal(vb.views[:, :2], np.repeat(ds.images[:, None], 2, axis=1))
        small = vb.views[:, 2:]
        kept = (small != 0).sum(axis=-1)
        assert kept.max() <= 8 and kept.min() >= 1
