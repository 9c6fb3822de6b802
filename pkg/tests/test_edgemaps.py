import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from canny_oracle import canny_reference, gradients, smooth
from edgeseg.corpus import SyntheticConfig, generate_synthetic_dataset
from edgeseg.edgemaps import (
    CannyConfig,
    canny_edges,
    edge_cache_path,
    foreground_weight,
    load_cached_edge_target,
    precompute_edge_targets,
)


def step_image(h=16, w=16):
    img = np.zeros((h, w))
    img[:, w // 2 :] = 1.0
    return img


def disk_image(h=64, w=64, radius=10):
    ys, xs = np.mgrid[0:h, 0:w]
    return ((ys - h // 2) ** 2 + (xs - w // 2) ** 2 <= radius**2).astype(float)


class TestCannyConfig:
    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            CannyConfig(sigma=0)

    def test_rejects_inverted_thresholds(self):
        with pytest.raises(ValueError):
            CannyConfig(low_fraction=0.3, high_fraction=0.2)

    def test_cache_key_changes_with_sigma(self):
        assert CannyConfig(sigma=1.0).cache_key() != CannyConfig(sigma=2.0).cache_key()


class TestCannyEdges:
    def test_constant_image_gives_all_zero_map(self):
        edges = canny_edges(np.full((12, 12), 0.7))
        assert edges.values.sum() == 0

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError):
            canny_edges(np.zeros((2, 5)))

    def test_output_binary_and_shape_preserving(self):
        img = np.random.default_rng(3).random((17, 23))
        edges = canny_edges(img)
        assert edges.values.shape == img.shape
        assert set(np.unique(edges.values)) <= {0, 1}

    def test_vertical_step_edge_at_argmax_columns(self):
        # The smoothed step has its gradient argmax tied across the two
        # columns adjacent to the discontinuity; the symmetric tie rule
        # keeps both, so the edge is exactly those columns and no others.
        img = step_image()
        gx, gy = gradients(smooth(img, 1.0))
        mag = np.hypot(gx, gy)
        argmax_cols = set(np.nonzero(mag[8] == mag[8].max())[0])
        edges = canny_edges(img).values
        edge_cols = set(np.nonzero(edges.sum(axis=0))[0])
        assert edge_cols == argmax_cols
        assert np.all(edges[:, sorted(argmax_cols)] == 1)

    def test_asymmetric_step_edge_is_one_pixel_wide(self):
        img = np.zeros((16, 16))
        img[:, 8] = 0.3  # soft shoulder breaks the symmetry
        img[:, 9:] = 1.0
        edges = canny_edges(img).values
        widths = edges.sum(axis=1)
        assert np.all(widths == 1)

    def test_disk_edge_ring(self):
        radius = 10
        edges = canny_edges(disk_image(radius=radius)).values
        count = edges.sum()
        circumference = 2 * np.pi * radius
        assert 0.7 * circumference <= count <= 1.3 * circumference
        # ring is 8-connected: every edge pixel has an edge neighbour
        ys, xs = np.nonzero(edges)
        for y, x in zip(ys, xs):
            patch = edges[max(0, y - 1) : y + 2, max(0, x - 1) : x + 2]
            assert patch.sum() >= 2

    def test_matches_reference_on_shapes(self):
        for img in (step_image(), disk_image(32, 32, 8), np.tile(np.linspace(0, 1, 20), (20, 1))):
            assert np.array_equal(canny_edges(img).values, canny_reference(img))

    @given(
        arrays(np.float64, st.tuples(st.integers(6, 14), st.integers(6, 14)), elements=st.floats(0, 1)),
    )
    @settings(max_examples=30, deadline=None)
    def test_flip_equivariance(self, img):
        cfg = CannyConfig()
        flipped = canny_edges(img[:, ::-1], cfg).values
        assert np.array_equal(flipped[:, ::-1], canny_edges(img, cfg).values)

    @given(st.integers(0, 2**32 - 1), st.floats(0.25, 0.95))
    @settings(max_examples=25, deadline=None)
    def test_monotone_thresholds(self, seed, high):
        img = np.random.default_rng(seed).random((16, 16))
        lower = canny_edges(img, CannyConfig(high_fraction=0.2)).values
        higher = canny_edges(img, CannyConfig(high_fraction=max(high, 0.21))).values
        assert higher.sum() <= lower.sum()


class TestForegroundWeight:
    def test_balanced(self):
        t = np.zeros((4, 4), dtype=np.uint8)
        t[:2] = 1
        assert foreground_weight(t) == 1.0

    def test_two_ones(self):
        t = np.zeros((4, 4), dtype=np.uint8)
        t[0, 0] = t[0, 1] = 1
        assert foreground_weight(t) == 7.0

    def test_all_zero_convention(self):
        assert foreground_weight(np.zeros((5, 5), dtype=np.uint8)) == 1.0

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            foreground_weight(np.full((3, 3), 0.5))

    @given(arrays(np.uint8, (6, 6), elements=st.integers(0, 1)))
    def test_weight_is_exact_zero_one_ratio(self, t):
        ones = int(t.sum())
        if ones > 0:
            assert foreground_weight(t) == (t.size - ones) / ones


class TestPrecompute:
    @pytest.fixture(scope="class")
    @staticmethod
    def dataset(tmp_path_factory):
        root = tmp_path_factory.mktemp("ds")
        generate_synthetic_dataset(SyntheticConfig(count=8, seed=1), root)
        from edgeseg.corpus import build_split_manifest

        manifest = build_split_manifest(root, 0.25, seed=0)
        return root, manifest

    def test_writes_one_map_per_unlabelled_id(self, dataset, tmp_path):
        root, manifest = dataset
        cache = tmp_path / "cache"
        cfg = CannyConfig()
        assert precompute_edge_targets(manifest, root, cfg, cache) == len(manifest.unlabelled_ids)
        for sample_id in manifest.unlabelled_ids:
            assert edge_cache_path(cache, sample_id, cfg).exists()

    def test_idempotent_then_recomputes_on_config_change(self, dataset, tmp_path):
        root, manifest = dataset
        cache = tmp_path / "cache"
        cfg = CannyConfig()
        n = precompute_edge_targets(manifest, root, cfg, cache)
        assert precompute_edge_targets(manifest, root, cfg, cache) == 0
        cfg2 = CannyConfig(sigma=2.0)
        assert precompute_edge_targets(manifest, root, cfg2, cache) == n

    def test_cache_roundtrip_is_binary(self, dataset, tmp_path):
        root, manifest = dataset
        cache = tmp_path / "cache"
        cfg = CannyConfig()
        precompute_edge_targets(manifest, root, cfg, cache)
        loaded = load_cached_edge_target(cache, manifest.unlabelled_ids[0], cfg)
        assert set(np.unique(loaded)) <= {0, 1}
