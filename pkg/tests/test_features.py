"""Color conversion, histograms, fused distances, and the embedding store."""

import math
import warnings

import numpy as np
import pytest

from mildnet.binio import FormatError
from mildnet.features import (
    COLOR_BINS,
    COLOR_DIM,
    FUSED_DIM,
    PATTERN_DIM,
    STRUCTURE_DIM,
    EmbeddingStore,
    FusedFeature,
    FusionWeights,
    RandomProjectionExtractor,
    default_extractors,
    extract_fused,
    fused_distance,
    fused_distances_to,
    lab_histogram,
    pack_fused,
    rgb_to_lab,
    unpack_fused,
)
from mildnet.ops import DimensionError, ParameterError


def scalar_lab(r, g, b):
    """Textbook sRGB(D65) -> CIELAB, one pixel, plain math module arithmetic."""

    def lin(u):
        u = u / 255.0
        return u / 12.92 if u <= 0.04045 else ((u + 0.055) / 1.055) ** 2.4

    rl, gl, bl = lin(r), lin(g), lin(b)
    x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl
    y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl
    z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl

    def f(t):
        return t ** (1.0 / 3.0) if t > (6.0 / 29.0) ** 3 else t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0

    fx = f(x / 0.95047)
    fy = f(y / 1.0)
    fz = f(z / 1.08883)
    return 116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)


class TestLabConversion:
    def test_white_black_gray(self):
        lab = rgb_to_lab(np.array([[255.0, 255.0, 255.0], [0.0, 0.0, 0.0], [118.0, 118.0, 118.0]]))
        assert abs(lab[0, 0] - 100.0) < 1e-3 and abs(lab[0, 1]) < 1e-3 and abs(lab[0, 2]) < 1e-3
        np.testing.assert_allclose(lab[1], [0.0, 0.0, 0.0], atol=1e-12)
        assert abs(lab[2, 1]) < 1e-3 and abs(lab[2, 2]) < 1e-3  # grays are neutral

    def test_primary_red_reference_value(self):
        l, a, b = rgb_to_lab(np.array([255.0, 0.0, 0.0]))
        assert abs(l - 53.2408) < 0.01
        assert abs(a - 80.0925) < 0.01
        assert abs(b - 67.2032) < 0.01

    def test_matches_scalar_oracle_on_random_pixels(self):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(200, 3)).astype(np.float64)
        got = rgb_to_lab(pixels)
        for i in range(200):
            want = scalar_lab(*pixels[i])
            np.testing.assert_allclose(got[i], want, rtol=1e-12, atol=1e-12)

    def test_works_on_image_layout(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(4, 5, 3)).astype(np.float64)
        out = rgb_to_lab(img)
        assert out.shape == (4, 5, 3)
        np.testing.assert_allclose(out[2, 3], scalar_lab(*img[2, 3]), rtol=1e-12)

    def test_validation(self):
        with pytest.raises(DimensionError):
            rgb_to_lab(np.zeros((4, 4)))
        with pytest.raises(ParameterError):
            rgb_to_lab(np.full((1, 3), 300.0))


class TestLabHistogram:
    def test_shape_and_block_sums(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(3, 9, 7)).astype(np.float64)
        h = lab_histogram(img)
        assert h.shape == (COLOR_DIM,)
        for b in range(3):
            block = h[b * COLOR_BINS : (b + 1) * COLOR_BINS]
            assert abs(block.sum() - 1.0) < 1e-12
            assert block.min() >= 0.0

    def test_monochrome_image_hits_one_bin_per_block(self):
        img = np.full((3, 6, 6), 37.0)
        h = lab_histogram(img)
        for b in range(3):
            block = h[b * COLOR_BINS : (b + 1) * COLOR_BINS]
            assert np.count_nonzero(block) == 1
            assert block.max() == 1.0

    def test_black_pixels_land_in_the_lowest_l_bin(self):
        h = lab_histogram(np.zeros((3, 4, 4)))
        assert h[0] == 1.0  # L=0 is the left edge of the first bin

    def test_bin_positions_follow_the_scalar_oracle(self):
        img = np.full((3, 2, 2), 0.0)
        img[0] = 200.0  # a red-ish constant image
        h = lab_histogram(img)
        l, a, b = scalar_lab(200.0, 0.0, 0.0)
        li = min(int((l - 0.0) / 100.0 * COLOR_BINS), COLOR_BINS - 1)
        ai = min(int((a + 128.0) / 255.0 * COLOR_BINS), COLOR_BINS - 1)
        bi = min(int((b + 128.0) / 255.0 * COLOR_BINS), COLOR_BINS - 1)
        assert h[li] == 1.0
        assert h[COLOR_BINS + ai] == 1.0
        assert h[2 * COLOR_BINS + bi] == 1.0

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            lab_histogram(np.zeros((1, 4, 4)))


class TestExtractors:
    def test_projection_deterministic_and_shaped(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, size=(3, 20, 20)).astype(np.float64)
        ex1 = RandomProjectionExtractor(64, seed=5)
        ex2 = RandomProjectionExtractor(64, seed=5)
        np.testing.assert_array_equal(ex1(img), ex2(img))
        assert ex1(img).shape == (64,)
        ex3 = RandomProjectionExtractor(64, seed=6)
        assert not np.array_equal(ex1(img), ex3(img))

    def test_extract_fused_blocks(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 256, size=(3, 16, 16)).astype(np.float64)
        feat = extract_fused(img)
        assert feat.structure.shape == (STRUCTURE_DIM,)
        assert feat.pattern.shape == (PATTERN_DIM,)
        assert feat.color.shape == (COLOR_DIM,)

    def test_pack_unpack_roundtrip(self):
        rng = np.random.default_rng(5)
        feat = FusedFeature(
            structure=rng.standard_normal(STRUCTURE_DIM),
            pattern=rng.standard_normal(PATTERN_DIM),
            color=rng.random(COLOR_DIM),
        )
        vec = pack_fused(feat)
        assert vec.shape == (FUSED_DIM,)
        back = unpack_fused(vec)
        np.testing.assert_array_equal(back.structure, feat.structure)
        np.testing.assert_array_equal(back.pattern, feat.pattern)
        np.testing.assert_array_equal(back.color, feat.color)

    def test_block_shape_validation(self):
        with pytest.raises(DimensionError):
            FusedFeature(np.zeros(3), np.zeros(PATTERN_DIM), np.zeros(COLOR_DIM))
        with pytest.raises(DimensionError):
            unpack_fused(np.zeros(10))


class TestFusedDistance:
    def rand_feature(self, rng):
        return FusedFeature(
            structure=rng.standard_normal(STRUCTURE_DIM),
            pattern=rng.standard_normal(PATTERN_DIM),
            color=rng.random(COLOR_DIM),
        )

    def test_weights_normalize(self):
        w = FusionWeights(0.5, 0.3, 0.2).normalized()
        assert w == (0.5, 0.3, 0.2)
        w2 = FusionWeights(5.0, 3.0, 2.0).normalized()
        np.testing.assert_allclose(w2, (0.5, 0.3, 0.2), rtol=1e-15)

    def test_weight_validation(self):
        with pytest.raises(ParameterError):
            FusionWeights(-0.1, 0.5, 0.6)
        with pytest.raises(ParameterError):
            FusionWeights(0.0, 0.0, 0.0)

    def test_identity_and_symmetry(self):
        rng = np.random.default_rng(6)
        a, b = self.rand_feature(rng), self.rand_feature(rng)
        assert fused_distance(a, a) == 0.0
        assert fused_distance(a, b) == fused_distance(b, a)
        assert fused_distance(a, b) > 0.0

    def test_single_block_weight_isolates_that_block(self):
        rng = np.random.default_rng(7)
        a, b = self.rand_feature(rng), self.rand_feature(rng)
        only_color = FusionWeights(0.0, 0.0, 1.0)
        d = fused_distance(a, b, only_color)
        want = float(np.linalg.norm(a.color - b.color)) / math.sqrt(COLOR_DIM)
        assert abs(d - want) < 1e-12

    def test_row_form_matches_scalar_form(self):
        rng = np.random.default_rng(8)
        feats = [self.rand_feature(rng) for _ in range(6)]
        q = feats[0]
        mat = np.stack([pack_fused(f) for f in feats[1:]])
        row = fused_distances_to(pack_fused(q), mat)
        for i, f in enumerate(feats[1:]):
            assert abs(row[i] - fused_distance(q, f)) < 1e-10

    def test_row_form_is_subset_stable(self):
        """A (query,row) distance must not depend on which rows accompany it."""
        rng = np.random.default_rng(9)
        mat = rng.standard_normal((8, FUSED_DIM))
        q = rng.standard_normal(FUSED_DIM)
        full = fused_distances_to(q, mat)
        sub = fused_distances_to(q, mat[[5, 2]])
        assert full[5] == sub[0] and full[2] == sub[1]

    def test_dim_validation(self):
        with pytest.raises(DimensionError):
            fused_distances_to(np.zeros(10), np.zeros((2, FUSED_DIM)))
        with pytest.raises(DimensionError):
            fused_distances_to(np.zeros(FUSED_DIM), np.zeros((2, 10)))


class TestEmbeddingStore:
    def test_put_get_reopen_roundtrip(self, tmp_path):
        path = tmp_path / "s.mlde"
        rng = np.random.default_rng(10)
        vecs = {f"id{i}": rng.standard_normal(6) for i in range(4)}
        with EmbeddingStore(path, dim=6) as store:
            for k, v in vecs.items():
                store.put(k, v)
            assert len(store) == 4
        with EmbeddingStore(path) as store:
            assert store.dim == 6
            assert sorted(store.ids()) == sorted(vecs)
            for k, v in vecs.items():
                np.testing.assert_array_equal(store.get(k), v.astype(np.float32))
                assert k in store
            assert store.get("missing") is None

    def test_duplicate_id_rejected(self, tmp_path):
        with EmbeddingStore(tmp_path / "s.mlde", dim=3) as store:
            store.put("a", np.zeros(3))
            with pytest.raises(ParameterError):
                store.put("a", np.ones(3))

    def test_dim_mismatch_rejected(self, tmp_path):
        path = tmp_path / "s.mlde"
        with EmbeddingStore(path, dim=3) as store:
            with pytest.raises(DimensionError):
                store.put("a", np.zeros(4))
        with pytest.raises(DimensionError):
            EmbeddingStore(path, dim=5)

    def test_new_store_requires_dim(self, tmp_path):
        with pytest.raises(ParameterError):
            EmbeddingStore(tmp_path / "new.mlde")

    def test_truncated_tail_recovered_with_warning(self, tmp_path):
        path = tmp_path / "s.mlde"
        with EmbeddingStore(path, dim=4) as store:
            store.put("keep1", np.arange(4.0))
            store.put("keep2", np.arange(4.0) + 1)
            store.put("lost", np.arange(4.0) + 2)
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])  # cut into the final record
        with pytest.warns(UserWarning, match="truncated"):
            store = EmbeddingStore(path)
        try:
            assert sorted(store.ids()) == ["keep1", "keep2"]
            store.put("fresh", np.zeros(4))
        finally:
            store.close()
        with warnings.catch_warnings():
            warnings.simplefilter("error")  # the repaired file must reopen cleanly
            with EmbeddingStore(path) as again:
                assert sorted(again.ids()) == ["fresh", "keep1", "keep2"]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "s.mlde"
        path.write_bytes(b"JUNK" + bytes(20))
        with pytest.raises(FormatError):
            EmbeddingStore(path)

    def test_values_are_f32_quantized(self, tmp_path):
        with EmbeddingStore(tmp_path / "s.mlde", dim=2) as store:
            store.put("x", np.array([1.0 / 3.0, 2.0 / 3.0]))
            got = store.get("x")
            assert got.dtype == np.float32
            np.testing.assert_array_equal(
                got, np.array([1.0 / 3.0, 2.0 / 3.0], dtype=np.float32)
            )
