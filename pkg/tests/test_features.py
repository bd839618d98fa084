import numpy as np
import pytest

from patternmine.features import (
    FeatureMap,
    FeaturePyramid,
    FormatError,
    builtin_extract,
    default_scales,
    l2_normalize_map,
    read_manifest,
    read_pyramid_file,
    write_manifest,
    write_pyramid_file,
    ImageManifestEntry,
)


def make_map(values, scale=1.0):
    return FeatureMap(scale_factor=scale, values=np.asarray(values, dtype=np.float32))


class TestNormalize:
    def test_exact_norm(self):
        m = l2_normalize_map(make_map([[[3.0, 4.0]]]))
        assert np.allclose(m.values[0, 0], [0.6, 0.8])

    def test_zero_cell_stays_zero(self):
        m = l2_normalize_map(make_map([[[0.0, 0.0]]]))
        assert np.all(m.values == 0)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        m = make_map(rng.normal(size=(5, 4, 7)))
        once = l2_normalize_map(m)
        twice = l2_normalize_map(once)
        assert np.allclose(once.values, twice.values, atol=1e-7)

    def test_unit_norms(self):
        rng = np.random.default_rng(1)
        m = l2_normalize_map(make_map(rng.normal(size=(6, 6, 11))))
        norms = np.linalg.norm(m.values, axis=2)
        assert np.allclose(norms, 1.0, atol=1e-5)

    def test_nonfinite_rejected(self):
        bad = np.ones((2, 2, 3), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(FormatError):
            l2_normalize_map(make_map(bad))


class TestScales:
    def test_seven_over_two_octaves(self):
        got = default_scales(7, 3)
        expected = [1, 0.7937, 0.6300, 0.5, 0.3969, 0.3150, 0.25]
        assert np.allclose(got, expected, atol=1e-4)

    def test_single(self):
        assert default_scales(1, 3) == [1.0]

    def test_whole_octaves(self):
        assert np.allclose(default_scales(4, 1), [1, 0.5, 0.25, 0.125])

    def test_invalid(self):
        with pytest.raises(ValueError):
            default_scales(0, 3)


class TestBuiltinExtract:
    def test_uniform_gray_is_symmetric(self):
        img = np.full((256, 256, 3), 128, dtype=np.uint8)
        pyr = builtin_extract(img, scales=[1.0])
        v = pyr.maps[0].values
        # no gradients anywhere, equal RGB channels
        assert np.allclose(v[..., :8], 0.0, atol=1e-6)
        first = v[0, 0]
        assert np.allclose(v, first[None, None, :], atol=1e-6)

    def test_copy_has_identical_pyramid(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(200, 300, 3), dtype=np.uint8)
        a = builtin_extract(img, scales=[1.0, 0.5])
        b = builtin_extract(img.copy(), scales=[1.0, 0.5])
        for ma, mb in zip(a.maps, b.maps):
            assert np.array_equal(ma.values, mb.values)

    def test_base_map_shape_oracle(self):
        # resize puts the longest side at 40 * 16 = 640 px; the grid is
        # then ceil(dim / 16) per side
        img = np.zeros((480, 640, 3), dtype=np.uint8)
        pyr = builtin_extract(img)
        h, w = 480 * 640 // 640, 640
        assert pyr.maps[0].width == int(np.ceil(w / 16)) == 40
        assert pyr.maps[0].height == int(np.ceil(h / 16)) == 30

    def test_scale_monotonicity(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, size=(300, 400, 3), dtype=np.uint8)
        pyr = builtin_extract(img)
        dims = [(m.height, m.width) for m in pyr.maps]
        for (h0, w0), (h1, w1) in zip(dims, dims[1:]):
            assert h1 <= h0 and w1 <= w0

    def test_extreme_aspect_rejected(self):
        img = np.zeros((4, 512, 3), dtype=np.uint8)
        with pytest.raises(FormatError):
            builtin_extract(img)


def random_pyramid(rng, num_scales=2, channels=5):
    maps = []
    scales = default_scales(num_scales, 3)
    for k, s in enumerate(scales):
        h, w = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        maps.append(FeatureMap(scale_factor=s,
                               values=rng.normal(size=(h, w, channels))
                               .astype(np.float32)))
    return FeaturePyramid(image_id="r", maps=maps)


class TestAmfpFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        for trial in range(20):
            pyr = random_pyramid(rng, num_scales=int(rng.integers(1, 4)))
            path = tmp_path / f"p{trial}.amfp"
            write_pyramid_file(path, pyr)
            back = read_pyramid_file(path, image_id="r")
            assert len(back.maps) == len(pyr.maps)
            for ma, mb in zip(pyr.maps, back.maps):
                assert np.float32(ma.scale_factor) == np.float32(mb.scale_factor)
                assert ma.values.tobytes() == mb.values.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.amfp"
        path.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(FormatError, match="magic"):
            read_pyramid_file(path)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(5)
        pyr = random_pyramid(rng)
        path = tmp_path / "t.amfp"
        write_pyramid_file(path, pyr)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(FormatError, match="truncated"):
            read_pyramid_file(path)

    def test_nan_payload_rejected(self, tmp_path):
        pyr = FeaturePyramid(image_id="n", maps=[
            make_map(np.full((2, 2, 3), np.nan))])
        path = tmp_path / "n.amfp"
        with pytest.raises(FormatError):
            write_pyramid_file(path, pyr)
        # and a file with NaNs written around the writer guard
        good = FeaturePyramid(image_id="n", maps=[make_map(np.ones((2, 2, 3)))])
        write_pyramid_file(path, good)
        raw = bytearray(path.read_bytes())
        raw[28:32] = np.array([np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="finite"):
            read_pyramid_file(path)


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [
            ImageManifestEntry("a", "/x/a.png", 640, 480, "a.amfp"),
            ImageManifestEntry("b", "/x/b.png", 300, 200, "b.amfp"),
        ]
        path = tmp_path / "manifest.jsonl"
        write_manifest(path, entries)
        assert read_manifest(path) == entries

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        write_manifest(path, [
            ImageManifestEntry("a", "p", 10, 10, "a.amfp"),
            ImageManifestEntry("a", "q", 10, 10, "b.amfp"),
        ])
        with pytest.raises(FormatError, match="duplicate"):
            read_manifest(path)

    def test_bad_dimensions_rejected(self):
        with pytest.raises(FormatError):
            ImageManifestEntry("a", "p", 0, 10, "a.amfp")
