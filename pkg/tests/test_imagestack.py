import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorfuse.imagestack import (
    ArrayIOError,
    Image,
    ImageError,
    PhiMap,
    denormalize,
    lab_to_rgb,
    load_array,
    load_image,
    load_phi_map,
    normalize,
    rgb_to_lab,
    save_array,
    save_image,
    save_phi_map,
)


class TestImageContainer:
    def test_rejects_nan(self):
        data = np.zeros((3, 4, 4), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ImageError):
            Image(data)

    def test_rejects_bad_channel_count(self):
        with pytest.raises(ImageError):
            Image(np.zeros((4, 2, 2)))

    def test_rejects_out_of_range(self):
        with pytest.raises(ImageError):
            Image(np.full((1, 2, 2), 1.5), "unit")

    def test_lab_ranges(self):
        data = np.zeros((3, 2, 2))
        data[0] = 50.0
        data[1] = 100.0
        Image(data, "unit", "Lab")
        data[0] = 120.0
        with pytest.raises(ImageError):
            Image(data, "unit", "Lab")


class TestPhiMap:
    def test_rejects_above_one(self):
        with pytest.raises(ImageError):
            PhiMap(np.full((1, 2, 2), 1.01))

    def test_rejects_negative(self):
        with pytest.raises(ImageError):
            PhiMap(np.full((1, 2, 2), -0.01))

    def test_accepts_bounds(self):
        pm = PhiMap(np.array([[[0.0, 1.0], [0.5, 0.25]]]))
        assert pm.shape == (1, 2, 2)


class TestRasterIO:
    def test_all_black(self, tmp_path):
        path = tmp_path / "black.png"
        save_image(path, Image(np.zeros((3, 2, 2)), "raw"))
        img = load_image(path)
        assert img.value_range == "raw"
        assert np.all(img.data == 0)

    def test_single_red_pixel(self, tmp_path):
        path = tmp_path / "red.png"
        save_image(path, Image(np.array([[[255.0]], [[0.0]], [[0.0]]]), "raw"))
        img = load_image(path)
        np.testing.assert_array_equal(img.data, [[[255.0]], [[0.0]], [[0.0]]])

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        raster = rng.integers(0, 256, size=(3, 17, 13)).astype(np.float32)
        path = tmp_path / "rt.png"
        save_image(path, Image(raster, "raw"))
        np.testing.assert_array_equal(load_image(path).data, raster)

    def test_grayscale_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        raster = rng.integers(0, 256, size=(1, 9, 9)).astype(np.float32)
        path = tmp_path / "g.png"
        save_image(path, Image(raster, "raw", "Gray"))
        loaded = load_image(path)
        assert loaded.colorspace == "Gray"
        np.testing.assert_array_equal(loaded.data, raster)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.png")

    def test_undecodable(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not a png")
        with pytest.raises(Exception):
            load_image(path)


class TestNormalization:
    def test_endpoints(self):
        img = Image(np.array([[[0.0, 255.0]]]), "raw", "Gray")
        out = normalize(img)
        np.testing.assert_allclose(out.data, [[[-0.5, 0.5]]])

    def test_midpoint(self):
        out = normalize(Image(np.full((1, 1, 1), 127.0), "raw", "Gray"))
        assert out.data[0, 0, 0] == pytest.approx(127.0 / 255.0 - 0.5, abs=1e-7)

    def test_denormalize_endpoints(self):
        img = Image(np.array([[[-0.5, 0.5]]]), "centered", "Gray")
        np.testing.assert_allclose(denormalize(img).data, [[[0.0, 255.0]]])

    def test_wrong_range_tag(self):
        with pytest.raises(ImageError):
            normalize(Image(np.zeros((1, 2, 2)), "unit", "Gray"))
        with pytest.raises(ImageError):
            denormalize(Image(np.zeros((1, 2, 2)), "unit", "Gray"))

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.integers(0, 256, size=(3, 6, 6)).astype(np.float32)
        back = denormalize(normalize(Image(raw, "raw")))
        assert np.max(np.abs(back.data - raw)) <= 1e-4


class TestColorConversion:
    def test_white_point(self):
        lab = rgb_to_lab(Image(np.ones((3, 1, 1)), "unit"))
        assert lab.data[0, 0, 0] == pytest.approx(100.0, abs=0.01)
        assert abs(lab.data[1, 0, 0]) < 0.5
        assert abs(lab.data[2, 0, 0]) < 0.5

    def test_black(self):
        lab = rgb_to_lab(Image(np.zeros((3, 1, 1)), "unit"))
        np.testing.assert_allclose(lab.data, 0.0, atol=1e-6)

    def test_round_trip_random_colors(self):
        rng = np.random.default_rng(2)
        rgb = rng.uniform(0, 1, size=(3, 16, 16)).astype(np.float32)
        back = lab_to_rgb(rgb_to_lab(Image(rgb, "unit")))
        assert np.max(np.abs(back.data - rgb)) < 1e-3

    def test_rejects_wrong_space(self):
        with pytest.raises(ImageError):
            rgb_to_lab(Image(np.zeros((3, 2, 2)), "raw"))
        with pytest.raises(ImageError):
            lab_to_rgb(Image(np.zeros((3, 2, 2)), "unit", "RGB"))


class TestArrayIO:
    def test_empty_grid(self, tmp_path):
        path = tmp_path / "empty.pfaf"
        save_array(path, np.zeros((0, 0), dtype=np.float32))
        out = load_array(path)
        assert out.shape == (0, 0)

    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        grid = rng.normal(size=(3, 4, 5)).astype(np.float32)
        path = tmp_path / "grid.pfaf"
        save_array(path, grid)
        out = load_array(path)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, grid)

    def test_f64_round_trip(self, tmp_path):
        grid = np.random.default_rng(4).normal(size=(7,))
        path = tmp_path / "g64.pfaf"
        save_array(path, grid)
        out = load_array(path)
        assert out.dtype == np.float64
        np.testing.assert_array_equal(out, grid)

    def test_rejects_nan(self, tmp_path):
        grid = np.array([1.0, np.nan], dtype=np.float32)
        with pytest.raises(ArrayIOError):
            save_array(tmp_path / "bad.pfaf", grid)

    def test_header_mismatch(self, tmp_path):
        path = tmp_path / "trunc.pfaf"
        save_array(path, np.ones((4, 4), dtype=np.float32))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ArrayIOError):
            load_array(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.pfaf"
        path.write_bytes(b"NOPE 1 3 f32 LE\n" + b"\x00" * 12)
        with pytest.raises(ArrayIOError):
            load_array(path)

    def test_header_format(self, tmp_path):
        path = tmp_path / "hdr.pfaf"
        save_array(path, np.zeros((2, 3), dtype=np.float32))
        first = path.read_bytes().split(b"\n", 1)[0]
        assert first == b"PFAF1 2 2 3 f32 LE"


class TestPhiPersistence:
    def test_exact_and_heatmap(self, tmp_path):
        rng = np.random.default_rng(5)
        phi = PhiMap(rng.uniform(0, 1, size=(3, 8, 8)).astype(np.float32))
        arr_path = tmp_path / "phi.pfaf"
        heat_path = tmp_path / "phi.png"
        save_phi_map(arr_path, phi, heat_path)
        np.testing.assert_array_equal(load_phi_map(arr_path).data, phi.data)
        assert heat_path.exists()
