import numpy as np
import pytest

from voxcorr.figures import (
    export_bdm_slices,
    export_displacement_magnitude,
    export_overlay_slices,
    write_pgm,
    write_ppm,
)
from voxcorr.metrics import bdm
from voxcorr.volume import BinaryVolume, DisplacementField, ScalarVolume


def read_pnm(path):
    blob = open(path, "rb").read()
    magic, dims, maxval, rest = blob.split(b"\n", 3)
    w, h = (int(t) for t in dims.split())
    arr = np.frombuffer(rest, dtype=np.uint8)
    if magic == b"P6":
        return arr.reshape(h, w, 3)
    return arr.reshape(h, w)


def box_volume(shape=(10, 12, 14), span=(2, 8)):
    data = np.zeros(shape, dtype=np.float32)
    data[span[0] : span[1], span[0] : span[1], span[0] : span[1]] = 1.0
    return ScalarVolume(data)


class TestWriters:
    def test_pgm_roundtrip(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        p = tmp_path / "x.pgm"
        write_pgm(p, img)
        np.testing.assert_array_equal(read_pnm(p), img)

    def test_ppm_roundtrip(self, tmp_path):
        img = np.arange(36, dtype=np.uint8).reshape(3, 4, 3)
        p = tmp_path / "x.ppm"
        write_ppm(p, img)
        np.testing.assert_array_equal(read_pnm(p), img)


class TestOverlay:
    def test_identical_volumes_no_pure_green(self, tmp_path):
        vol = box_volume()
        paths = export_overlay_slices(vol, vol, tmp_path)
        assert len(paths) == 3
        for p in paths:
            img = read_pnm(p).astype(int)
            pure_green = (img[..., 0] == 0) & (img[..., 1] == 200) & (img[..., 2] == 0)
            assert pure_green.sum() == 0

    def test_empty_scan_fully_green_foreground(self, tmp_path):
        cad = box_volume()
        xct = ScalarVolume(np.zeros(cad.data.shape, dtype=np.float32))
        paths = export_overlay_slices(cad, xct, tmp_path, prefix="empty")
        img = read_pnm(paths[2]).astype(int)  # xy plane
        inside = (slice(2, 8), slice(2, 8))
        assert np.all(img[inside] == [0, 200, 0])

    def test_image_dims_match_slices(self, tmp_path):
        vol = box_volume(shape=(10, 12, 14))
        paths = export_overlay_slices(vol, vol, tmp_path, prefix="dims")
        xz, yz, xy = (read_pnm(p) for p in paths)
        assert xz.shape[:2] == (10, 14)  # rows z, cols x
        assert yz.shape[:2] == (10, 12)  # rows z, cols y
        assert xy.shape[:2] == (12, 14)  # rows y, cols x


class TestBdmSlices:
    def test_all_match_is_white(self, tmp_path):
        m = box_volume().data > 0.5
        r = bdm(BinaryVolume(m), BinaryVolume(m))
        paths = export_bdm_slices(r, tmp_path)
        img = read_pnm(paths[0])
        union = central_slice_union = (img == 255).all(axis=2)
        assert union.any()
        # everything is either white (union) or light gray (outside)
        light = (img == 220).all(axis=2)
        assert np.all(union | light)

    def test_single_plus_one_red_pixel(self, tmp_path):
        cad = np.zeros((9, 9, 9), bool)
        cad[2:7, 2:7, 2:7] = True
        xct = cad.copy()
        xct[4, 4, 8] = True  # +1 voxel on the central xz/yz slices
        r = bdm(BinaryVolume(xct), BinaryVolume(cad))
        paths = export_bdm_slices(r, tmp_path)
        xz = read_pnm(paths[0]).astype(int)
        red = (xz[..., 0] == 255) & (xz[..., 1] == 0) & (xz[..., 2] == 0)
        assert red.sum() == 1

    def test_color_histogram_matches_percentages(self, tmp_path):
        # single-slice volume: slice color counts mirror the BDM percentages
        rng = np.random.default_rng(3)
        cad = rng.random((1, 16, 16)) > 0.5
        xct = rng.random((1, 16, 16)) > 0.5
        if not (cad | xct).any():
            cad[0, 0, 0] = True
        r = bdm(BinaryVolume(xct), BinaryVolume(cad))
        paths = export_bdm_slices(r, tmp_path, prefix="hist")
        xy = read_pnm(paths[2]).astype(int)
        n_union = int(r.union.sum())
        red = ((xy == [255, 0, 0]).all(axis=2)).sum()
        blue = ((xy == [0, 0, 255]).all(axis=2)).sum()
        white = ((xy == [255, 255, 255]).all(axis=2)).sum()
        assert red / n_union * 100 == pytest.approx(r.bdm_plus1_pct)
        assert blue / n_union * 100 == pytest.approx(r.bdm_minus1_pct)
        assert white / n_union * 100 == pytest.approx(r.bdm_zero_pct)


class TestDisplacementMagnitude:
    def test_zero_field_black(self, tmp_path):
        disp = DisplacementField(np.zeros((3, 8, 8, 8), dtype=np.float32))
        mask = BinaryVolume(np.ones((8, 8, 8), bool))
        paths = export_displacement_magnitude(disp, mask, tmp_path)
        for p in paths:
            assert read_pnm(p).max() == 0

    def test_constant_field_uniform_midgray(self, tmp_path):
        data = np.zeros((3, 8, 8, 8), dtype=np.float32)
        data[0] = 3.0
        disp = DisplacementField(data)
        mask = BinaryVolume(np.ones((8, 8, 8), bool))
        paths = export_displacement_magnitude(disp, mask, tmp_path, prefix="const")
        img = read_pnm(paths[0])
        assert np.all(img == 128)

    def test_magnitude_scaling(self, tmp_path):
        data = np.zeros((3, 4, 4, 4), dtype=np.float32)
        data[:, 2, 2, 2] = (1.0, 2.0, 2.0)  # |u| = 3 at one voxel
        data[:, 1, 1, 1] = (1.0, 0.0, 0.0)
        disp = DisplacementField(data)
        mask = BinaryVolume(np.ones((4, 4, 4), bool))
        paths = export_displacement_magnitude(disp, mask, tmp_path, prefix="scale")
        xy = read_pnm(paths[2])  # central xy plane holds the |u|=3 voxel
        assert xy.max() == 255

    def test_background_forced_black(self, tmp_path):
        rng = np.random.default_rng(1)
        disp = DisplacementField(rng.uniform(1, 2, (3, 6, 6, 6)).astype(np.float32))
        mask = BinaryVolume(np.zeros((6, 6, 6), bool))
        paths = export_displacement_magnitude(disp, mask, tmp_path, prefix="bg")
        for p in paths:
            assert read_pnm(p).max() == 0
