"""Slice-image exports: overlays, difference maps and displacement magnitude.

Images are written as binary PPM (P6) / PGM (P5) with maxval 255. For each
volume the three central orthogonal slices are exported; image dimensions
equal the slice dimensions (XZ: rows z, cols x; YZ: rows z, cols y; XY:
rows y, cols x).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .metrics import BDM_OUTSIDE, BdmResult
from .preprocess import otsu_threshold
from .volume import BinaryVolume, DisplacementField, ScalarVolume, VolumeError

GREEN = np.array([0, 200, 0], dtype=np.float64)
BDM_COLORS = {
    -1: np.array([0, 0, 255], dtype=np.uint8),
    0: np.array([255, 255, 255], dtype=np.uint8),
    1: np.array([255, 0, 0], dtype=np.uint8),
}
BDM_OUTSIDE_COLOR = np.array([220, 220, 220], dtype=np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    if img.ndim != 2 or img.dtype != np.uint8:
        raise VolumeError("PGM output requires a 2D uint8 image")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise VolumeError("PPM output requires an [h, w, 3] uint8 image")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def central_slices(data: np.ndarray) -> dict[str, np.ndarray]:
    """Central XZ, YZ, XY planes of a [z, y, x] grid."""
    nz, ny, nx = data.shape
    return {
        "xz": data[:, ny // 2, :],
        "yz": data[:, :, nx // 2],
        "xy": data[nz // 2, :, :],
    }


def _to_gray255(slice2d: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi > lo:
        g = (slice2d.astype(np.float64) - lo) / (hi - lo)
    else:
        g = np.zeros_like(slice2d, dtype=np.float64)
    return np.clip(g * 255.0, 0, 255)


def export_overlay_slices(fixed: ScalarVolume, moving: ScalarVolume, out_dir, prefix: str = "overlay") -> list[str]:
    """Nominal volume in green over the scan grayscale; overlap blended 50/50."""
    if fixed.dims != moving.dims:
        raise VolumeError(f"dims mismatch: {fixed.dims} vs {moving.dims}")
    _, fixed_bin = otsu_threshold(fixed)
    try:
        _, moving_bin = otsu_threshold(moving)
    except VolumeError:  # constant scan renders as empty foreground
        moving_bin = BinaryVolume(np.zeros(moving.data.shape, bool), moving.voxel_size)
    lo, hi = float(moving.data.min()), float(moving.data.max())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    f_slices = central_slices(fixed_bin.mask)
    m_slices = central_slices(moving_bin.mask)
    g_slices = central_slices(moving.data)
    for plane in ("xz", "yz", "xy"):
        gray = _to_gray255(g_slices[plane], lo, hi)
        img = np.repeat(gray[:, :, None], 3, axis=2)
        cad_only = f_slices[plane] & ~m_slices[plane]
        overlap = f_slices[plane] & m_slices[plane]
        img[cad_only] = GREEN
        img[overlap] = 0.5 * img[overlap] + 0.5 * GREEN
        p = out_dir / f"{prefix}_{plane}.ppm"
        write_ppm(p, np.clip(img, 0, 255).astype(np.uint8))
        paths.append(str(p))
    return paths


def export_bdm_slices(result: BdmResult, out_dir, prefix: str = "bdm") -> list[str]:
    """Blue = material missing in the scan, white = match, red = excess."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for plane, sl in central_slices(result.map).items():
        img = np.empty(sl.shape + (3,), dtype=np.uint8)
        img[:] = BDM_OUTSIDE_COLOR
        for value, color in BDM_COLORS.items():
            img[sl == value] = color
        img[sl == BDM_OUTSIDE] = BDM_OUTSIDE_COLOR
        p = out_dir / f"{prefix}_{plane}.ppm"
        write_ppm(p, img)
        paths.append(str(p))
    return paths


def export_displacement_magnitude(
    disp: DisplacementField, mask: BinaryVolume, out_dir, prefix: str = "dispmag"
) -> list[str]:
    """Per-voxel field magnitude, min-max scaled to 8 bits, background black.

    A constant nonzero magnitude (degenerate scaling) renders as mid-gray.
    """
    if disp.dims != mask.dims:
        raise VolumeError(f"dims mismatch: {disp.dims} vs {mask.dims}")
    mag = np.sqrt((disp.data.astype(np.float64) ** 2).sum(axis=0))
    lo, hi = float(mag.min()), float(mag.max())
    if hi > lo:
        scaled = (mag - lo) / (hi - lo) * 255.0
    elif hi == 0.0:
        scaled = np.zeros_like(mag)
    else:
        scaled = np.full_like(mag, 128.0)
    scaled[~mask.mask] = 0.0
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for plane, sl in central_slices(scaled).items():
        p = out_dir / f"{prefix}_{plane}.pgm"
        write_pgm(p, np.clip(sl, 0, 255).astype(np.uint8))
        paths.append(str(p))
    return paths
