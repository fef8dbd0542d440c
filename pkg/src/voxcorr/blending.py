"""Patch tiling and Gaussian-weighted recombination of patch outputs.

Patch grids cover the whole volume: origins step by the stride along each axis
and a clamped final origin at dims - patch_size is appended whenever the
regular stepping stops short, so inference never needs padding.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .volume import IVec3, VolumeError


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    origins: tuple[IVec3, ...]  # (x, y, z) corners, sorted lexicographically (z, y, x)


def _axis_origins(n: int, p: int, s: int) -> list[int]:
    out = list(range(0, n - p + 1, s))
    if out[-1] != n - p:
        out.append(n - p)
    return out


def make_patch_grid(dims: IVec3, patch_size: int, stride: int) -> PatchGrid:
    nx, ny, nz = (int(d) for d in dims)
    p, s = int(patch_size), int(stride)
    if s < 1:
        raise VolumeError(f"stride must be >= 1, got {s}")
    if p > min(nx, ny, nz):
        raise VolumeError(f"patch size {p} exceeds dims {dims}")
    ax = _axis_origins(nx, p, s)
    ay = _axis_origins(ny, p, s)
    az = _axis_origins(nz, p, s)
    origins = tuple((x, y, z) for z, y, x in product(az, ay, ax))
    return PatchGrid(p, s, origins)


def gaussian_window(patch_size: int, sigma: float | None = None) -> np.ndarray:
    """Separable patch weight [p, p, p], centred at (p-1)/2, continuous peak 1.

    Weights are floored at 1e-4 so accumulated blend weights never vanish.
    Default sigma is patch_size / 4.
    """
    p = int(patch_size)
    if sigma is None:
        sigma = p / 4.0
    if sigma <= 0:
        raise VolumeError(f"sigma must be positive, got {sigma}")
    i = np.arange(p, dtype=np.float64)
    g = np.exp(-((i - (p - 1) / 2.0) ** 2) / (2.0 * sigma * sigma))
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return np.maximum(w, 1e-4)


class BlendAccumulator:
    """Gaussian-weighted overlap-add of patch outputs into a full grid.

    One accumulator per worker when parallelising; merge() adds elementwise so
    a fixed worker order keeps results reproducible to round-off.
    """

    def __init__(self, dims: IVec3, channels: int, patch_size: int, sigma: float | None = None):
        nx, ny, nz = (int(d) for d in dims)
        self.dims = (nx, ny, nz)
        self.channels = int(channels)
        self.patch_size = int(patch_size)
        self.window = gaussian_window(patch_size, sigma)
        self.sigma = float(sigma) if sigma is not None else patch_size / 4.0
        self.weighted_sum = np.zeros((self.channels, nz, ny, nx), dtype=np.float64)
        self.weight_sum = np.zeros((nz, ny, nx), dtype=np.float64)

    def add(self, patch_data: np.ndarray, origin: IVec3) -> None:
        """Accumulate a [p,p,p] or [c,p,p,p] patch at (x, y, z) origin."""
        p = self.patch_size
        if patch_data.ndim == 3:
            patch_data = patch_data[None]
        if patch_data.shape != (self.channels, p, p, p):
            raise VolumeError(
                f"patch shape {patch_data.shape} does not match ({self.channels}, {p}, {p}, {p})"
            )
        ox, oy, oz = (int(o) for o in origin)
        nx, ny, nz = self.dims
        if not (0 <= ox <= nx - p and 0 <= oy <= ny - p and 0 <= oz <= nz - p):
            raise VolumeError(f"patch at {origin} does not fit inside dims {self.dims}")
        sl = (slice(oz, oz + p), slice(oy, oy + p), slice(ox, ox + p))
        self.weighted_sum[(slice(None),) + sl] += self.window * patch_data
        self.weight_sum[sl] += self.window

    def merge(self, other: "BlendAccumulator") -> None:
        self.weighted_sum += other.weighted_sum
        self.weight_sum += other.weight_sum

    def finalize(self) -> np.ndarray:
        """Weighted mean per voxel; [nz, ny, nx] for 1 channel else [c, nz, ny, nx]."""
        if np.any(self.weight_sum == 0.0):
            raise VolumeError("finalize called with uncovered voxels (zero blend weight)")
        out = self.weighted_sum / self.weight_sum
        return out[0] if self.channels == 1 else out
