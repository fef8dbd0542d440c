"""Scan cleaning and dataset assembly.

The cleaning chain isolates the fabricated part from a raw grayscale scan:
global Otsu binarization, erosion to detach satellite debris, largest
connected component, dilation to undo the erosion bias, opening, and filling
of enclosed voids. Dataset building then aligns each cleaned scan to its
nominal volume, shapes both to a common grid and normalizes intensities.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import BinaryVolume, DisplacementField, IVec3, ScalarVolume, VolumeError, crop_or_pad, minmax_normalize
from .vvol import vvol_read, vvol_write

CROSS6 = ndimage.generate_binary_structure(3, 1)   # faces only
CUBE26 = np.ones((3, 3, 3), dtype=bool)

_STRUCTURES = {6: CROSS6, 26: CUBE26}


@dataclass(frozen=True)
class CleanSpec:
    erosion_radius: int = 1
    opening_radius: int = 1
    connectivity: int = 6

    def __post_init__(self):
        if self.erosion_radius < 0 or self.opening_radius < 0:
            raise VolumeError("morphology radii must be >= 0")
        if self.connectivity not in (6, 26):
            raise VolumeError(f"connectivity must be 6 or 26, got {self.connectivity}")


def otsu_threshold(vol: ScalarVolume, bins: int = 256) -> tuple[float, BinaryVolume]:
    """Global Otsu threshold over a [min, max] histogram.

    Candidate thresholds are the interior bin edges; the one maximizing the
    between-class variance wins, ties going to the lower edge. Foreground is
    strictly above the returned threshold (bins are right-closed, so the split
    is exact).
    """
    v = vol.data.astype(np.float64, copy=False).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        raise VolumeError("cannot threshold a constant volume")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="left") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=v, minlength=bins)

    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    w1 = v.size - w0
    s1 = sums.sum() - s0
    valid = (w0 > 0) & (w1 > 0)
    var_b = np.full(bins - 1, -np.inf)
    mu_diff = np.where(valid, s0 / np.maximum(w0, 1) - s1 / np.maximum(w1, 1), 0.0)
    var_b[valid] = (w0 * w1)[valid] * mu_diff[valid] ** 2
    best = int(np.argmax(var_b))
    thr = float(edges[best + 1])
    return thr, BinaryVolume(vol.data > thr, vol.voxel_size)


def morph_op(bin_vol: BinaryVolume, op: str, radius: int, connectivity: int = 6) -> BinaryVolume:
    """Erode/dilate/open/close with an r-ball structuring element (Manhattan
    metric for 6-connectivity, Chebyshev for 26). Radius 0 is the identity.

    The domain border is neutral: erosion treats the outside as solid and
    dilation as empty, so open(X) <= X <= close(X) holds on the full grid.
    """
    if radius < 0:
        raise VolumeError("radius must be >= 0")
    if connectivity not in _STRUCTURES:
        raise VolumeError(f"connectivity must be 6 or 26, got {connectivity}")
    if op not in ("erode", "dilate", "open", "close"):
        raise VolumeError(f"unknown morphology op {op!r}")
    if radius == 0:
        return BinaryVolume(bin_vol.mask.copy(), bin_vol.voxel_size)
    st = _STRUCTURES[connectivity]
    m = bin_vol.mask

    def erode(x):
        return ndimage.binary_erosion(x, structure=st, iterations=radius, border_value=1)

    def dilate(x):
        return ndimage.binary_dilation(x, structure=st, iterations=radius, border_value=0)

    if op == "erode":
        out = erode(m)
    elif op == "dilate":
        out = dilate(m)
    elif op == "open":
        out = dilate(erode(m))
    else:
        out = erode(dilate(m))
    return BinaryVolume(out, bin_vol.voxel_size)


def largest_component(bin_vol: BinaryVolume, connectivity: int = 6) -> BinaryVolume:
    """Keep only the largest connected component; ties go to the component
    containing the smallest linear index."""
    if connectivity not in _STRUCTURES:
        raise VolumeError(f"connectivity must be 6 or 26, got {connectivity}")
    if not bin_vol.mask.any():
        raise VolumeError("empty mask has no components")
    labels, n = ndimage.label(bin_vol.mask, structure=_STRUCTURES[connectivity])
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    top = sizes.max()
    candidates = np.flatnonzero(sizes == top)
    if len(candidates) > 1:
        flat = labels.ravel()
        winner = min(candidates, key=lambda lab: int(np.argmax(flat == lab)))
    else:
        winner = candidates[0]
    return BinaryVolume(labels == winner, bin_vol.voxel_size)


def fill_enclosed_voids(bin_vol: BinaryVolume) -> BinaryVolume:
    """Fill background regions not 6-connected to any volume face."""
    bg = ~bin_vol.mask
    labels, n = ndimage.label(bg, structure=CROSS6)
    if n == 0:
        return BinaryVolume(bin_vol.mask.copy(), bin_vol.voxel_size)
    border = np.unique(
        np.concatenate(
            [
                labels[0].ravel(), labels[-1].ravel(),
                labels[:, 0].ravel(), labels[:, -1].ravel(),
                labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
            ]
        )
    )
    reachable = np.isin(labels, border[border > 0])
    return BinaryVolume(bin_vol.mask | (bg & ~reachable), bin_vol.voxel_size)


def clean_xct(vol: ScalarVolume, spec: CleanSpec) -> tuple[ScalarVolume, BinaryVolume]:
    """Full cleaning chain; returns the masked grayscale (background set to the
    volume minimum) and the cleaned mask."""
    _, raw = otsu_threshold(vol)
    m = morph_op(raw, "erode", spec.erosion_radius, spec.connectivity)
    m = largest_component(m, spec.connectivity)
    m = morph_op(m, "dilate", spec.erosion_radius, spec.connectivity)
    m = morph_op(m, "open", spec.opening_radius, spec.connectivity)
    m = fill_enclosed_voids(m)
    lo = vol.data.min()
    gray = np.where(m.mask, vol.data, lo)
    return ScalarVolume(gray.astype(vol.data.dtype, copy=False), vol.voxel_size), m


def translate_int(vol: ScalarVolume, shift: IVec3, fill: float) -> ScalarVolume:
    """Shift content by integer (sx, sy, sz): out(x) = in(x - shift)."""
    sx, sy, sz = (int(s) for s in shift)
    out = np.full_like(vol.data, fill)
    nz, ny, nx = vol.data.shape

    def spans(n, s):
        return (slice(max(s, 0), min(n + s, n)), slice(max(-s, 0), min(n - s, n)))

    (dz, sz_), (dy, sy_), (dx, sx_) = spans(nz, sz), spans(ny, sy), spans(nx, sx)
    out[dz, dy, dx] = vol.data[sz_, sy_, sx_]
    return ScalarVolume(out, vol.voxel_size)


def foreground_centroid(vol: ScalarVolume) -> np.ndarray:
    """Otsu-foreground centroid as (x, y, z)."""
    _, b = otsu_threshold(vol)
    if not b.mask.any():
        raise VolumeError("empty foreground; cannot compute centroid")
    zz, yy, xx = np.nonzero(b.mask)
    return np.array([xx.mean(), yy.mean(), zz.mean()])


def coarse_align(moving: ScalarVolume, fixed: ScalarVolume) -> tuple[ScalarVolume, IVec3]:
    """Integer translation bringing the moving foreground centroid onto the
    fixed one; fill is the moving minimum. Returns (aligned, shift)."""
    shift = np.rint(foreground_centroid(fixed) - foreground_centroid(moving)).astype(int)
    aligned = translate_int(moving, tuple(shift), float(moving.data.min()))
    return aligned, (int(shift[0]), int(shift[1]), int(shift[2]))


@dataclass
class SampleEntry:
    id: str
    c_param: float
    cad_path: str
    xct_path: str
    split: str
    gt_disp_path: str | None = None


@dataclass
class DatasetManifest:
    samples: list[SampleEntry]
    target_dims: IVec3
    created_at: str = ""

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise VolumeError("sample ids must be unique")

    def split(self, name: str) -> list[SampleEntry]:
        return [s for s in self.samples if s.split == name]

    def to_json(self) -> dict:
        return {
            "samples": [asdict(s) for s in self.samples],
            "target_dims": list(self.target_dims),
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls(
            samples=[SampleEntry(**s) for s in d["samples"]],
            target_dims=tuple(d["target_dims"]),
            created_at=d.get("created_at", ""),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def _crop_field(disp: DisplacementField, target_dims: IVec3) -> DisplacementField:
    chans = [crop_or_pad(ScalarVolume(disp.data[c], disp.voxel_size), target_dims, 0.0).data for c in range(3)]
    return DisplacementField(np.stack(chans), disp.voxel_size)


def build_dataset(
    samples: list[dict],
    target_dims: IVec3,
    split_assignment: dict[str, str],
    out_dir,
    clean_spec: CleanSpec = CleanSpec(),
) -> DatasetManifest:
    """Preprocess raw sample pairs into a training-ready dataset.

    Per sample: clean the scan, align it to the nominal volume by foreground
    centroid, shape both to target_dims, min-max normalize, and write VVOL
    files plus a sidecar recording the cleaning parameters and alignment
    shift. The ground-truth field, when present, is shifted and cropped
    consistently. Deterministic given identical inputs.
    """
    if not samples:
        raise VolumeError("no samples to build")
    missing = [s["id"] for s in samples if s["id"] not in split_assignment]
    if missing:
        raise VolumeError(f"split assignment missing ids: {missing}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in sorted(samples, key=lambda d: d["id"]):
        sid = s["id"]
        try:
            cad = vvol_read(s["cad_path"])
            xct = vvol_read(s["xct_path"])
            if not isinstance(cad, ScalarVolume) or not isinstance(xct, ScalarVolume):
                raise VolumeError("cad and xct inputs must be scalar volumes")
            xct_gray, _ = clean_xct(xct, clean_spec)
            aligned, shift = coarse_align(xct_gray, cad)
            cad_out = minmax_normalize(crop_or_pad(cad, target_dims, float(cad.data.min())))
            xct_out = minmax_normalize(crop_or_pad(aligned, target_dims, float(aligned.data.min())))
            sdir = out_dir / sid
            sdir.mkdir(exist_ok=True)
            vvol_write(sdir / "cad.vvol", cad_out)
            vvol_write(sdir / "xct.vvol", xct_out)
            gt_path = None
            if s.get("gt_disp_path"):
                # the field lives on the fixed grid, which alignment does not
                # move; shifting the scan by s changes the field values by +s
                gt = vvol_read(s["gt_disp_path"])
                adj = gt.data.copy()
                for c in range(3):
                    adj[c] += shift[c]
                vvol_write(sdir / "gt_disp.vvol", _crop_field(DisplacementField(adj, gt.voxel_size), target_dims))
                gt_path = str(sdir / "gt_disp.vvol")
            sidecar = {
                "id": sid,
                "c_param": s.get("c_param", 0.0),
                "clean": asdict(clean_spec),
                "coarse_shift": list(shift),
                "target_dims": list(target_dims),
            }
            (sdir / "preprocess.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
            entries.append(
                SampleEntry(
                    id=sid,
                    c_param=float(s.get("c_param", 0.0)),
                    cad_path=str(sdir / "cad.vvol"),
                    xct_path=str(sdir / "xct.vvol"),
                    split=split_assignment[sid],
                    gt_disp_path=gt_path,
                )
            )
        except (VolumeError, OSError) as e:
            raise VolumeError(f"preprocessing failed for sample {sid!r}: {e}") from e
    manifest = DatasetManifest(
        samples=entries,
        target_dims=tuple(int(t) for t in target_dims),
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
