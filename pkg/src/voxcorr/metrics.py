"""Registration quality metrics: Dice overlap, binary difference maps and
endpoint error against synthetic ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import BinaryVolume, DisplacementField, ScalarVolume, VolumeError
from .preprocess import otsu_threshold

# int8 sentinel marking voxels outside the foreground union in a BDM map
BDM_OUTSIDE = np.int8(127)


@dataclass(frozen=True)
class BdmResult:
    """Trinary scan-minus-nominal map on the foreground union.

    map values: -1 material missing in the scan, 0 match, +1 excess material;
    BDM_OUTSIDE elsewhere. Percentages are of the union voxel count.
    """

    map: np.ndarray
    bdm_minus1_pct: float
    bdm_zero_pct: float
    bdm_plus1_pct: float

    @property
    def union(self) -> np.ndarray:
        return self.map != BDM_OUTSIDE


def dice(a: BinaryVolume, b: BinaryVolume) -> float:
    """Dice overlap in percent; two empty masks count as perfect agreement."""
    if a.mask.shape != b.mask.shape:
        raise VolumeError(f"dims mismatch: {a.dims} vs {b.dims}")
    na, nb = a.count(), b.count()
    if na + nb == 0:
        return 100.0
    inter = int((a.mask & b.mask).sum())
    return 100.0 * 2.0 * inter / (na + nb)


def bdm(xct_bin: BinaryVolume, cad_bin: BinaryVolume) -> BdmResult:
    """Per-voxel difference scan - nominal restricted to the foreground union."""
    if xct_bin.mask.shape != cad_bin.mask.shape:
        raise VolumeError(f"dims mismatch: {xct_bin.dims} vs {cad_bin.dims}")
    union = xct_bin.mask | cad_bin.mask
    n_union = int(union.sum())
    if n_union == 0:
        raise VolumeError("empty union: nothing to compare")
    diff = xct_bin.mask.astype(np.int8) - cad_bin.mask.astype(np.int8)
    out = np.where(union, diff, BDM_OUTSIDE).astype(np.int8)
    n_minus = int((diff[union] == -1).sum())
    n_zero = int((diff[union] == 0).sum())
    n_plus = n_union - n_minus - n_zero
    return BdmResult(
        map=out,
        bdm_minus1_pct=100.0 * n_minus / n_union,
        bdm_zero_pct=100.0 * n_zero / n_union,
        bdm_plus1_pct=100.0 * n_plus / n_union,
    )


def endpoint_error(
    pred: DisplacementField, gt: DisplacementField, mask: BinaryVolume
) -> tuple[float, float]:
    """Mean and max Euclidean error between fields over the mask (voxels)."""
    if pred.dims != gt.dims or pred.dims != mask.dims:
        raise VolumeError("field/mask dims mismatch")
    if not mask.mask.any():
        raise VolumeError("empty evaluation mask")
    d = pred.data.astype(np.float64) - gt.data.astype(np.float64)
    epe = np.sqrt((d * d).sum(axis=0))[mask.mask]
    return float(epe.mean()), float(epe.max())


@dataclass
class EvalReport:
    sample_id: str
    method: str
    dice_before_pct: float
    dice_after_pct: float
    bdm_before: dict
    bdm_after: dict
    mean_epe_vox: float | None
    max_epe_vox: float | None
    runtime_sec: float

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "method": self.method,
            "dice_before_pct": self.dice_before_pct,
            "dice_after_pct": self.dice_after_pct,
            "bdm_before": self.bdm_before,
            "bdm_after": self.bdm_after,
            "mean_epe_vox": self.mean_epe_vox,
            "max_epe_vox": self.max_epe_vox,
            "runtime_sec": self.runtime_sec,
        }


def _bdm_summary(r: BdmResult) -> dict:
    return {"minus1": r.bdm_minus1_pct, "zero": r.bdm_zero_pct, "plus1": r.bdm_plus1_pct}


def evaluate_pair(
    cad: ScalarVolume,
    xct: ScalarVolume,
    moved: ScalarVolume,
    disp: DisplacementField,
    gt_disp: DisplacementField | None = None,
    sample_id: str = "",
    method: str = "learned",
    runtime_sec: float = 0.0,
) -> tuple[EvalReport, BdmResult, BdmResult]:
    """Full before/after evaluation of one registration.

    All volumes are re-binarized with global Otsu (the warped scan is a fresh
    grayscale, so its own threshold applies). Endpoint error uses the nominal
    foreground as evaluation mask and is reported only when ground truth is
    available. Returns the report plus both BDM maps for figure export.
    """
    if not (cad.dims == xct.dims == moved.dims == disp.dims):
        raise VolumeError("evaluate_pair requires consistent dims")
    _, cad_bin = otsu_threshold(cad)
    _, xct_bin = otsu_threshold(xct)
    _, moved_bin = otsu_threshold(moved)
    bdm_before = bdm(xct_bin, cad_bin)
    bdm_after = bdm(moved_bin, cad_bin)
    mean_epe = max_epe = None
    if gt_disp is not None:
        mean_epe, max_epe = endpoint_error(disp, gt_disp, cad_bin)
    report = EvalReport(
        sample_id=sample_id,
        method=method,
        dice_before_pct=dice(xct_bin, cad_bin),
        dice_after_pct=dice(moved_bin, cad_bin),
        bdm_before=_bdm_summary(bdm_before),
        bdm_after=_bdm_summary(bdm_after),
        mean_epe_vox=mean_epe,
        max_epe_vox=max_epe,
        runtime_sec=runtime_sec,
    )
    return report, bdm_before, bdm_after
