"""Training losses: local windowed NCC similarity and displacement smoothness.

The similarity term is the squared local normalized cross-correlation over a
w^3 neighbourhood. Window sums are computed with zero padding and normalized
by the per-window count of in-bounds voxels, so border windows use true local
statistics (a constant target has exactly zero variance everywhere and the
score is invariant to affine intensity changes, borders included). An epsilon
in the denominator keeps zero-variance windows finite. The loss is -mean(cc),
in [-1, 0].
"""
from __future__ import annotations

import numpy as np

from .volume import VolumeError

NCC_EPS = 1e-5


def _slide_sum(x: np.ndarray, w: int, axis: int) -> np.ndarray:
    r = w // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r + 1, r)  # one extra leading zero doubles as the cumsum base
    c = np.cumsum(np.pad(x, pad), axis=axis)
    hi = [slice(None)] * x.ndim
    lo = [slice(None)] * x.ndim
    hi[axis] = slice(w, None)
    lo[axis] = slice(None, -w)
    return c[tuple(hi)] - c[tuple(lo)]


def _boxsum(x: np.ndarray, w: int) -> np.ndarray:
    """Zero-padded sliding w^3 sum (self-adjoint)."""
    out = x
    for axis in range(x.ndim - 3, x.ndim):
        out = _slide_sum(out, w, axis)
    return out


def ncc_loss(a: np.ndarray, b: np.ndarray, window: int = 9) -> tuple[float, np.ndarray]:
    """Negated mean local squared NCC between a and b, plus d(loss)/da."""
    if a.shape != b.shape:
        raise VolumeError(f"shape mismatch {a.shape} vs {b.shape}")
    if window % 2 == 0 or window < 1:
        raise VolumeError(f"window must be odd and positive, got {window}")
    if window > min(a.shape[-3:]):
        raise VolumeError(f"window {window} exceeds patch extent {a.shape[-3:]}")
    af = a.astype(np.float64, copy=False)
    bf = b.astype(np.float64, copy=False)
    n = _boxsum(np.ones(a.shape[-3:]), window)  # in-bounds voxels per window

    sa = _boxsum(af, window)
    sb = _boxsum(bf, window)
    sab = _boxsum(af * bf, window)
    saa = _boxsum(af * af, window)
    sbb = _boxsum(bf * bf, window)

    cross = sab - sa * sb / n
    var_a = saa - sa * sa / n
    var_b = sbb - sb * sb / n
    den = var_a * var_b + NCC_EPS
    cc = cross * cross / den
    m = cc.size
    loss = -float(cc.mean())

    alpha = 2.0 * cross / den
    beta = cc * var_b / den  # cross^2 * var_b / den^2
    grad = -(
        bf * _boxsum(alpha, window)
        - _boxsum(alpha * (sb / n), window)
        - 2.0 * af * _boxsum(beta, window)
        + 2.0 * _boxsum(beta * (sa / n), window)
    ) / m
    return loss, grad.astype(a.dtype, copy=False)


def grad_l2_loss(disp: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared forward difference over channels, axes and voxels.

    The last slice along each axis has no forward difference and is excluded
    from both the sum and the sample count.
    """
    d = disp.astype(np.float64, copy=False)
    grad = np.zeros_like(d)
    diffs = []
    count = 0
    for axis in range(1, 4):
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        delta = d[tuple(hi)] - d[tuple(lo)]
        diffs.append((axis, delta))
        count += delta.size
    total = sum(float((delta * delta).sum()) for _, delta in diffs)
    loss = total / count
    for axis, delta in diffs:
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        g = 2.0 * delta / count
        grad[tuple(hi)] += g
        grad[tuple(lo)] -= g
    return loss, grad.astype(disp.dtype, copy=False)


def total_loss(
    moved: np.ndarray,
    fixed: np.ndarray,
    disp: np.ndarray,
    lam: float,
    window: int = 9,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity plus weighted smoothness; returns (loss, d/dmoved, d/ddisp)."""
    sim, d_moved = ncc_loss(moved, fixed, window)
    smooth, d_disp = grad_l2_loss(disp)
    return sim + lam * smooth, d_moved, lam * d_disp
