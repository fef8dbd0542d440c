"""Encoder-decoder registration network with skip connections.

The two input patches (moving scan, fixed nominal volume) are stacked into a
2-channel grid. Four encoder levels of conv + LeakyReLU + 2x max pooling feed
a decoder whose first four blocks upsample, concatenate the matching encoder
activation and convolve; two further full-resolution conv blocks refine the
features and a final convolution emits the 3-channel displacement field. The
moving patch warped by that field is returned along with a tape of
intermediates for the hand-written backward pass.

The displacement head starts at exactly zero (zero kernel and bias), so an
untrained network is the identity transform.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .layers import (
    conv3d_backward,
    conv3d_forward,
    leaky_relu_backward,
    leaky_relu_forward,
    maxpool3d_backward,
    maxpool3d_forward,
    upsample3d_backward,
    upsample3d_forward,
)
from .volume import VolumeError, warp_array


@dataclass(frozen=True)
class ModelConfig:
    enc_features: tuple[int, ...] = (32, 32, 32, 32)
    dec_features: tuple[int, ...] = (32, 32, 32, 32, 32, 16)
    kernel_size: int = 3
    leaky_slope: float = 0.2
    patch_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "enc_features", tuple(int(f) for f in self.enc_features))
        object.__setattr__(self, "dec_features", tuple(int(f) for f in self.dec_features))
        if self.kernel_size % 2 == 0:
            raise VolumeError("kernel_size must be odd")
        if len(self.dec_features) < len(self.enc_features):
            raise VolumeError("need at least one decoder block per encoder level")
        if self.patch_size % self.pool_factor:
            raise VolumeError(
                f"patch_size {self.patch_size} not divisible by {self.pool_factor}"
            )

    @property
    def pool_factor(self) -> int:
        return 2 ** len(self.enc_features)

    def to_json(self) -> dict:
        d = asdict(self)
        d["enc_features"] = list(self.enc_features)
        d["dec_features"] = list(self.dec_features)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(
            enc_features=tuple(d["enc_features"]),
            dec_features=tuple(d["dec_features"]),
            kernel_size=int(d["kernel_size"]),
            leaky_slope=float(d["leaky_slope"]),
            patch_size=int(d["patch_size"]),
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor shapes in fixed architectural order."""
    k = cfg.kernel_size
    enc = cfg.enc_features
    dec = cfg.dec_features
    n_up = len(enc)
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 2
    for i, f in enumerate(enc):
        shapes[f"enc{i}.w"] = (f, cin, k, k, k)
        shapes[f"enc{i}.b"] = (f,)
        cin = f
    for j, f in enumerate(dec):
        if j < n_up:
            skip = enc[n_up - 1 - j]
            shapes[f"dec{j}.w"] = (f, cin + skip, k, k, k)
        else:
            shapes[f"dec{j}.w"] = (f, cin, k, k, k)
        shapes[f"dec{j}.b"] = (f,)
        cin = f
    shapes["head.w"] = (3, cin, k, k, k)
    shapes["head.b"] = (3,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform [-b, b] with b = 1/sqrt(cin*k^3) per conv; zeroed head."""
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("head"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def _check_params(params: dict, cfg: ModelConfig) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise VolumeError(f"missing parameter tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise VolumeError(
                f"parameter {name!r} has shape {params[name].shape}, expected {shape}"
            )


def model_forward(params: dict, cfg: ModelConfig, moving: np.ndarray, fixed: np.ndarray, want_tape: bool = True):
    """Run the network on one patch pair.

    Returns (disp [3, p, p, p], moved [p, p, p], tape); tape is None when
    want_tape is False (inference).
    """
    if moving.shape != fixed.shape or moving.ndim != 3:
        raise VolumeError(f"patch shapes differ: {moving.shape} vs {fixed.shape}")
    if any(s % cfg.pool_factor for s in moving.shape):
        raise VolumeError(
            f"patch dims {moving.shape} must be divisible by {cfg.pool_factor}"
        )
    slope = cfg.leaky_slope
    n_up = len(cfg.enc_features)
    x = np.stack([moving, fixed])
    enc_tape, dec_tape, skips = [], [], []
    for i in range(n_up):
        y, cctx = conv3d_forward(x, params[f"enc{i}.w"], params[f"enc{i}.b"], want_ctx=want_tape)
        a, neg = leaky_relu_forward(y, slope)
        skips.append(a)
        x, pctx = maxpool3d_forward(a, 2)
        enc_tape.append((cctx, neg, pctx))
    for j in range(len(cfg.dec_features)):
        if j < n_up:
            up = upsample3d_forward(x, 2)
            skip = skips[n_up - 1 - j]
            x = np.concatenate([up, skip])
            split = up.shape[0]
        else:
            split = None
        y, cctx = conv3d_forward(x, params[f"dec{j}.w"], params[f"dec{j}.b"], want_ctx=want_tape)
        x, neg = leaky_relu_forward(y, slope)
        dec_tape.append((cctx, neg, split))
    disp, head_ctx = conv3d_forward(x, params["head.w"], params["head.b"], want_ctx=want_tape)
    moved, warp_grads = warp_array(moving, disp, with_grad=True)
    if not want_tape:
        return disp, moved, None
    tape = {
        "enc": enc_tape,
        "dec": dec_tape,
        "head": head_ctx,
        "warp": warp_grads,
        "slope": slope,
        "n_up": n_up,
    }
    return disp, moved, tape


def model_backward(tape: dict, d_moved: np.ndarray | None, d_disp: np.ndarray | None) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients for moved and/or disp."""
    slope = tape["slope"]
    n_up = tape["n_up"]
    gx, gy, gz = tape["warp"]
    if d_disp is None:
        g_disp = np.zeros((3,) + gx.shape, dtype=gx.dtype)
    else:
        g_disp = d_disp.copy()
    if d_moved is not None:
        g_disp[0] += d_moved * gx
        g_disp[1] += d_moved * gy
        g_disp[2] += d_moved * gz

    grads: dict[str, np.ndarray] = {}
    dx, grads["head.w"], grads["head.b"] = conv3d_backward(g_disp, tape["head"])
    skip_grads: list[np.ndarray | None] = [None] * n_up
    for j in reversed(range(len(tape["dec"]))):
        cctx, neg, split = tape["dec"][j]
        dy = leaky_relu_backward(dx, neg, slope)
        dcat, grads[f"dec{j}.w"], grads[f"dec{j}.b"] = conv3d_backward(dy, cctx)
        if split is None:
            dx = dcat
        else:
            skip_grads[n_up - 1 - j] = dcat[split:]
            dx = upsample3d_backward(dcat[:split], 2)
    for i in reversed(range(n_up)):
        cctx, neg, pctx = tape["enc"][i]
        da = maxpool3d_backward(dx, pctx)
        da += skip_grads[i]
        dy = leaky_relu_backward(da, neg, slope)
        dx, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = conv3d_backward(dy, cctx)
    return grads


# checkpoint container ---------------------------------------------------------

CKPT_MAGIC = b"VMCK"
CKPT_VERSION = 1


class CheckpointError(IOError):
    pass


def checkpoint_save(params: dict, cfg: ModelConfig, path) -> None:
    """magic | u32 version | u32 cfg JSON length | JSON | tensors in fixed
    order, each: u16 name length, name, u32 rank, u32 dims..., f32 payload."""
    _check_params(params, cfg)
    cfg_bytes = json.dumps(cfg.to_json(), sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    for name in param_shapes(cfg):
        t = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(t.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def checkpoint_load(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    if len(blob) < off + cfg_len:
        raise CheckpointError(f"{path}: truncated config block")
    cfg = ModelConfig.from_json(json.loads(blob[off : off + cfg_len].decode("utf-8")))
    off += cfg_len
    params: dict[str, np.ndarray] = {}
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if len(blob) < off + 2:
            raise CheckpointError(f"{path}: truncated before tensor {name!r}")
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        stored = blob[off : off + name_len].decode("utf-8")
        off += name_len
        if stored != name:
            raise CheckpointError(f"{path}: expected tensor {name!r}, found {stored!r}")
        if len(blob) < off + 4:
            raise CheckpointError(f"{path}: truncated rank of {name!r}")
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        if len(blob) < off + 4 * rank:
            raise CheckpointError(f"{path}: truncated dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        if dims != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {dims}, config requires {shape}"
            )
        count = int(np.prod(dims))
        if len(blob) < off + 4 * count:
            raise CheckpointError(f"{path}: truncated payload of {name!r}")
        params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
    return params, cfg
