"""Run configuration: one JSON document covering every pipeline stage.

Desk-scale defaults throughout; paper-scale settings (larger grids, patch 128,
window 9, more epochs) are reachable purely through the config file. Flags
override individual fields on top of the loaded config.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .baseline import DvcConfig
from .model import ModelConfig
from .preprocess import CleanSpec
from .tpms import DeformSpec, DegradeSpec, TpmsSpec
from .training import TrainConfig
from .volume import VolumeError

PAPER_C_SWEEP = (0.0, -0.1, -0.2, -0.3, -0.4, -0.5, -0.6)


@dataclass(frozen=True)
class RunConfig:
    workspace: str = "workspace"
    manifest: str | None = None         # default: <workspace>/dataset/manifest.json
    checkpoint: str | None = None       # default: <workspace>/checkpoint.vmck
    c_values: tuple[float, ...] = PAPER_C_SWEEP
    tpms: TpmsSpec = field(default_factory=lambda: TpmsSpec(part_extent=5.12, voxel_size=80.0))
    deform: DeformSpec = field(default_factory=DeformSpec)
    degrade: DegradeSpec = field(default_factory=DegradeSpec)
    clean: CleanSpec = field(default_factory=CleanSpec)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(patch_size=32))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(ncc_window=5))
    dvc: DvcConfig = field(default_factory=DvcConfig)
    target_dims: tuple[int, int, int] | None = None  # default: generator grid
    plate_voxels: int = 0
    marker_spheres: tuple = ()          # ((x, y, z, radius), ...) in voxels
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "c_values", tuple(float(c) for c in self.c_values))
        for c in self.c_values:
            if not (-1.0 <= c <= 1.0):
                raise VolumeError(f"c value {c} outside [-1, 1]")

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.workspace) / "dataset" / "manifest.json"

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.workspace) / "checkpoint.vmck"

    def to_json(self) -> dict:
        d = {
            "workspace": self.workspace,
            "manifest": self.manifest,
            "checkpoint": self.checkpoint,
            "c_values": list(self.c_values),
            "tpms": asdict(self.tpms),
            "deform": asdict(self.deform),
            "degrade": asdict(self.degrade),
            "clean": asdict(self.clean),
            "model": self.model.to_json(),
            "train": asdict(self.train),
            "dvc": asdict(self.dvc),
            "target_dims": list(self.target_dims) if self.target_dims else None,
            "plate_voxels": self.plate_voxels,
            "marker_spheres": [list(s) for s in self.marker_spheres],
            "seed": self.seed,
            "threads": self.threads,
        }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        kw: dict = {}
        if "workspace" in d:
            kw["workspace"] = d["workspace"]
        for key in ("manifest", "checkpoint", "plate_voxels", "seed", "threads"):
            if key in d and d[key] is not None:
                kw[key] = d[key]
        if d.get("c_values") is not None:
            kw["c_values"] = tuple(d["c_values"])
        if d.get("tpms"):
            kw["tpms"] = TpmsSpec(**d["tpms"])
        if d.get("deform"):
            kw["deform"] = DeformSpec(**d["deform"])
        if d.get("degrade"):
            kw["degrade"] = DegradeSpec(**d["degrade"])
        if d.get("clean"):
            kw["clean"] = CleanSpec(**d["clean"])
        if d.get("model"):
            kw["model"] = ModelConfig.from_json(d["model"])
        if d.get("train"):
            kw["train"] = TrainConfig(**d["train"])
        if d.get("dvc"):
            kw["dvc"] = DvcConfig(**d["dvc"])
        if d.get("target_dims"):
            kw["target_dims"] = tuple(d["target_dims"])
        if d.get("marker_spheres"):
            kw["marker_spheres"] = tuple(tuple(s) for s in d["marker_spheres"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    def with_updates(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def assign_splits(c_values: list[float]) -> dict[float, str]:
    """Split assignment over a level-set sweep, 60/20/20 by position.

    The seven-sample sweep 0 .. -0.6 gets the canonical assignment (train:
    0, -0.2, -0.3, -0.5; val: -0.1, -0.4; test: -0.6). Other sweeps follow the
    same positional pattern on the sorted values, guaranteeing each split is
    non-empty for three or more samples.
    """
    ordered = sorted(c_values, reverse=True)
    n = len(ordered)
    out: dict[float, str] = {}
    if n == 1:
        return {ordered[0]: "test"}
    if n == 2:
        return {ordered[0]: "train", ordered[1]: "val"}
    for i, c in enumerate(ordered):
        if i == n - 1:
            out[c] = "test"
        elif (i % 3) == 1:
            out[c] = "val"
        else:
            out[c] = "train"
    if not any(s == "val" for s in out.values()):
        out[ordered[1]] = "val"
    return out
