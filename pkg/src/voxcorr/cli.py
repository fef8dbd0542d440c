"""Command-line pipeline: generate | preprocess | train | register | baseline
| evaluate | info.

Each command runs exactly one stage, reads/writes artifacts under the
workspace and appends a JSON line (timestamp, stage, params, duration) to
<workspace>/run_log.jsonl. Exit codes: 0 success, 2 validation failure
(bad flags, missing inputs), 1 runtime error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .baseline import multiscale_dvc
from .config import RunConfig, assign_splits
from .inference import sliding_register
from .metrics import evaluate_pair
from .figures import export_bdm_slices, export_displacement_magnitude, export_overlay_slices
from .model import CheckpointError, checkpoint_load, checkpoint_save
from .preprocess import DatasetManifest, build_dataset, otsu_threshold
from .tpms import add_base_plate, add_spheres, degrade_to_xct, gyroid_field, tpms_solid
from .training import train
from .volume import BinaryVolume, ScalarVolume, VolumeError, warp
from .vvol import VvolError, vvol_read, vvol_write


class CliError(Exception):
    """Validation failure; maps to exit code 2."""


def _thread_cap(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=int(n))
    except ImportError:
        return contextlib.nullcontext()


def _log_run(cfg: RunConfig, stage: str, params: dict, duration: float) -> None:
    ws = Path(cfg.workspace)
    ws.mkdir(parents=True, exist_ok=True)
    line = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "stage": stage,
        "params": params,
        "duration_sec": duration,
    }
    with open(ws / "run_log.jsonl", "a") as f:
        f.write(json.dumps(line, sort_keys=True) + "\n")


def _sample_id(c: float) -> str:
    return f"c{c:g}"


def _mask_extras(cfg: RunConfig, voxel_size):
    if not cfg.plate_voxels and not cfg.marker_spheres:
        return None

    def extras(mask):
        bv = BinaryVolume(mask, voxel_size)
        if cfg.plate_voxels:
            bv = add_base_plate(bv, cfg.plate_voxels)
        if cfg.marker_spheres:
            centers = [tuple(s[:3]) for s in cfg.marker_spheres]
            radii = [s[3] for s in cfg.marker_spheres]
            bv = add_spheres(bv, centers, radii)
        return bv.mask

    return extras


def cmd_generate(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    raw_dir = Path(cfg.workspace) / "raw"
    raw_dir.mkdir(parents=True, exist_ok=True)
    seed_base = cfg.seed * 10007
    for i, c in enumerate(cfg.c_values):
        sid = _sample_id(c)
        spec = replace(cfg.tpms, c_param=c)
        dims = spec.grid_dims()
        f = gyroid_field(dims, spec.voxel_size, spec.cell_size)
        vs = (spec.voxel_size,) * 3
        extras = _mask_extras(cfg, vs)
        solid = tpms_solid(f, spec)
        cad_mask = extras(solid.mask.copy()) if extras else solid.mask
        deform = replace(cfg.deform, seed=seed_base + 2 * i)
        degrade = replace(cfg.degrade, seed=seed_base + 2 * i + 1)
        xct, gt = degrade_to_xct(f, spec, deform, degrade, mask_extras=extras)
        sdir = raw_dir / sid
        sdir.mkdir(exist_ok=True)
        vvol_write(sdir / "cad.vvol", ScalarVolume(cad_mask.astype(np.float32), vs))
        vvol_write(sdir / "xct.vvol", xct)
        vvol_write(sdir / "gt_disp.vvol", gt)
        sidecar = {
            "id": sid,
            "c_param": c,
            "specs": {
                "tpms": asdict(spec),
                "deform": asdict(deform),
                "degrade": asdict(degrade),
                "plate_voxels": cfg.plate_voxels,
                "marker_spheres": [list(s) for s in cfg.marker_spheres],
            },
            "seeds": {"deform": deform.seed, "degrade": degrade.seed},
        }
        (sdir / "sample.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        print(
            f"{sid}: dims {dims[0]}x{dims[1]}x{dims[2]}, solid {cad_mask.mean():.1%}, "
            f"max |gt| {np.abs(gt.data).max():.2f} vox"
        )
    _log_run(cfg, "generate", {"c_values": list(cfg.c_values), "seed": cfg.seed}, time.perf_counter() - t0)
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    raw_dir = Path(cfg.workspace) / "raw"
    sidecars = sorted(raw_dir.glob("*/sample.json"))
    if not sidecars:
        raise CliError(f"no generated samples under {raw_dir}; run generate first")
    samples, cs = [], {}
    for sc in sidecars:
        meta = json.loads(sc.read_text())
        sid = meta["id"]
        cs[sid] = meta["c_param"]
        samples.append(
            {
                "id": sid,
                "c_param": meta["c_param"],
                "cad_path": str(sc.parent / "cad.vvol"),
                "xct_path": str(sc.parent / "xct.vvol"),
                "gt_disp_path": str(sc.parent / "gt_disp.vvol"),
            }
        )
    by_c = assign_splits(list(cs.values()))
    split_assignment = {sid: by_c[c] for sid, c in cs.items()}
    target = cfg.target_dims or vvol_read(samples[0]["cad_path"]).dims
    manifest = build_dataset(
        samples, target, split_assignment, Path(cfg.workspace) / "dataset", clean_spec=cfg.clean
    )
    for entry in manifest.samples:
        print(f"{entry.id}: split {entry.split}")
    print(f"manifest: {cfg.manifest_path()}")
    _log_run(cfg, "preprocess", {"target_dims": list(target)}, time.perf_counter() - t0)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    mpath = cfg.manifest_path()
    if not mpath.exists():
        raise CliError(f"manifest not found at {mpath}; run preprocess or pass --manifest")
    manifest = DatasetManifest.load(mpath)
    params, history = train(manifest, cfg.model, cfg.train, log_fn=print)
    ckpt = cfg.checkpoint_path()
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_save(params, cfg.model, ckpt)
    hist_path = Path(cfg.workspace) / "history.json"
    hist_path.write_text(json.dumps(history.to_json(), indent=2))
    print(f"checkpoint: {ckpt}")
    print(f"history: {hist_path}")
    _log_run(
        cfg,
        "train",
        {"epochs": cfg.train.epochs, "steps_per_epoch": cfg.train.steps_per_epoch, "seed": cfg.train.seed},
        time.perf_counter() - t0,
    )
    return 0


def _select_samples(cfg: RunConfig, sample: str | None) -> list:
    mpath = cfg.manifest_path()
    if not mpath.exists():
        raise CliError(f"manifest not found at {mpath}; run preprocess first")
    manifest = DatasetManifest.load(mpath)
    if sample:
        hits = [s for s in manifest.samples if s.id == sample]
        if not hits:
            raise CliError(f"sample {sample!r} not in manifest {mpath}")
        return hits
    test = manifest.split("test")
    if not test:
        raise CliError(f"manifest {mpath} has no test samples; pass --sample")
    return test


def cmd_register(cfg: RunConfig, sample: str | None, stride: int | None, sigma: float | None) -> int:
    t0 = time.perf_counter()
    ckpt = cfg.checkpoint_path()
    if not ckpt.exists():
        raise CliError(f"checkpoint not found at {ckpt}; pass --checkpoint or run train first")
    try:
        params, model_cfg = checkpoint_load(ckpt)
    except CheckpointError as e:
        raise CliError(str(e)) from e
    for entry in _select_samples(cfg, sample):
        moving = vvol_read(entry.xct_path)
        fixed = vvol_read(entry.cad_path)
        t_reg = time.perf_counter()
        moved, disp = sliding_register(
            params, model_cfg, moving, fixed,
            patch_size=model_cfg.patch_size, stride=stride, sigma=sigma,
        )
        runtime = time.perf_counter() - t_reg
        odir = Path(cfg.workspace) / "registered" / entry.id
        odir.mkdir(parents=True, exist_ok=True)
        vvol_write(odir / "moved.vvol", moved)
        vvol_write(odir / "disp.vvol", disp)
        (odir / "register.json").write_text(
            json.dumps({"sample_id": entry.id, "runtime_sec": runtime, "patch_size": model_cfg.patch_size}, indent=2)
        )
        print(f"{entry.id}: registered in {runtime:.1f}s -> {odir}")
    _log_run(cfg, "register", {"sample": sample}, time.perf_counter() - t0)
    return 0


def cmd_baseline(cfg: RunConfig, sample: str | None) -> int:
    t0 = time.perf_counter()
    for entry in _select_samples(cfg, sample):
        moving = vvol_read(entry.xct_path)
        fixed = vvol_read(entry.cad_path)
        t_reg = time.perf_counter()
        disp, nodes = multiscale_dvc(moving, fixed, cfg.dvc)
        moved = warp(moving, disp)
        runtime = time.perf_counter() - t_reg
        odir = Path(cfg.workspace) / "baseline" / entry.id
        odir.mkdir(parents=True, exist_ok=True)
        vvol_write(odir / "moved.vvol", moved)
        vvol_write(odir / "disp.vvol", disp)
        (odir / "nodes.json").write_text(json.dumps(nodes.to_json(), indent=2))
        (odir / "baseline.json").write_text(
            json.dumps({"sample_id": entry.id, "runtime_sec": runtime, "dvc": asdict(cfg.dvc)}, indent=2)
        )
        valid_pct = 100.0 * nodes.valid.mean()
        print(f"{entry.id}: baseline in {runtime:.1f}s, {valid_pct:.0f}% valid nodes -> {odir}")
    _log_run(cfg, "baseline", {"sample": sample}, time.perf_counter() - t0)
    return 0


def cmd_evaluate(cfg: RunConfig, sample: str | None, methods: list[str]) -> int:
    t0 = time.perf_counter()
    method_dirs = {"learned": "registered", "baseline": "baseline"}
    for entry in _select_samples(cfg, sample):
        cad = vvol_read(entry.cad_path)
        xct = vvol_read(entry.xct_path)
        gt = vvol_read(entry.gt_disp_path) if entry.gt_disp_path else None
        for method in methods:
            mdir = Path(cfg.workspace) / method_dirs[method] / entry.id
            moved_path = mdir / "moved.vvol"
            if not moved_path.exists():
                raise CliError(f"no {method} output for {entry.id}; expected {moved_path}")
            moved = vvol_read(moved_path)
            disp = vvol_read(mdir / "disp.vvol")
            meta_file = mdir / ("register.json" if method == "learned" else "baseline.json")
            runtime = json.loads(meta_file.read_text()).get("runtime_sec", 0.0) if meta_file.exists() else 0.0
            report, bdm_before, bdm_after = evaluate_pair(
                cad, xct, moved, disp, gt_disp=gt,
                sample_id=entry.id, method=method, runtime_sec=runtime,
            )
            rdir = Path(cfg.workspace) / "reports" / entry.id / method
            rdir.mkdir(parents=True, exist_ok=True)
            (rdir / "report.json").write_text(json.dumps(report.to_json(), indent=2))
            export_overlay_slices(cad, xct, rdir, prefix="overlay_before")
            export_overlay_slices(cad, moved, rdir, prefix="overlay_after")
            export_bdm_slices(bdm_before, rdir, prefix="bdm_before")
            export_bdm_slices(bdm_after, rdir, prefix="bdm_after")
            _, cad_bin = otsu_threshold(cad)
            export_displacement_magnitude(disp, cad_bin, rdir, prefix="dispmag")
            epe = "-" if report.mean_epe_vox is None else f"{report.mean_epe_vox:.3f}"
            print(
                f"{entry.id} [{method}]: dice {report.dice_before_pct:.1f}% -> {report.dice_after_pct:.1f}%, "
                f"BDM0 {report.bdm_before['zero']:.1f}% -> {report.bdm_after['zero']:.1f}%, "
                f"mean EPE {epe} vox, {runtime:.1f}s -> {rdir}"
            )
    _log_run(cfg, "evaluate", {"sample": sample, "methods": methods}, time.perf_counter() - t0)
    return 0


def cmd_info(cfg: RunConfig) -> int:
    print(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    ws = Path(cfg.workspace)
    artifacts = {
        "raw samples": sorted(p.parent.name for p in ws.glob("raw/*/sample.json")),
        "manifest": cfg.manifest_path().exists(),
        "checkpoint": cfg.checkpoint_path().exists(),
        "registered": sorted(p.parent.name for p in ws.glob("registered/*/moved.vvol")),
        "baseline": sorted(p.parent.name for p in ws.glob("baseline/*/moved.vvol")),
        "reports": sorted(str(p.relative_to(ws)) for p in ws.glob("reports/*/*/report.json")),
    }
    print(json.dumps({"artifacts": artifacts}, indent=2, sort_keys=True))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its fields")
    common.add_argument("--workspace", help="workspace directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")

    parser = argparse.ArgumentParser(prog="voxcorr", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], formatter_class=fmt,
                       help="synthesize the lattice sample sweep with ground truth")
    g.add_argument("--c-values", help="comma-separated level-set offsets (default: 0..-0.6 sweep)")
    g.add_argument("--voxel-um", type=float, help="voxel pitch in micrometers")
    g.add_argument("--extent-mm", type=float, help="part extent per axis in mm")
    g.add_argument("--plate-voxels", type=int, help="base plate thickness in voxels")

    p = sub.add_parser("preprocess", parents=[common], formatter_class=fmt,
                       help="clean, align, shape and normalize raw pairs into a dataset")
    p.add_argument("--target-dims", help="comma-separated nx,ny,nz")

    t = sub.add_parser("train", parents=[common], formatter_class=fmt,
                       help="train the registration network on the dataset")
    t.add_argument("--manifest", help="dataset manifest path")
    t.add_argument("--checkpoint", help="output checkpoint path")
    t.add_argument("--epochs", type=int, help="training epochs")
    t.add_argument("--steps-per-epoch", type=int, help="optimizer steps per epoch")
    t.add_argument("--batch-size", type=int, help="patch pairs per step")
    t.add_argument("--patch-size", type=int, help="training patch edge length")
    t.add_argument("--ncc-window", type=int, help="NCC window size (odd)")
    t.add_argument("--lr", type=float, help="initial learning rate")
    t.add_argument("--lambda-smooth", type=float, help="smoothness weight")

    r = sub.add_parser("register", parents=[common], formatter_class=fmt,
                       help="sliding-window registration of test samples")
    r.add_argument("--checkpoint", help="trained checkpoint path")
    r.add_argument("--manifest", help="dataset manifest path")
    r.add_argument("--sample", help="sample id (default: all test samples)")
    r.add_argument("--stride", type=int, help="patch stride (default patch/2)")
    r.add_argument("--sigma", type=float, help="blend window sigma (default patch/4)")

    b = sub.add_parser("baseline", parents=[common], formatter_class=fmt,
                       help="node-based DVC baseline on test samples")
    b.add_argument("--manifest", help="dataset manifest path")
    b.add_argument("--sample", help="sample id (default: all test samples)")
    b.add_argument("--node-spacing", type=int, help="node lattice spacing")
    b.add_argument("--window-halfsize", type=int, help="correlation window half-size")
    b.add_argument("--search-radius", type=int, help="search radius per level")
    b.add_argument("--levels", type=int, help="pyramid levels")

    e = sub.add_parser("evaluate", parents=[common], formatter_class=fmt,
                       help="metrics report and figure export for registered samples")
    e.add_argument("--manifest", help="dataset manifest path")
    e.add_argument("--sample", help="sample id (default: all test samples)")
    e.add_argument("--method", choices=["learned", "baseline", "both"], default="learned",
                   help="which registration output to evaluate")

    sub.add_parser("info", parents=[common], formatter_class=fmt,
                   help="print the resolved config and workspace artifacts")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.workspace:
        cfg = cfg.with_updates(workspace=args.workspace)
    if args.seed is not None:
        cfg = cfg.with_updates(seed=args.seed, train=replace(cfg.train, seed=args.seed))
    if args.threads is not None:
        cfg = cfg.with_updates(threads=args.threads)

    if args.command == "generate":
        if args.c_values:
            cfg = cfg.with_updates(c_values=tuple(float(c) for c in args.c_values.split(",")))
        tpms = cfg.tpms
        if args.voxel_um:
            tpms = replace(tpms, voxel_size=args.voxel_um)
        if args.extent_mm:
            tpms = replace(tpms, part_extent=args.extent_mm)
        cfg = cfg.with_updates(tpms=tpms)
        if args.plate_voxels is not None:
            cfg = cfg.with_updates(plate_voxels=args.plate_voxels)
    elif args.command == "preprocess":
        if args.target_dims:
            dims = tuple(int(v) for v in args.target_dims.split(","))
            if len(dims) != 3:
                raise CliError("--target-dims needs nx,ny,nz")
            cfg = cfg.with_updates(target_dims=dims)
    elif args.command == "train":
        if args.manifest:
            cfg = cfg.with_updates(manifest=args.manifest)
        if args.checkpoint:
            cfg = cfg.with_updates(checkpoint=args.checkpoint)
        tr, mo = cfg.train, cfg.model
        if args.epochs is not None:
            tr = replace(tr, epochs=args.epochs)
        if args.steps_per_epoch is not None:
            tr = replace(tr, steps_per_epoch=args.steps_per_epoch)
        if args.batch_size is not None:
            tr = replace(tr, batch_size=args.batch_size)
        if args.ncc_window is not None:
            tr = replace(tr, ncc_window=args.ncc_window)
        if args.lr is not None:
            tr = replace(tr, lr=args.lr)
        if args.lambda_smooth is not None:
            tr = replace(tr, lambda_smooth=args.lambda_smooth)
        if args.patch_size is not None:
            mo = replace(mo, patch_size=args.patch_size)
        cfg = cfg.with_updates(train=tr, model=mo)
    elif args.command in ("register", "baseline", "evaluate"):
        if getattr(args, "manifest", None):
            cfg = cfg.with_updates(manifest=args.manifest)
        if args.command == "register" and args.checkpoint:
            cfg = cfg.with_updates(checkpoint=args.checkpoint)
        if args.command == "baseline":
            dvc = cfg.dvc
            if args.node_spacing is not None:
                dvc = replace(dvc, node_spacing=args.node_spacing)
            if args.window_halfsize is not None:
                dvc = replace(dvc, window_halfsize=args.window_halfsize)
            if args.search_radius is not None:
                dvc = replace(dvc, search_radius=args.search_radius)
            if args.levels is not None:
                dvc = replace(dvc, pyramid_levels=args.levels)
            cfg = cfg.with_updates(dvc=dvc)
    return cfg


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        with _thread_cap(cfg.threads):
            if args.command == "generate":
                return cmd_generate(cfg)
            if args.command == "preprocess":
                return cmd_preprocess(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "register":
                return cmd_register(cfg, args.sample, args.stride, args.sigma)
            if args.command == "baseline":
                return cmd_baseline(cfg, args.sample)
            if args.command == "evaluate":
                methods = ["learned", "baseline"] if args.method == "both" else [args.method]
                return cmd_evaluate(cfg, args.sample, methods)
            if args.command == "info":
                return cmd_info(cfg)
            raise CliError(f"unknown command {args.command!r}")
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (VolumeError, VvolError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
