"""Command-line driver: ``rayvote synth | aggregate | eval | bench``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation error.
The default worker count comes from ``RAYVOTE_THREADS`` (else 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import formats
from .aggregation import (
    DaConfig,
    FeaturePointCloud,
    RmaConfig,
    da_aggregate,
    rma_aggregate,
    va_aggregate,
    volume_to_cloud,
    voxelize,
)
from .geometry import SAMPLING_MODES, CameraView
from .metrics import compare_schemes
from .presets import PRESETS, synthesize
from .tsdf import scene_from_dict

THREADS_ENV = "RAYVOTE_THREADS"
SCHEMES = ("rma", "da", "va")
REPORT_COLUMNS = ("scheme", "points", "total_weight", "surface_mass", "occlusion_leakage", "mean_surface_distance")


class UsageError(Exception):
    pass


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def _triple(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _pair(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected WIDTH,HEIGHT, got {text!r}")
    return tuple(int(p) for p in parts)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def load_views(manifest: formats.SceneManifest) -> List[CameraView]:
    cams = formats.read_trajectory(manifest.resolve(manifest.trajectory))
    if len(cams) != len(manifest.features):
        raise formats.FormatError(
            f"trajectory has {len(cams)} cameras but manifest lists {len(manifest.features)} feature maps",
            None, manifest.resolve(manifest.trajectory))
    views = []
    for (k, pose), rel in zip(cams, manifest.features):
        fmap = formats.read_feature_map(manifest.resolve(rel), channels=manifest.channels)
        views.append(CameraView(k, pose, fmap))
    return views


def _config(cls, block: dict, overrides: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(block) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys in manifest: {', '.join(sorted(unknown))}")
    merged = dict(block)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def rma_config(manifest, args=None) -> RmaConfig:
    o = {}
    if args is not None:
        o = dict(samples_per_ray=args.samples, t_max=args.t_max, weight_threshold=args.theta,
                 sigmoid_scale=args.sigmoid_scale, sampling_mode=args.sampling, tsdf_lookup=args.lookup,
                 feature_weight=args.feature_weight)
    return _config(RmaConfig, manifest.rma, o)


def da_config(manifest, args=None) -> DaConfig:
    o = {}
    if args is not None:
        o = dict(k=args.k, samples_per_ray=args.samples, t_max=args.t_max, sampling_mode=args.sampling,
                 tsdf_lookup=args.lookup)
    return _config(DaConfig, manifest.da, o)


def run_scheme(scheme, grid, views, manifest, args=None, threads: int = 1) -> FeaturePointCloud:
    if scheme == "rma":
        return rma_aggregate(grid, views, rma_config(manifest, args), workers=threads)
    if scheme == "da":
        return da_aggregate(grid, views, da_config(manifest, args), workers=threads)
    if scheme == "va":
        va = dict(manifest.va)
        band = getattr(args, "band", None)
        if band is None:
            band = va.get("band")
        mode = getattr(args, "sampling", None) or va.get("sampling_mode", "nearest")
        vol = va_aggregate(views, grid.dims, grid.origin, grid.voxel_size, mode, workers=threads)
        return volume_to_cloud(vol, grid, np.inf if band is None else float(band))
    raise ValueError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if not args.voxel > 0:
        raise UsageError(f"--voxel must be positive, got {args.voxel}")
    if args.views < 1:
        raise UsageError("--views must be >= 1")
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
    s = synthesize(args.preset, args.views, args.dims, args.voxel, args.image, args.channels, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_tsdf(out / "grid.tsdf", s.grid)
    formats.write_trajectory(out / "cameras.txt", s.cameras)
    names = []
    for i, fmap in enumerate(s.feature_maps):
        name = f"view_{i:03d}.fmap"
        formats.write_feature_map(out / name, fmap)
        names.append(name)
    manifest = formats.SceneManifest(
        grid="grid.tsdf", trajectory="cameras.txt", features=names, channels=args.channels,
        output="cloud.ply", scene=s.scene.to_dict(), seed=args.seed,
        rma=asdict(RmaConfig()), da=asdict(DaConfig()), va={"band": None, "sampling_mode": "nearest"},
    )
    formats.write_manifest(out / "manifest.json", manifest)
    print(f"wrote {out / 'manifest.json'}: preset={args.preset} views={args.views} dims={args.dims} "
          f"voxel={args.voxel}")
    return 0


def _load(manifest_path):
    manifest = formats.read_manifest(manifest_path)
    grid = formats.read_tsdf(manifest.resolve(manifest.grid))
    return manifest, grid, load_views(manifest)


def cmd_aggregate(args) -> int:
    manifest, grid, views = _load(args.manifest)
    start = time.perf_counter()
    cloud = run_scheme(args.scheme, grid, views, manifest, args, args.threads)
    if args.merge_voxel is not None:
        cloud = voxelize(cloud, args.merge_voxel, workers=args.threads).to_cloud()
    elapsed = time.perf_counter() - start
    out = Path(args.out) if args.out else manifest.resolve(manifest.output)
    formats.write_ply(out, cloud)
    print(f"scheme: {args.scheme}")
    print(f"points: {len(cloud)}")
    print(f"total_weight: {cloud.total_weight:.6f}")
    print(f"wall_time_s: {elapsed:.3f}")
    print(f"output: {out}")
    return 0


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def cmd_eval(args) -> int:
    manifest, grid, views = _load(args.manifest)
    if manifest.scene is None:
        raise UsageError("manifest has no analytic 'scene' block; eval needs the oracle geometry")
    scene = scene_from_dict(manifest.scene)
    va_band = manifest.va.get("band")
    reports = compare_schemes(scene, grid, views, rma_config(manifest), da_config(manifest),
                              va_band=np.inf if va_band is None else float(va_band),
                              schemes=args.schemes, workers=args.threads)
    rows = [[_fmt(getattr(r, c)) for c in REPORT_COLUMNS] for r in reports]
    widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(REPORT_COLUMNS)]
    print("  ".join(c.ljust(w) for c, w in zip(REPORT_COLUMNS, widths)))
    for row in rows:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    if args.out:
        doc = {"schema_version": formats.MANIFEST_SCHEMA_VERSION, "columns": list(REPORT_COLUMNS),
               "reports": [r.as_dict() for r in reports]}
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def cmd_bench(args) -> int:
    manifest, grid, views = _load(args.manifest)
    cfg = rma_config(manifest)
    rays = sum(v.width * v.height for v in views)
    samples = rays * cfg.samples_per_ray
    timings = {}
    start = time.perf_counter()
    single = rma_aggregate(grid, views, cfg, workers=1)
    timings["rma_1"] = time.perf_counter() - start
    start = time.perf_counter()
    multi = rma_aggregate(grid, views, cfg, workers=args.threads)
    timings[f"rma_{args.threads}"] = time.perf_counter() - start
    same_shape = len(single) == len(multi)
    max_diff = 0.0
    if same_shape and len(single):
        max_diff = max(float(np.abs(a - b).max()) for a, b in
                       ((single.points, multi.points), (single.weights, multi.weights),
                        (single.features, multi.features)))
    for scheme in ("da", "va"):
        start = time.perf_counter()
        run_scheme(scheme, grid, views, manifest, None, args.threads)
        timings[scheme] = time.perf_counter() - start
    print(f"rays: {rays}")
    print(f"samples_per_ray: {cfg.samples_per_ray}")
    print(f"samples: {samples}")
    print(f"retained_points: {len(multi)}")
    for name, t in timings.items():
        print(f"wall_time_{name}_s: {t:.3f}")
    print(f"samples_per_second_1: {samples / max(timings['rma_1'], 1e-9):.1f}")
    print(f"samples_per_second_{args.threads}: {samples / max(timings[f'rma_{args.threads}'], 1e-9):.1f}")
    consistent = same_shape and max_diff <= 1e-6
    print(f"schedule_independent: {consistent} (max_abs_diff={max_diff:.3g})")
    return 0 if consistent else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_scheme_flags(p):
    p.add_argument("--theta", type=float, help="RMA weight threshold (default 0.05)")
    p.add_argument("--samples", type=int, help="samples per ray (default 300)")
    p.add_argument("--t-max", type=float, help="maximum ray distance in meters (default: grid diagonal)")
    p.add_argument("--sigmoid-scale", type=float, help="sigmoid sharpness in 1/m (default 25)")
    p.add_argument("--lookup", choices=("nearest", "trilinear"), help="TSDF lookup")
    p.add_argument("--feature-weight", choices=("weight", "alpha"), help="RMA per-point merge weight")
    p.add_argument("--k", type=int, help="DA half window (default 1)")
    p.add_argument("--band", type=float, help="VA near-surface band in meters (default: keep all)")
    p.add_argument("--sampling", choices=SAMPLING_MODES, help="feature sampling mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rayvote", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scene (grid, cameras, feature maps, manifest)")
    p.add_argument("--preset", required=True, help=f"one of: {', '.join(PRESETS)}")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--dims", type=_triple, default=(64, 64, 32), help="W,H,D voxel counts")
    p.add_argument("--voxel", type=float, default=0.04, help="voxel size in meters")
    p.add_argument("--image", type=_pair, default=(64, 64), help="feature map WIDTH,HEIGHT")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("aggregate", help="aggregate features into a PLY point cloud")
    p.add_argument("manifest")
    p.add_argument("--scheme", choices=SCHEMES, default="rma")
    _add_scheme_flags(p)
    p.add_argument("--merge-voxel", type=float, help="also merge into sparse voxels of this size before writing")
    p.add_argument("--out", help="PLY path (default: manifest output)")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("eval", help="compare schemes against the analytic scene")
    p.add_argument("manifest")
    p.add_argument("--schemes", nargs="+", choices=SCHEMES, default=list(SCHEMES))
    p.add_argument("--out", help="write the machine-readable report (JSON) here")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="ray marching throughput and thread-schedule check")
    p.add_argument("manifest")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "threads", None) is None and "threads" in vars(args):
            args.threads = _default_threads()
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"rayvote: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"rayvote: error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (formats.FormatError, OSError) as exc:
        print(f"rayvote: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"rayvote: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
