"""Command-line pipeline: estimate, evaluate, extract-mask, reconstruct,
gradcheck, train-toy.

All diagnostics are line-delimited JSON on stderr; command results (metric
reports, manifests, gradcheck summaries) are JSON on stdout. Exit codes:
0 success, 1 internal error, 2 usage or input error. Outputs are
byte-reproducible for identical inputs regardless of the worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import exporters, masks, reconstruct
from .gradients import TrainToyConfig, grad_check, registered_ops, train_toy
from .metrics import evaluate
from .network import load_weights, predict_elevation
from .raster import (
    Geotransform,
    Raster,
    RasterError,
    fuse_patches,
    gaussian_filter,
    plan_tiles,
    read_raster,
    write_raster,
)


class InputError(Exception):
    """User-facing input problem; maps to exit code 2."""


def log_event(**fields) -> None:
    print(json.dumps(fields, sort_keys=True), file=sys.stderr)


def _load_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError("config file must hold a JSON object")
    return cfg


def _resolve(args, config: dict, key: str, default):
    """Flag value if given, else config-file value, else the default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def _require_file(path, what: str) -> str:
    if path is None:
        raise InputError(f"missing required {what}")
    if not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _read_image(path) -> np.ndarray:
    r = read_raster(path)
    data = r.data
    if data.ndim == 2:
        data = np.stack([data] * 3, axis=2)
    if data.ndim != 3 or data.shape[2] != 3:
        raise InputError(f"{path}: expected a 1- or 3-band image")
    return data / 255.0


def _read_mask(path, like_shape) -> np.ndarray:
    r = read_raster(path)
    data = r.data
    if data.ndim == 3:
        data = data[:, :, 0]
    if data.shape != like_shape:
        raise InputError(f"mask shape {data.shape} does not match raster {like_shape}")
    return (data != 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# estimate


def cmd_estimate(args) -> int:
    config = _load_config(args.config)
    image_path = _require_file(_resolve(args, config, "image", None), "input image")
    weights_path = _require_file(_resolve(args, config, "weights", None), "weights file")
    out_path = _resolve(args, config, "out", None)
    if out_path is None:
        raise InputError("missing required output path")
    tile = int(_resolve(args, config, "tile", 512))
    overlap = int(_resolve(args, config, "overlap", 64))
    sigma = float(_resolve(args, config, "sigma", 2.0))
    workers = _resolve(args, config, "workers", None)
    workers = int(workers) if workers is not None else (os.cpu_count() or 1)
    cellsize = float(_resolve(args, config, "cellsize", 1.0))

    image = _read_image(image_path)
    h, w, _ = image.shape
    if h % 8 or w % 8:
        raise InputError(f"image extents must be divisible by 8, got {h}x{w}")
    try:
        params = load_weights(weights_path)
    except (ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"invalid weights file: {exc}") from exc
    plan = plan_tiles(h, w, tile=tile, overlap=overlap)
    if plan.tile_h % 8 or plan.tile_w % 8:
        raise InputError("effective tile extents must be divisible by 8")
    log_event(event="tiles_planned", count=len(plan), tile=[plan.tile_h, plan.tile_w],
              overlap=plan.overlap)

    def run_tile(anchor):
        r, c = anchor
        sub = image[r:r + plan.tile_h, c:c + plan.tile_w]
        return anchor, predict_elevation(sub, params)

    if workers > 1 and len(plan) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            patches = list(pool.map(run_tile, plan.anchors))
    else:
        patches = [run_tile(a) for a in plan.anchors]

    fused = fuse_patches(patches, h, w)
    fused.geo = Geotransform(0.0, h * cellsize, cellsize, cellsize)
    smoothed = gaussian_filter(fused, sigma)
    write_raster(smoothed, out_path)
    log_event(event="estimate_done", out=str(out_path), tiles=len(plan), sigma=sigma)
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    pred_path = _require_file(_resolve(args, config, "pred", None), "prediction raster")
    gt_path = _require_file(_resolve(args, config, "gt", None), "ground-truth raster")
    mask_path = _resolve(args, config, "mask", None)

    pred = read_raster(pred_path)
    gt = read_raster(gt_path)
    if pred.data.shape != gt.data.shape:
        raise InputError(f"raster shapes differ: {pred.data.shape} vs {gt.data.shape}")
    valid = pred.valid_mask() & gt.valid_mask()
    if mask_path is not None:
        _require_file(mask_path, "mask raster")
        valid = valid & _read_mask(mask_path, gt.data.shape).astype(bool)
    try:
        report = evaluate(pred.data, gt.data, valid=valid)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    payload = json.dumps(report.to_dict(), sort_keys=True)
    print(payload)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
    return 0


# ---------------------------------------------------------------------------
# extract-mask (threshold stub over label rasters)


def cmd_extract_mask(args) -> int:
    config = _load_config(args.config)
    labels_path = _require_file(_resolve(args, config, "labels", None), "label raster")
    out_path = _resolve(args, config, "out", None)
    if out_path is None:
        raise InputError("missing required output path")
    class_id = float(_resolve(args, config, "class_id", 1))

    labels = read_raster(labels_path)
    data = labels.data if labels.data.ndim == 2 else labels.data[:, :, 0]
    mask = masks.binarize(data, class_id)
    write_raster(Raster(data=mask * 255.0), out_path)
    log_event(event="mask_written", out=str(out_path),
              building_pixels=int(mask.sum()))
    return 0


# ---------------------------------------------------------------------------
# reconstruct


def cmd_reconstruct(args) -> int:
    config = _load_config(args.config)
    dsm_path = _resolve(args, config, "dsm", None)
    oracle_path = _resolve(args, config, "oracle_dsm", None)
    if (dsm_path is None) == (oracle_path is None):
        raise InputError("exactly one of --dsm / --oracle-dsm is required")
    oracle_mode = oracle_path is not None
    dsm_path = _require_file(oracle_path if oracle_mode else dsm_path, "DSM raster")
    mask_path = _require_file(_resolve(args, config, "mask", None), "building mask")
    outdir = _resolve(args, config, "outdir", None)
    if outdir is None:
        raise InputError("missing required output directory")
    os.makedirs(outdir, exist_ok=True)
    sigma = float(_resolve(args, config, "sigma", 0.0))
    stat = str(_resolve(args, config, "stat", "median"))
    base = float(_resolve(args, config, "base", 0.0))
    min_area = int(_resolve(args, config, "min_area", 20))
    simplify_tol = float(_resolve(args, config, "simplify_tol", 0.0))
    epsg = _resolve(args, config, "epsg", None)
    epsg = int(epsg) if epsg is not None else None
    image_path = _resolve(args, config, "image", None)

    dsm = read_raster(dsm_path)
    if sigma > 0:
        dsm = gaussian_filter(dsm, sigma)
    mask = _read_mask(mask_path, dsm.data.shape)
    masked = reconstruct.mask_elevation(dsm, mask)

    manifest = {"oracle_mode": oracle_mode, "outputs": {}, "warnings": []}
    if not mask.any():
        manifest["warnings"].append("mask is empty; nothing to reconstruct")

    image = None
    if image_path is not None:
        _require_file(image_path, "color image")
        image = Raster(data=_read_image(image_path) * 255.0)

    cloud = reconstruct.to_point_cloud(masked, geo=dsm.geo, image=image,
                                       skip_zero=True)
    manifest["n_points"] = len(cloud)
    if args.ply:
        path = os.path.join(outdir, "buildings.ply")
        exporters.write_ply(cloud, path, binary=not args.ascii_ply)
        manifest["outputs"]["ply"] = "buildings.ply"

    mesh = reconstruct.heightfield_mesh(masked, mask, geo=dsm.geo, base=base)
    manifest["n_triangles"] = len(mesh)
    if args.obj:
        path = os.path.join(outdir, "buildings.obj")
        exporters.write_obj(mesh, path)
        manifest["outputs"]["obj"] = "buildings.obj"

    labels, n_components = masks.connected_components(mask, connectivity=8)
    polys = masks.extract_contours(mask, geo=dsm.geo, min_area=min_area,
                                   connectivity=8, merge_collinear=True)
    if simplify_tol > 0:
        polys = [masks.simplify(p, simplify_tol) for p in polys]
    model = reconstruct.extrude_lod1(polys, dsm, labels, base=base, stat=stat)
    manifest["n_components"] = n_components
    manifest["n_buildings"] = len(model)
    manifest["n_dropped"] = model.n_dropped
    if args.citygml:
        path = os.path.join(outdir, "buildings.gml")
        exporters.write_citygml(model, path, epsg=epsg)
        manifest["outputs"]["citygml"] = "buildings.gml"
    if args.polygons:
        path = os.path.join(outdir, "footprints.json")
        exporters.write_polygons_json(polys, path)
        manifest["outputs"]["polygons"] = "footprints.json"

    payload = json.dumps(manifest, sort_keys=True, indent=2)
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        fh.write(payload + "\n")
    print(payload)
    return 0


# ---------------------------------------------------------------------------
# gradcheck / train-toy


def cmd_gradcheck(args) -> int:
    ops = args.ops.split(",") if args.ops else registered_ops()
    reports = {}
    all_passed = True
    for op in ops:
        per_seed = []
        for seed in range(args.seed, args.seed + args.seeds):
            try:
                report = grad_check(op, seed=seed, tol=args.tol)
            except KeyError as exc:
                raise InputError(str(exc)) from exc
            per_seed.append(report.to_dict())
            all_passed &= report.passed
        reports[op] = per_seed
    summary = {"passed": all_passed, "ops": reports}
    print(json.dumps(summary, sort_keys=True))
    return 0 if all_passed else 1


def cmd_train_toy(args) -> int:
    cfg = TrainToyConfig()
    trace = train_toy(cfg, seed=args.seed, iters=args.iters)
    payload = json.dumps(trace.to_dict(), sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
    print(payload)
    if args.save_weights:
        from .network import save_weights

        save_weights(trace.params, args.save_weights)
        log_event(event="weights_saved", out=str(args.save_weights))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsm3d",
        description="Single-image elevation estimation and LOD1 building "
                    "reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="JSON config file; flags take precedence")

    p = sub.add_parser("estimate", help="tiled elevation inference to .asc")
    add_config(p)
    p.add_argument("--image", help="input image (PNG)")
    p.add_argument("--weights", help="model weights file")
    p.add_argument("--out", help="output elevation raster (.asc)")
    p.add_argument("--tile", type=int, help="tile size in pixels (default 512)")
    p.add_argument("--overlap", type=int, help="tile overlap in pixels (default 64)")
    p.add_argument("--sigma", type=float, help="Gaussian smoothing sigma (default 2.0)")
    p.add_argument("--workers", type=int, help="tile worker threads")
    p.add_argument("--cellsize", type=float, help="world units per pixel (default 1)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="score a prediction against ground truth")
    add_config(p)
    p.add_argument("--pred", help="predicted elevation raster")
    p.add_argument("--gt", help="ground-truth elevation raster")
    p.add_argument("--mask", help="optional validity mask raster")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract-mask", help="binarize a label raster")
    add_config(p)
    p.add_argument("--labels", help="label raster")
    p.add_argument("--class-id", dest="class_id", type=float,
                   help="label value of the building class (default 1)")
    p.add_argument("--out", help="output mask PNG (0/255)")
    p.set_defaults(func=cmd_extract_mask)

    p = sub.add_parser("reconstruct", help="DSM + mask to point cloud / mesh / LOD1")
    add_config(p)
    p.add_argument("--dsm", help="estimated elevation raster (.asc)")
    p.add_argument("--oracle-dsm", dest="oracle_dsm",
                   help="ground-truth DSM pass-through (bypasses the model)")
    p.add_argument("--mask", help="building mask raster")
    p.add_argument("--image", help="optional color image for the point cloud")
    p.add_argument("--outdir", help="output directory")
    p.add_argument("--sigma", type=float, help="smooth the DSM first (default 0)")
    p.add_argument("--stat", choices=["median", "mean", "max"],
                   help="per-building height statistic (default median)")
    p.add_argument("--base", type=float, help="prism base height (default 0)")
    p.add_argument("--min-area", dest="min_area", type=int,
                   help="minimum footprint area in pixels (default 20)")
    p.add_argument("--simplify-tol", dest="simplify_tol", type=float,
                   help="Douglas-Peucker tolerance in world units (default 0)")
    p.add_argument("--epsg", type=int, help="EPSG code for CityGML srsName")
    p.add_argument("--ply", action="store_true", help="emit buildings.ply")
    p.add_argument("--ascii-ply", action="store_true", help="ASCII instead of binary PLY")
    p.add_argument("--obj", action="store_true", help="emit buildings.obj")
    p.add_argument("--citygml", action="store_true", help="emit buildings.gml")
    p.add_argument("--polygons", action="store_true", help="emit footprints.json")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    p.add_argument("--seeds", type=int, default=10, help="seeds per op (default 10)")
    p.add_argument("--tol", type=float, default=None,
                   help="override the per-op tolerance")
    p.add_argument("--ops", help="comma-separated op subset (default: all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="loss-descent demo on synthetic scenes")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", help="write the loss trace JSON here")
    p.add_argument("--save-weights", dest="save_weights",
                   help="also write a weights file")
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        log_event(event="error", kind="input", message=str(exc))
        return 2
    except (FileNotFoundError, RasterError) as exc:
        log_event(event="error", kind="input", message=str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        log_event(event="error", kind="internal",
                  type=type(exc).__name__, message=str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
