"""Command line entry points: gen, train, render, eval, dump."""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .field import FieldConfig, GridConfig
from .geometry import Aabb, GeometryError
from .renderer import (
    LossWeights,
    Model,
    ModelConfig,
    NumericError,
    RayPool,
    TrainConfig,
    Trainer,
    load_checkpoint,
    render_image,
    save_checkpoint,
)
from .scenes import PRESETS, DatasetError, make_preset, psnr, read_dataset, to_uint8, write_dataset
from .subdivision import build_octree, dump_octree, leaf_camera_subset
from .warp import construct_warp, sample_region_points

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# desk-scale settings used by the toy experiments; any explicit flag overrides them
DESK = dict(steps=2000, point_batch=2**14, lr_warmup_steps=100, tv_points=1024, table_len=2**16, n_per_axis=16,
            lr_peak=1e-2, lr_final=1e-3, density_bias=-5.0)
FULL = dict(steps=20000, point_batch=262144, lr_warmup_steps=1000, tv_points=8192, table_len=2**19, n_per_axis=32,
             lr_peak=1e-1, lr_final=1e-2, density_bias=0.0)


class CliError(Exception):
    def __init__(self, msg, code=EXIT_DATA):
        super().__init__(msg)
        self.code = code


def set_threads(n: int | None) -> None:
    if not n:
        return
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    threadpool_limits(n)


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# gen


def cmd_gen(args) -> int:
    scene, traj = make_preset(args.preset, args.n, args.width, args.height, args.seed)
    ds = write_dataset(scene, traj, args.out, meta={"preset": args.preset, "seed": args.seed, "kind": traj.kind})
    print(f"wrote {len(ds.cams)} images ({len(ds.train_ids)} train / {len(ds.test_ids)} test) to {args.out}")
    return EXIT_OK


# train


def _resolve(args, name):
    v = getattr(args, name)
    if v is not None:
        return v
    return (DESK if args.scale == "desk" else FULL)[name]


def configs_from_args(args) -> dict:
    grid = GridConfig(levels=args.levels, table_len=_resolve(args, "table_len"), mode=args.hash_mode)
    model = ModelConfig(
        warp=args.warp,
        sample=args.sample,
        n_per_axis=_resolve(args, "n_per_axis"),
        max_samples=args.max_samples,
        field=FieldConfig(grid=grid, density_bias=_resolve(args, "density_bias")),
        seed=args.seed,
    )
    train = TrainConfig(
        steps=_resolve(args, "steps"),
        point_batch=_resolve(args, "point_batch"),
        lr_peak=_resolve(args, "lr_peak"),
        lr_warmup_steps=_resolve(args, "lr_warmup_steps"),
        lr_final=_resolve(args, "lr_final"),
        tv_points=_resolve(args, "tv_points"),
        seed=args.seed,
    )
    weights = LossWeights(args.lambda_disp, args.lambda_tv, args.eps)
    return {"model": asdict(model), "train": asdict(train), "loss": asdict(weights)}


def run_training(data: str, config: dict, out: Path, threads: int | None = None, log=print) -> dict:
    """Train from a manifest-style config dict; writes manifest.json, losses.csv and checkpoint.bin."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "data": str(Path(data).resolve()),
        "seed": config["train"]["seed"],
        "threads": threads,
        "git": git_describe(),
        "config": config,
        "timing": {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    set_threads(threads)

    t0 = time.perf_counter()
    ds = read_dataset(data)
    cams, images = ds.subset(ds.train_ids)
    model = Model(cams, ModelConfig(**config["model"]))
    trainer = Trainer(model, RayPool.from_images(cams, images), TrainConfig(**config["train"]), LossWeights(**config["loss"]))
    manifest["timing"]["build_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "recon", "disp", "tv", "lr"])
        every = max(1, trainer.config.steps // 20)

        def on_step(row):
            w.writerow([row["step"], repr(row["recon"]), repr(row["disp"]), repr(row["tv"]), repr(row["lr"])])
            if row["step"] % every == 0 or row["step"] == trainer.config.steps:
                log(f"step {row['step']:6d}  recon {row['recon']:.5f}  disp {row['disp']:.2e}  tv {row['tv']:.2e}  lr {row['lr']:.2e}")

        trainer.train(callback=on_step)
    manifest["timing"]["train_s"] = time.perf_counter() - t0
    save_checkpoint(out / "checkpoint.bin", model, trainer.step_count, {"data": manifest["data"]})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def cmd_train(args) -> int:
    if args.manifest:
        doc = json.loads(Path(args.manifest).read_text())
        config, data = doc["config"], args.data or doc["data"]
        threads = args.threads if args.threads is not None else doc.get("threads")
    else:
        if not args.data:
            raise CliError("train needs --data (or --manifest)", EXIT_USAGE)
        config, data, threads = configs_from_args(args), args.data, args.threads
    run_training(data, config, Path(args.out), threads)
    print(f"checkpoint written to {Path(args.out) / 'checkpoint.bin'}")
    return EXIT_OK


# render / eval


def _split_ids(ds, split):
    return {"test": ds.test_ids, "train": ds.train_ids, "all": list(range(len(ds.cams)))}[split]


def cmd_render(args) -> int:
    set_threads(args.threads)
    model, header = load_checkpoint(args.checkpoint)
    data = args.data or header.get("extra", {}).get("data")
    if not data:
        raise CliError("render needs --data (the checkpoint does not record a dataset)", EXIT_USAGE)
    ds = read_dataset(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in _split_ids(ds, args.split):
        Image.fromarray(to_uint8(render_image(model, ds.cams[i]))).save(out / f"{i:04d}.png")
    print(f"rendered {len(_split_ids(ds, args.split))} views to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    ids = _split_ids(ds, args.split)
    if args.checkpoint:
        set_threads(args.threads)
        model, _ = load_checkpoint(args.checkpoint)
        preds = {i: np.asarray(to_uint8(render_image(model, ds.cams[i])), dtype=np.float64) / 255 for i in ids}
    elif args.renders:
        preds = {}
        for i in ids:
            p = Path(args.renders) / f"{i:04d}.png"
            if not p.is_file():
                raise CliError(f"missing rendered image {p}")
            preds[i] = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255
    else:
        raise CliError("eval needs --checkpoint or --renders", EXIT_USAGE)
    rows = [(i, psnr(preds[i], ds.images[i])) for i in ids]
    mean = float(np.mean([v for _, v in rows]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "psnr.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "psnr"])
        for i, v in rows:
            w.writerow([f"{i:04d}", f"{v:.4f}"])
        w.writerow(["mean", f"{mean:.4f}"])
    print(f"{'image':>8}  {'PSNR (dB)':>10}")
    for i, v in rows:
        print(f"{i:8d}  {v:10.3f}")
    print(f"{'mean':>8}  {mean:10.3f}")
    return EXIT_OK


# dump


def write_warp_ply(path, pts: np.ndarray, warped: np.ndarray) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
    lines += [f"property double {c}" for c in ("x", "y", "z", "wx", "wy", "wz")]
    lines.append("end_header")
    lines += [" ".join(f"{v:.12g}" for v in (*p, *w)) for p, w in zip(pts, warped)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_warp_ply(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text().splitlines()
    start = text.index("end_header") + 1
    data = np.array([[float(v) for v in line.split()] for line in text[start:] if line.strip()]).reshape(-1, 6)
    return data[:, :3], data[:, 3:]


def cmd_dump(args) -> int:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        cams, tree, warps = model.cams, model.tree, model.warps
    elif args.data:
        cams = read_dataset(args.data).cams
        tree, warps = build_octree(cams), None
    else:
        raise CliError("dump needs --checkpoint or --data", EXIT_USAGE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "octree.json").write_bytes(dump_octree(tree))
    leaves = tree.leaves()
    depths = [tree.nodes[i].depth for i in leaves]
    stats = {
        "nodes": len(tree.nodes),
        "leaves": len(leaves),
        "warped_leaves": len(tree.warped_leaves()),
        "root_side": tree.root_side,
        "depth_histogram": {str(d): depths.count(d) for d in sorted(set(depths))},
    }
    if warps is not None:
        kinds = [w.kind for w in warps]
        stats["warp_kinds"] = {"pca": kinds.count(0), "single": kinds.count(1), "identity": kinds.count(2)}
    (out / "leaf_stats.json").write_text(json.dumps(stats, indent=1))
    if args.probe_warp:
        if args.region is None:
            raise CliError("--probe-warp needs --region XMIN YMIN ZMIN XMAX YMAX ZMAX", EXIT_USAGE)
        region = Aabb(np.array(args.region[:3]), np.array(args.region[3:]))
        sel = leaf_camera_subset(cams, range(len(cams)), region.center, tree.n_c)
        w = construct_warp(region, [cams[i] for i in sel], args.n_per_axis)
        pts = sample_region_points(region, args.n_per_axis)
        z, ok = w.apply(pts)
        write_warp_ply(out / "probe_warp.ply", pts[ok], z[ok])
    print(json.dumps(stats))
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perspwarp", description="Perspective-warped radiance fields on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--preset", choices=PRESETS, default="three-spheres-free")
    g.add_argument("--n", type=int, default=45, help="number of poses")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a field on a dataset")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--manifest", help="re-run the configuration recorded in a manifest.json")
    t.add_argument("--scale", choices=("full", "desk"), default="full", help="default settings family")
    t.add_argument("--warp", choices=("perspective", "none"), default="perspective")
    t.add_argument("--sample", choices=("perspective", "exp", "uniform"), default="perspective")
    t.add_argument("--hash-mode", choices=("single", "per-node"), default="single")
    t.add_argument("--steps", type=int)
    t.add_argument("--point-batch", type=int)
    t.add_argument("--lr-peak", type=float)
    t.add_argument("--lr-warmup-steps", type=int)
    t.add_argument("--lr-final", type=float)
    t.add_argument("--tv-points", type=int)
    t.add_argument("--lambda-disp", type=float, default=1e-3)
    t.add_argument("--lambda-tv", type=float, default=1e-1)
    t.add_argument("--eps", type=float, default=1e-4)
    t.add_argument("--levels", type=int, default=16)
    t.add_argument("--table-len", type=int)
    t.add_argument("--n-per-axis", type=int)
    t.add_argument("--max-samples", type=int, default=1024)
    t.add_argument("--density-bias", type=float)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render dataset views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data")
    r.add_argument("--split", choices=("test", "train", "all"), default="test")
    r.add_argument("--out", required=True)
    r.add_argument("--threads", type=int)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR of rendered views against the dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--renders", help="directory of NNNN.png renders")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump", help="octree JSON, leaf statistics and warp probes")
    d.add_argument("--checkpoint")
    d.add_argument("--data")
    d.add_argument("--out", required=True)
    d.add_argument("--probe-warp", action="store_true", help="write a PLY of lattice points and their warped coordinates")
    d.add_argument("--region", type=float, nargs=6, metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"))
    d.add_argument("--n-per-axis", type=int, default=16)
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, GeometryError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
