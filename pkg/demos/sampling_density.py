"""How the three sampling strategies spend their sample budget along a ray.

An octree and per-leaf warps are built for the free-trajectory cameras.
One ray per camera is marched with perspective, exponential and uniform
stepping, and the samples are binned by distance from the camera.
Perspective sampling keeps the warped step near its target, so it packs
samples close to the cameras and thins them out with distance.
"""

from __future__ import annotations

import argparse

import numpy as np

from perspwarp.geometry import generate_rays
from perspwarp.sampling import Sampler
from perspwarp.scenes import make_preset
from perspwarp.subdivision import build_octree
from perspwarp.warp import WarpTable, build_warps

BINS = np.array([0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0, np.inf])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-cams", type=int, default=45)
    args = ap.parse_args()

    _, traj = make_preset("three-spheres-free", n=args.n_cams)
    cams = traj.poses
    tree = build_octree(cams)
    table = WarpTable(build_warps(tree, cams, 16))
    print(f"{len(tree.leaves())} leaves, {len(tree.warped_leaves())} warped, root side {tree.root_side:.1f}")

    o, d = zip(*(generate_rays(c, [c.width // 2], [c.height // 2]) for c in cams))
    o, d = np.concatenate(o), np.concatenate(d)
    labels = [f"{lo:g}-{hi:g}" for lo, hi in zip(BINS[:-1], BINS[1:])]
    print(f"\n{'mode':12s}" + "".join(f"{s:>9s}" for s in labels) + f"{'total':>9s}")
    for mode in ("perspective", "exp", "uniform"):
        b = Sampler(tree, table, mode).march(o, d, cams[0].near)
        hist, _ = np.histogram(b.t, BINS)
        per_ray = hist / len(cams)
        print(f"{mode:12s}" + "".join(f"{v:9.1f}" for v in per_ray) + f"{len(b) / len(cams):9.1f}")
    print("\n(mean samples per ray by distance band, world units)")


if __name__ == "__main__":
    main()
