"""Ray marching through the octree with warp-adaptive step sizes.

In perspective mode each step is ``l / |J d|`` so consecutive samples sit
roughly ``l`` apart in the leaf's warp space. The ``uniform`` and ``exp``
modes are simple baselines used by the ablation runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import Ray
from .subdivision import Octree
from .warp import WarpTable, warp_eval

PERSPECTIVE = 0
UNIFORM = 1
EXP = 2
SAMPLE_MODES = {"perspective": PERSPECTIVE, "uniform": UNIFORM, "exp": EXP}

DEFAULT_STEP = float(np.sqrt(3.0))
MAX_SAMPLES = 1024
EXP_GROWTH = 1.05
EXP_START = 0.05  # first exp step as a fraction of the start distance
SKIP_EPS = 1e-6
MIN_STEP = 1e-4  # world units


@dataclass
class SamplePoint:
    x: np.ndarray
    t: float
    dt: float
    leaf: int
    z: np.ndarray


@dataclass
class SampleBatch:
    """Flat samples of several rays; ray ``r`` owns ``offsets[r]:offsets[r + 1]``."""

    offsets: np.ndarray
    t: np.ndarray
    dt: np.ndarray
    leaf: np.ndarray
    wid: np.ndarray
    z: np.ndarray

    @property
    def n_rays(self) -> int:
        return len(self.offsets) - 1

    def __len__(self) -> int:
        return len(self.t)

    def ray_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rays), np.diff(self.offsets))


class Sampler:
    """Marches rays through a fixed octree and warp table."""

    def __init__(self, tree: Octree, table: WarpTable, mode: str = "perspective", step: float = DEFAULT_STEP,
                 max_samples: int = MAX_SAMPLES):
        if step <= 0:
            raise ValueError("step length must be positive")
        if mode not in SAMPLE_MODES:
            raise ValueError(f"unknown sample mode {mode!r}")
        self.tree = tree
        self.table = table
        self.mode = mode
        self.step = float(step)
        self.max_samples = int(max_samples)
        rb = tree.root_box
        self.root_min = np.ascontiguousarray(rb.min)
        self.root_max = np.ascontiguousarray(rb.max)
        self.min_step = MIN_STEP
        self.uniform_step = float(np.linalg.norm(rb.extent)) / self.max_samples

    def march(self, origins: np.ndarray, dirs: np.ndarray, near, capacity: int | None = None) -> SampleBatch:
        """March rays in order; stops early (whole rays only) once ``capacity`` samples would be exceeded."""
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        near = np.broadcast_to(np.asarray(near, dtype=np.float64), (len(origins),)).copy()
        if capacity is None:
            capacity = len(origins) * self.max_samples
        cap = max(int(capacity), self.max_samples)
        t = np.empty(cap)
        dt = np.empty(cap)
        leaf = np.empty(cap, dtype=np.int64)
        wid = np.empty(cap, dtype=np.int64)
        z = np.empty((cap, 3))
        offsets = np.zeros(len(origins) + 1, dtype=np.int64)
        n_rays = _march_kernel(
            origins, dirs, near, self.root_min, self.root_max,
            self.tree.centers, self.tree.sides, self.tree.children, self.tree.leaf_warp,
            *self.table.arrays, SAMPLE_MODES[self.mode], self.step, self.min_step, self.uniform_step,
            self.max_samples, int(capacity), t, dt, leaf, wid, z, offsets,
        )
        n = offsets[n_rays]
        return SampleBatch(offsets[: n_rays + 1].copy(), t[:n].copy(), dt[:n].copy(), leaf[:n].copy(), wid[:n].copy(), z[:n].copy())

    def march_ray(self, ray: Ray, near: float = 0.0) -> list[SamplePoint]:
        b = self.march(ray.origin[None], ray.direction[None], near)
        return [
            SamplePoint(ray.origin + b.t[i] * ray.direction, float(b.t[i]), float(b.dt[i]), int(b.leaf[i]), b.z[i])
            for i in range(len(b))
        ]


def march_ray(ray: Ray, tree: Octree, table: WarpTable, l: float = DEFAULT_STEP, max_samples: int = MAX_SAMPLES,
              near: float = 0.0) -> list[SamplePoint]:
    return Sampler(tree, table, "perspective", l, max_samples).march_ray(ray, near)


@numba.njit(cache=True)
def _locate(x0, x1, x2, rmin, rmax, centers, children):
    if x0 < rmin[0] or x1 < rmin[1] or x2 < rmin[2] or x0 >= rmax[0] or x1 >= rmax[1] or x2 >= rmax[2]:
        return -1
    node = 0
    while children[node, 0] >= 0:
        o = 0
        if x0 >= centers[node, 0]:
            o |= 1
        if x1 >= centers[node, 1]:
            o |= 2
        if x2 >= centers[node, 2]:
            o |= 4
        node = children[node, o]
    return node


@numba.njit(cache=True)
def _box_exit(x, d, lo, hi):
    best = np.inf
    for k in range(3):
        if d[k] > 0:
            s = (hi[k] - x[k]) / d[k]
        elif d[k] < 0:
            s = (lo[k] - x[k]) / d[k]
        else:
            continue
        if s < best:
            best = s
    return max(best, 0.0)


@numba.njit(cache=True)
def _root_interval(o, d, lo, hi):
    t0 = -np.inf
    t1 = np.inf
    for k in range(3):
        if d[k] != 0.0:
            a = (lo[k] - o[k]) / d[k]
            b = (hi[k] - o[k]) / d[k]
            if a > b:
                a, b = b, a
            t0 = max(t0, a)
            t1 = min(t1, b)
        elif o[k] < lo[k] or o[k] >= hi[k]:
            return 1.0, 0.0
    return t0, t1


@numba.njit(cache=True)
def _march_kernel(origins, dirs, near, rmin, rmax, centers, sides, children, leaf_warp,
                  kind, ncam, rot, ctr, intr, wnear, mean, basis, scales, radius,
                  mode, step, min_step, uniform_step, max_samples, capacity,
                  out_t, out_dt, out_leaf, out_wid, out_z, offsets):
    g = np.empty(mean.shape[1])
    gj = np.empty((mean.shape[1], 3))
    z = np.empty(3)
    jac = np.empty((3, 3))
    x = np.empty(3)
    lo = np.empty(3)
    hi = np.empty(3)
    total = 0
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        t0, t1 = _root_interval(o, d, rmin, rmax)
        t = max(near[r], t0)
        delta_exp = EXP_START * max(t, min_step)
        count = 0
        while t < t1 and count < max_samples:
            for k in range(3):
                x[k] = o[k] + t * d[k]
            node = _locate(x[0], x[1], x[2], rmin, rmax, centers, children)
            if node < 0:
                break
            h = sides[node] / 2
            for k in range(3):
                lo[k] = centers[node, k] - h
                hi[k] = centers[node, k] + h
            w = leaf_warp[node]
            if w < 0:
                t += _box_exit(x, d, lo, hi) + SKIP_EPS
                continue
            ok = warp_eval(x[0], x[1], x[2], w, kind, ncam, rot, ctr, intr, wnear, mean, basis, scales, radius,
                           z, jac, mode == 0, g, gj)
            if not ok:
                t += max(min_step, sides[node] / 64)
                continue
            if mode == 0:
                s = 0.0
                for a in range(3):
                    v = jac[a, 0] * d[0] + jac[a, 1] * d[1] + jac[a, 2] * d[2]
                    s += v * v
                s = np.sqrt(s)
                delta = step / s if s > 0 else sides[node]
            elif mode == 1:
                delta = uniform_step
            else:
                delta = delta_exp
                delta_exp *= EXP_GROWTH
            delta = min(max(delta, min_step), sides[node])
            if total >= capacity:
                # ray does not fit; drop it entirely
                return r
            out_t[total] = t
            out_dt[total] = delta
            out_leaf[total] = node
            out_wid[total] = w
            for a in range(3):
                out_z[total, a] = z[a]
            total += 1
            count += 1
            t += delta
        offsets[r + 1] = total
    return origins.shape[0]
