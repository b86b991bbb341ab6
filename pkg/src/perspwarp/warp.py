"""Per-leaf perspective warps.

A leaf's warp stacks the pixel coordinates of the point in its selected
(rectified) cameras, ``G(x)``, and projects the centered stack onto the three
principal axes of the leaf's own samples:

    F(x) = S @ M' @ (G(x) - mean)

``S`` rescales each warp axis so that a unit step moves the fastest-moving
image coordinate by about one pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .geometry import (
    Aabb,
    Camera,
    GeometryError,
    project_jacobians,
    project_points,
    rectification_radius,
    rectify_cameras,
)

PCA = 0
SINGLE = 1
IDENTITY = 2

SCALE_MIN = 1e-3
SCALE_MAX = 1e3
MIN_SURVIVAL = 0.1


class WarpDegenerateError(GeometryError):
    def __init__(self, msg, node_id=None):
        if node_id is not None:
            msg = f"node {node_id}: {msg}"
        super().__init__(msg)
        self.node_id = node_id


@dataclass(eq=False)
class WarpFunction:
    cams: list[Camera]
    mean: np.ndarray
    basis: np.ndarray
    scales: np.ndarray
    warp_bbox: Aabb
    kind: int = PCA
    radius: float = 0.0
    node_id: Optional[int] = None
    eigvals: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return len(self.cams)

    def stack_projections(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """G(x) for (N, 3) points: (N, 2m) coordinates and an all-cameras-visible mask."""
        uvs, vis = zip(*(project_points(c, x) for c in self.cams))
        return np.concatenate(uvs, axis=-1), np.all(vis, axis=0)

    def stack_jacobians(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([project_jacobians(c, x) for c in self.cams], axis=-2)

    def apply(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Warped points (N, 3) and validity mask; invalid rows are meaningless."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        if self.kind == IDENTITY:
            return x.copy(), np.ones(len(x), dtype=bool)
        g, vis = self.stack_projections(x)
        if self.kind == SINGLE:
            rho = np.linalg.norm(x - self.cams[0].center, axis=1)
            return np.column_stack([g, -self.radius / rho]), vis
        return ((g - self.mean) @ self.basis.T) * self.scales, vis

    def jacobians(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        if self.kind == IDENTITY:
            return np.broadcast_to(np.eye(3), (len(x), 3, 3)).copy()
        j = self.stack_jacobians(x)
        if self.kind == SINGLE:
            off = x - self.cams[0].center
            rho = np.linalg.norm(off, axis=1)
            depth_row = self.radius * off / rho[:, None] ** 3
            return np.concatenate([j, depth_row[:, None, :]], axis=1)
        return self.scales[:, None] * np.einsum("ak,nkj->naj", self.basis, j)


def sample_region_points(region: Aabb, n_per_axis: int = 32) -> np.ndarray:
    if n_per_axis < 2:
        raise ValueError("n_per_axis must be >= 2")
    axes = [np.linspace(region.min[k], region.max[k], n_per_axis) for k in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=-1)


def pca_project(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, top-3 principal directions (rows) and their eigenvalues, descending.

    Each direction is sign-fixed so its largest-magnitude entry is positive.
    """
    k = np.asarray(coords, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] < 4 or k.shape[1] < 3:
        raise ValueError("pca_project needs at least 4 coordinates of dimension >= 3")
    mean = k.mean(axis=0)
    c = k - mean
    basis, eigvals = _top_eigenvectors(c.T @ c)
    return mean, basis, eigvals


def _top_eigenvectors(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(q)
    order = np.argsort(w)[::-1][:3]
    basis = v[:, order].T.copy()
    flip = basis[np.arange(3), np.argmax(np.abs(basis), axis=1)] < 0
    basis[flip] *= -1
    return basis, w[order]


def compute_axis_scales(basis: np.ndarray, cams: Sequence[Camera], probes: np.ndarray) -> np.ndarray:
    """Per-axis scales making the largest image motion per unit warp step about one pixel.

    Each probe contributes ``max_j |B[j, k]|`` with ``B = J (M' J)^-1``;
    probes with a near-singular ``M' J`` are skipped and the rest averaged.
    """
    probes = np.ascontiguousarray(probes, dtype=np.float64).reshape(-1, 3)
    mask = np.ones(len(probes), dtype=np.bool_)
    total, count = _scale_sums(np.ascontiguousarray(basis, dtype=np.float64), probes, mask, *_camera_arrays(cams))
    if count == 0:
        raise WarpDegenerateError("every probe has a singular warp-to-image map")
    return np.clip(total / count, SCALE_MIN, SCALE_MAX)


def _camera_arrays(cams: Sequence[Camera]):
    rot = np.stack([c.rotation for c in cams])
    ctr = np.stack([c.center for c in cams])
    intr = np.array([(c.fx, c.fy, c.cx, c.cy) for c in cams], dtype=np.float64)
    near = np.array([c.near for c in cams], dtype=np.float64)
    return rot, ctr, intr, near


def _stack_cameras(cams: Sequence[Camera], pts: np.ndarray):
    """G(x) (N, 2m) and the all-cameras-visible mask for (N, 3) points."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    g = np.empty((len(pts), 2 * len(cams)))
    vis = np.empty(len(pts), dtype=np.bool_)
    _stack_kernel(pts, *_camera_arrays(cams), g, vis)
    return g, vis


@numba.njit(cache=True)
def _stack_kernel(pts, rot, ctr, intr, near, g, vis):
    for i in range(pts.shape[0]):
        ok = True
        for c in range(rot.shape[0]):
            dx = pts[i, 0] - ctr[c, 0]
            dy = pts[i, 1] - ctr[c, 1]
            dz = pts[i, 2] - ctr[c, 2]
            px = rot[c, 0, 0] * dx + rot[c, 0, 1] * dy + rot[c, 0, 2] * dz
            py = rot[c, 1, 0] * dx + rot[c, 1, 1] * dy + rot[c, 1, 2] * dz
            pz = rot[c, 2, 0] * dx + rot[c, 2, 1] * dy + rot[c, 2, 2] * dz
            if pz < near[c]:
                ok = False
            iz = 1.0 / pz
            g[i, 2 * c] = intr[c, 0] * px * iz + intr[c, 2]
            g[i, 2 * c + 1] = intr[c, 1] * py * iz + intr[c, 3]
        vis[i] = ok


@numba.njit(cache=True)
def _scale_sums(basis, pts, mask, rot, ctr, intr, near):
    m = rot.shape[0]
    rows = 2 * m
    gj = np.empty((rows, 3))
    a = np.empty((3, 3))
    inv = np.empty((3, 3))
    total = np.zeros(3)
    count = 0
    for i in range(pts.shape[0]):
        if not mask[i]:
            continue
        for c in range(m):
            dx = pts[i, 0] - ctr[c, 0]
            dy = pts[i, 1] - ctr[c, 1]
            dz = pts[i, 2] - ctr[c, 2]
            px = rot[c, 0, 0] * dx + rot[c, 0, 1] * dy + rot[c, 0, 2] * dz
            py = rot[c, 1, 0] * dx + rot[c, 1, 1] * dy + rot[c, 1, 2] * dz
            pz = rot[c, 2, 0] * dx + rot[c, 2, 1] * dy + rot[c, 2, 2] * dz
            iz = 1.0 / pz
            for b in range(3):
                gj[2 * c, b] = intr[c, 0] * iz * (rot[c, 0, b] - px * iz * rot[c, 2, b])
                gj[2 * c + 1, b] = intr[c, 1] * iz * (rot[c, 1, b] - py * iz * rot[c, 2, b])
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(rows):
                    acc += basis[r, k] * gj[k, c]
                a[r, c] = acc
        det = (
            a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
            - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
            + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0])
        )
        fro = 0.0
        for r in range(3):
            for c in range(3):
                fro += a[r, c] * a[r, c]
        fro = np.sqrt(fro)
        if abs(det) < 1e-12 * fro * fro * fro:
            continue
        inv[0, 0] = (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]) / det
        inv[0, 1] = (a[0, 2] * a[2, 1] - a[0, 1] * a[2, 2]) / det
        inv[0, 2] = (a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]) / det
        inv[1, 0] = (a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2]) / det
        inv[1, 1] = (a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]) / det
        inv[1, 2] = (a[0, 2] * a[1, 0] - a[0, 0] * a[1, 2]) / det
        inv[2, 0] = (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]) / det
        inv[2, 1] = (a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1]) / det
        inv[2, 2] = (a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]) / det
        for c in range(3):
            best = 0.0
            for k in range(rows):
                v = abs(gj[k, 0] * inv[0, c] + gj[k, 1] * inv[1, c] + gj[k, 2] * inv[2, c])
                if v > best:
                    best = v
            total[c] += best
        count += 1
    return total, count


@numba.njit(cache=True)
def _masked_moments(g, mask):
    n, d = g.shape
    mean = np.zeros(d)
    cnt = 0
    for i in range(n):
        if mask[i]:
            cnt += 1
            for k in range(d):
                mean[k] += g[i, k]
    mean /= max(cnt, 1)
    q = np.zeros((d, d))
    c = np.empty(d)
    for i in range(n):
        if mask[i]:
            for k in range(d):
                c[k] = g[i, k] - mean[k]
            for k in range(d):
                for l in range(k, d):
                    q[k, l] += c[k] * c[l]
    for k in range(d):
        for l in range(k):
            q[k, l] = q[l, k]
    return mean, q


@numba.njit(cache=True)
def _masked_warp_bounds(g, mask, mean, basis, scales):
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for i in range(g.shape[0]):
        if not mask[i]:
            continue
        for a in range(3):
            acc = 0.0
            for k in range(g.shape[1]):
                acc += basis[a, k] * (g[i, k] - mean[k])
            acc *= scales[a]
            lo[a] = min(lo[a], acc)
            hi[a] = max(hi[a], acc)
    return lo, hi


def _bbox(z: np.ndarray) -> Aabb:
    return Aabb(z.min(axis=0), z.max(axis=0))


def construct_warp(region: Aabb, cams: Sequence[Camera], n_per_axis: int = 32, node_id=None) -> WarpFunction:
    cams = list(cams)
    if not cams:
        raise GeometryError("construct_warp needs at least one camera")
    pts = sample_region_points(region, n_per_axis)
    if len(cams) == 1:
        return _single_camera_warp(region, cams[0], pts, node_id)
    w = WarpFunction(cams, np.zeros(2 * len(cams)), np.zeros((3, 2 * len(cams))), np.ones(3), region, node_id=node_id)
    g, vis = _stack_cameras(cams, pts)
    if vis.mean() < MIN_SURVIVAL:
        raise WarpDegenerateError("fewer than 10% of region samples are visible to every camera", node_id)
    w.mean, q = _masked_moments(g, vis)
    w.basis, w.eigvals = _top_eigenvectors(q)
    if w.eigvals[2] < 1e-12 * w.eigvals[0]:
        raise WarpDegenerateError("projected samples span fewer than three dimensions", node_id)
    total, count = _scale_sums(w.basis, pts, vis, *_camera_arrays(cams))
    if count == 0:
        raise WarpDegenerateError("every probe has a singular warp-to-image map", node_id)
    w.scales = np.clip(total / count, SCALE_MIN, SCALE_MAX)
    w.warp_bbox = Aabb(*_masked_warp_bounds(g, vis, w.mean, w.basis, w.scales))
    return w


def _single_camera_warp(region: Aabb, cam: Camera, pts: np.ndarray, node_id=None) -> WarpFunction:
    # NDC-like: pixel coordinates plus negated inverse distance
    radius = float(np.linalg.norm(cam.center - region.center))
    w = WarpFunction([cam], np.zeros(2), np.zeros((3, 2)), np.ones(3), region, kind=SINGLE, radius=radius, node_id=node_id)
    z, vis = w.apply(pts)
    if vis.mean() < MIN_SURVIVAL:
        raise WarpDegenerateError("fewer than 10% of region samples are visible to the camera", node_id)
    w.warp_bbox = _bbox(z[vis])
    return w


def identity_warp(region: Aabb, node_id=None) -> WarpFunction:
    return WarpFunction([], np.zeros(0), np.zeros((3, 0)), np.ones(3), region, kind=IDENTITY, node_id=node_id)


def warp_point(w: WarpFunction, x) -> np.ndarray:
    z, ok = w.apply(np.asarray(x, dtype=np.float64)[None])
    if not ok[0]:
        raise GeometryError("point is behind the near plane of a warp camera")
    return z[0]


def warp_jacobian(w: WarpFunction, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)[None]
    if not w.apply(x)[1][0]:
        raise GeometryError("point is behind the near plane of a warp camera")
    return w.jacobians(x)[0]


def build_warps(tree, cams: Sequence[Camera], n_per_axis: int = 32) -> list[WarpFunction]:
    """One warp per warped leaf, indexed by warp id.

    Degenerate camera sets fall back to the single-camera warp of the first
    selected camera, and failing that to the identity over the leaf box.
    """
    warps = []
    for nid in tree.warped_leaves():
        node = tree.nodes[nid]
        box = node.box
        dist = [np.linalg.norm(cams[i].center - node.center) for i in node.visible_cams]
        radius = rectification_radius([d for d in dist if d >= 1e-9])
        rect = rectify_cameras([cams[i] for i in node.selected_cams], node.center, radius=radius)
        try:
            w = construct_warp(box, rect, n_per_axis, node_id=nid)
        except WarpDegenerateError:
            try:
                w = construct_warp(box, rect[:1], n_per_axis, node_id=nid)
            except WarpDegenerateError:
                w = identity_warp(box, node_id=nid)
                w.warp_bbox = box
        warps.append(w)
    return warps


# packed evaluation


class WarpTable:
    """All leaf warps packed into arrays for compiled batch evaluation."""

    def __init__(self, warps: Sequence[WarpFunction], max_cams: int = 4):
        n = len(warps)
        m = max(max_cams, max((w.m for w in warps), default=1))
        self.kind = np.zeros(n, dtype=np.int64)
        self.ncam = np.zeros(n, dtype=np.int64)
        self.rot = np.tile(np.eye(3), (n, m, 1, 1))
        self.ctr = np.zeros((n, m, 3))
        self.intr = np.zeros((n, m, 4))
        self.near = np.zeros((n, m))
        self.mean = np.zeros((n, 2 * m))
        self.basis = np.zeros((n, 3, 2 * m))
        self.scales = np.ones((n, 3))
        self.radius = np.zeros(n)
        self.bbox_min = np.zeros((n, 3))
        self.bbox_max = np.ones((n, 3))
        for i, w in enumerate(warps):
            self.kind[i] = w.kind
            self.ncam[i] = w.m
            for j, c in enumerate(w.cams):
                self.rot[i, j] = c.rotation
                self.ctr[i, j] = c.center
                self.intr[i, j] = (c.fx, c.fy, c.cx, c.cy)
                self.near[i, j] = c.near
            k = 2 * w.m
            if w.kind == PCA:
                self.mean[i, :k] = w.mean
                self.basis[i, :, :k] = w.basis
                self.scales[i] = w.scales
            self.radius[i] = w.radius
            self.bbox_min[i] = w.warp_bbox.min
            self.bbox_max[i] = w.warp_bbox.max

    def __len__(self):
        return len(self.kind)

    @property
    def arrays(self):
        return (self.kind, self.ncam, self.rot, self.ctr, self.intr, self.near, self.mean, self.basis, self.scales, self.radius)

    def evaluate(self, x: np.ndarray, wid: np.ndarray, with_jacobian: bool = True):
        """Warped points, Jacobians and validity for points ``x`` under warps ``wid``."""
        x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
        wid = np.ascontiguousarray(wid, dtype=np.int64).reshape(-1)
        z = np.zeros((len(x), 3))
        jac = np.zeros((len(x), 3, 3))
        valid = np.zeros(len(x), dtype=np.bool_)
        _warp_batch(x, wid, *self.arrays, z, jac, valid)
        return (z, jac, valid) if with_jacobian else (z, valid)

    def normalize(self, z: np.ndarray, wid: np.ndarray) -> np.ndarray:
        """Map warped points into each warp's bbox, expanded by a 1e-3 margin, clamped to [0, 1]."""
        lo, hi = self.bbox_min[wid], self.bbox_max[wid]
        ext = np.maximum(hi - lo, 1e-12)
        lo = lo - 1e-3 * ext
        ext = ext * (1 + 2e-3)
        return np.clip((z - lo) / ext, 0.0, 1.0)


@numba.njit(cache=True)
def warp_eval(x0, x1, x2, w, kind, ncam, rot, ctr, intr, near, mean, basis, scales, radius, z, jac, need_jac, g, gj):
    """Warp one point; fills z (3,) and jac (3, 3). Returns False if a camera cannot see it.

    ``g`` and ``gj`` are caller-owned scratch buffers of shape (2m,) and (2m, 3).
    """
    k = kind[w]
    if k == 2:
        z[0] = x0
        z[1] = x1
        z[2] = x2
        if need_jac:
            for a in range(3):
                for b in range(3):
                    jac[a, b] = 1.0 if a == b else 0.0
        return True
    m = ncam[w]
    nrow = 2 * m
    for c in range(m):
        dx = x0 - ctr[w, c, 0]
        dy = x1 - ctr[w, c, 1]
        dz = x2 - ctr[w, c, 2]
        px = rot[w, c, 0, 0] * dx + rot[w, c, 0, 1] * dy + rot[w, c, 0, 2] * dz
        py = rot[w, c, 1, 0] * dx + rot[w, c, 1, 1] * dy + rot[w, c, 1, 2] * dz
        pz = rot[w, c, 2, 0] * dx + rot[w, c, 2, 1] * dy + rot[w, c, 2, 2] * dz
        if pz < near[w, c]:
            return False
        iz = 1.0 / pz
        fx = intr[w, c, 0]
        fy = intr[w, c, 1]
        g[2 * c] = fx * px * iz + intr[w, c, 2]
        g[2 * c + 1] = fy * py * iz + intr[w, c, 3]
        if need_jac:
            for b in range(3):
                gj[2 * c, b] = fx * iz * (rot[w, c, 0, b] - px * iz * rot[w, c, 2, b])
                gj[2 * c + 1, b] = fy * iz * (rot[w, c, 1, b] - py * iz * rot[w, c, 2, b])
    if k == 1:
        dx = x0 - ctr[w, 0, 0]
        dy = x1 - ctr[w, 0, 1]
        dz = x2 - ctr[w, 0, 2]
        rho = np.sqrt(dx * dx + dy * dy + dz * dz)
        z[0] = g[0]
        z[1] = g[1]
        z[2] = -radius[w] / rho
        if need_jac:
            s = radius[w] / (rho * rho * rho)
            for b in range(3):
                jac[0, b] = gj[0, b]
                jac[1, b] = gj[1, b]
            jac[2, 0] = s * dx
            jac[2, 1] = s * dy
            jac[2, 2] = s * dz
        return True
    for a in range(3):
        acc = 0.0
        for r in range(nrow):
            acc += basis[w, a, r] * (g[r] - mean[w, r])
        z[a] = scales[w, a] * acc
        if need_jac:
            for b in range(3):
                acc = 0.0
                for r in range(nrow):
                    acc += basis[w, a, r] * gj[r, b]
                jac[a, b] = scales[w, a] * acc
    return True


@numba.njit(cache=True)
def _warp_batch(x, wid, kind, ncam, rot, ctr, intr, near, mean, basis, scales, radius, z, jac, valid):
    g = np.empty(mean.shape[1])
    gj = np.empty((mean.shape[1], 3))
    for i in range(x.shape[0]):
        valid[i] = warp_eval(
            x[i, 0], x[i, 1], x[i, 2], wid[i], kind, ncam, rot, ctr, intr, near, mean, basis, scales, radius, z[i], jac[i], True, g, gj
        )
