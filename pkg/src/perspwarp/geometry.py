"""Pinhole cameras, rays, frustum tests and camera rectification/selection.

Conventions: ``rotation`` maps world to camera coordinates and the camera
looks along +z of its own frame, with image x to the right and y down
(OpenCV style). A world point ``x`` has camera coordinates
``rotation @ (x - center)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    rotation: np.ndarray
    center: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        ctr = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", ctr)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise GeometryError("camera rotation must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0 or self.near <= 0:
            raise GeometryError("fx, fy and near must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera-frame points (..., 3)."""
        return (np.asarray(x, dtype=np.float64) - self.center) @ self.rotation.T

    def c2w(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = self.center
        return m

    @classmethod
    def from_c2w(cls, c2w, **intrinsics) -> "Camera":
        c2w = np.asarray(c2w, dtype=np.float64).reshape(4, 4)
        return cls(rotation=c2w[:3, :3].T, center=c2w[:3, 3], **intrinsics)

    @classmethod
    def look_at(cls, center, target, up=(0.0, 1.0, 0.0), **intrinsics) -> "Camera":
        """Camera at ``center`` looking at ``target``; world ``up`` maps toward the image top."""
        center = np.asarray(center, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - center
        z = z / np.linalg.norm(z)
        rot = _complete_frame(z, -np.asarray(up, dtype=np.float64))
        return cls(rotation=rot, center=center, **intrinsics)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", d / np.linalg.norm(d))

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True, eq=False)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise GeometryError("Aabb min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def from_center(cls, center, side) -> "Aabb":
        center = np.asarray(center, dtype=np.float64)
        return cls(center - side / 2, center + side / 2)

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    def corners(self) -> np.ndarray:
        bits = np.array([[(i >> k) & 1 for k in range(3)] for i in range(8)], dtype=np.float64)
        return self.min + bits * self.extent

    def contains(self, x, closed: bool = True) -> np.ndarray:
        x = np.asarray(x)
        if closed:
            return np.all((x >= self.min) & (x <= self.max), axis=-1)
        return np.all((x >= self.min) & (x < self.max), axis=-1)


# projection


def project(cam: Camera, x) -> Optional[np.ndarray]:
    """Pixel coordinates of ``x``, or None if it is in front of the near plane."""
    p = cam.to_camera(x)
    if p[2] < cam.near:
        return None
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def project_points(cam: Camera, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) points; returns (uv (N, 2), visible (N,))."""
    p = cam.to_camera(x)
    z = p[..., 2]
    visible = z >= cam.near
    zs = np.where(visible, z, 1.0)
    uv = np.stack([cam.fx * p[..., 0] / zs + cam.cx, cam.fy * p[..., 1] / zs + cam.cy], axis=-1)
    return uv, visible


def project_jacobian(cam: Camera, x) -> np.ndarray:
    p = cam.to_camera(x)
    if p[2] < cam.near:
        raise GeometryError("point lies behind the camera near plane")
    return project_jacobians(cam, np.asarray(x, dtype=np.float64)[None])[0]


def project_jacobians(cam: Camera, x: np.ndarray) -> np.ndarray:
    """d(u, v)/dx for (N, 3) points, shape (N, 2, 3). No visibility check."""
    p = cam.to_camera(x)
    inv_z = 1.0 / p[..., 2]
    r = cam.rotation
    du = cam.fx * inv_z[..., None] * (r[0] - (p[..., 0] * inv_z)[..., None] * r[2])
    dv = cam.fy * inv_z[..., None] * (r[1] - (p[..., 1] * inv_z)[..., None] * r[2])
    return np.stack([du, dv], axis=-2)


# rays


def generate_ray(cam: Camera, u: float, v: float) -> Ray:
    d_cam = np.array([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, 1.0])
    return Ray(cam.center, cam.rotation.T @ d_cam)


def generate_rays(cam: Camera, u=None, v=None) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for pixel indices; all pixels (row-major) by default."""
    if u is None:
        v, u = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        u, v = u.ravel(), v.ravel()
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ cam.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(cam.center, d.shape).copy(), d


# frustum culling


def frustum_corners(cam: Camera, far: float) -> np.ndarray:
    """8 corners of the near..far truncated pyramid in world space (near first)."""
    px = np.array([[0.0, 0.0], [cam.width, 0.0], [cam.width, cam.height], [0.0, cam.height]])
    rays = np.stack([(px[:, 0] - cam.cx) / cam.fx, (px[:, 1] - cam.cy) / cam.fy, np.ones(4)], axis=-1)
    pts = np.concatenate([rays * cam.near, rays * far])
    return pts @ cam.rotation + cam.center


def _frustum_axes(cam: Camera, corners: np.ndarray) -> np.ndarray:
    r = cam.rotation
    lateral = corners[4:] - corners[:4]
    side_normals = np.cross(lateral, np.roll(lateral, -1, axis=0))
    edge_dirs = np.concatenate([lateral, r[:2]])
    box_dirs = np.eye(3)
    crosses = np.cross(edge_dirs[:, None, :], box_dirs[None, :, :]).reshape(-1, 3)
    axes = np.concatenate([box_dirs, r[2:3], side_normals, crosses])
    norms = np.linalg.norm(axes, axis=1, keepdims=True)
    return np.where(norms > 1e-12, axes / np.maximum(norms, 1e-300), 0.0)


def frustum_intersects_aabb(cam: Camera, box: Aabb, far: float) -> bool:
    """Separating-axis test between the truncated view pyramid and a box.

    Conservative by a relative margin of 1e-6: touching or near-touching
    configurations report an intersection.
    """
    if far <= cam.near:
        raise GeometryError("far must exceed near")
    fc = frustum_corners(cam, far)
    bc = box.corners()
    axes = _frustum_axes(cam, fc)
    pf = fc @ axes.T
    pb = bc @ axes.T
    scale = max(1.0, float(np.abs(fc).max()), float(np.abs(bc).max()))
    tol = 1e-6 * scale
    separated = (pf.max(0) < pb.min(0) - tol) | (pb.max(0) < pf.min(0) - tol)
    return not bool(np.any(separated))


def visible_cameras(cams: Sequence[Camera], box: Aabb, far: float, candidates=None) -> list[int]:
    idx = range(len(cams)) if candidates is None else candidates
    return [i for i in idx if frustum_intersects_aabb(cams[i], box, far)]


class FrustumSet:
    """Batched separating-axis tests of many cameras against one box at a time."""

    def __init__(self, cams: Sequence[Camera], far: float):
        self.corners = np.stack([frustum_corners(c, far) for c in cams])
        self.axes = np.stack([_frustum_axes(c, fc) for c, fc in zip(cams, self.corners)])
        proj = np.einsum("ckj,caj->cak", self.corners, self.axes)
        self.fmin = proj.min(-1)
        self.fmax = proj.max(-1)
        self.cscale = np.abs(self.corners).reshape(len(cams), -1).max(-1)

    def intersects(self, box: Aabb, candidates: np.ndarray) -> np.ndarray:
        candidates = np.asarray(candidates, dtype=np.int64)
        if candidates.size == 0:
            return candidates
        axes = self.axes[candidates]
        bc = box.corners()
        pb = np.einsum("kj,caj->cak", bc, axes)
        tol = 1e-6 * np.maximum(np.maximum(1.0, self.cscale[candidates]), np.abs(bc).max())[:, None]
        sep = (self.fmax[candidates] < pb.min(-1) - tol) | (pb.max(-1) < self.fmin[candidates] - tol)
        return candidates[~np.any(sep, axis=1)]


# rectification and selection


def _complete_frame(z: np.ndarray, y_hint: np.ndarray) -> np.ndarray:
    """Rows (x, y, z) of a right-handed frame with y closest to ``y_hint``."""
    for hint in (y_hint, np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])):
        y = hint - np.dot(hint, z) * z
        n = np.linalg.norm(y)
        if n > 1e-6 * max(np.linalg.norm(hint), 1e-300):
            y = y / n
            break
    x = np.cross(y, z)
    return np.stack([x, y, z])


def rectification_radius(distances: np.ndarray) -> float:
    d = np.sort(np.asarray(distances, dtype=np.float64))
    k = max(1, math.ceil(len(d) / 4))
    return float(d[:k].mean())


def rectify_cameras(cams: Sequence[Camera], region_center, radius: float | None = None) -> list[Camera]:
    """Turn every camera toward ``region_center`` and move it to a common distance.

    The common distance is the mean distance of the nearest quarter
    (rounded up, at least one) of the input cameras unless ``radius`` is given.
    """
    if len(cams) == 0:
        raise GeometryError("rectify_cameras needs at least one camera")
    target = np.asarray(region_center, dtype=np.float64)
    offsets = np.stack([c.center for c in cams]) - target
    dist = np.linalg.norm(offsets, axis=1)
    if np.any(dist < 1e-9):
        raise GeometryError("a camera center coincides with the region center")
    r = rectification_radius(dist) if radius is None else float(radius)
    out = []
    for cam, off, d in zip(cams, offsets, dist):
        center = target + off * (r / d)
        z = -off / d
        rot = _complete_frame(z, cam.rotation[1])
        out.append(replace(cam, rotation=rot, center=center))
    return out


def select_cameras(cams: Sequence[Camera], n_c: int = 4) -> list[int]:
    """Farthest-point selection over camera centers, seeded nearest the centroid."""
    if len(cams) == 0:
        raise GeometryError("select_cameras needs at least one camera")
    return farthest_point_selection(np.stack([c.center for c in cams]), n_c)


def farthest_point_selection(pts: np.ndarray, n_c: int) -> list[int]:
    if n_c < 1:
        raise GeometryError("n_c must be >= 1")
    if len(pts) <= n_c:
        return list(range(len(pts)))
    seed = int(np.argmin(np.linalg.norm(pts - pts.mean(0), axis=1)))
    chosen = [seed]
    mind = np.linalg.norm(pts - pts[seed], axis=1)
    for _ in range(n_c - 1):
        nxt = int(np.argmax(mind))  # first index among ties
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def rectified_centers(centers: np.ndarray, region_center) -> np.ndarray:
    """Camera centers after ``rectify_cameras`` (positions only)."""
    target = np.asarray(region_center, dtype=np.float64)
    off = np.asarray(centers, dtype=np.float64) - target
    dist = np.linalg.norm(off, axis=1)
    if np.any(dist < 1e-9):
        raise GeometryError("a camera center coincides with the region center")
    return target + off * (rectification_radius(dist) / dist)[:, None]


# pose manifest

MANIFEST_FIELDS = ("width", "height", "fx", "fy", "cx", "cy", "near")


def cameras_to_manifest(cams: Sequence[Camera], files: Sequence[str] | None = None) -> dict:
    c0 = cams[0]
    doc = {
        "width": int(c0.width),
        "height": int(c0.height),
        "fx": float(c0.fx),
        "fy": float(c0.fy),
        "cx": float(c0.cx),
        "cy": float(c0.cy),
        "near": float(c0.near),
        "frames": [],
    }
    for i, cam in enumerate(cams):
        frame = {"c2w": [float(v) for v in cam.c2w().ravel()]}
        if files is not None:
            frame["file"] = files[i]
        doc["frames"].append(frame)
    return doc


def cameras_from_manifest(doc: dict) -> list[Camera]:
    for key in MANIFEST_FIELDS + ("frames",):
        if key not in doc:
            raise GeometryError(f"pose manifest is missing field '{key}'")
    intr = dict(
        width=int(doc["width"]),
        height=int(doc["height"]),
        fx=float(doc["fx"]),
        fy=float(doc["fy"]),
        cx=float(doc["cx"]),
        cy=float(doc["cy"]),
        near=float(doc["near"]),
    )
    cams = []
    for i, frame in enumerate(doc["frames"]):
        if "c2w" not in frame:
            raise GeometryError(f"pose manifest frame {i} is missing field 'c2w'")
        c2w = np.asarray(frame["c2w"], dtype=np.float64)
        if c2w.size != 16:
            raise GeometryError(f"pose manifest frame {i} field 'c2w' must have 16 entries")
        cams.append(Camera.from_c2w(c2w.reshape(4, 4), **intr))
    return cams


def write_manifest(path, cams, files=None):
    Path(path).write_text(json.dumps(cameras_to_manifest(cams, files), indent=1))


def read_manifest(path) -> list[Camera]:
    return cameras_from_manifest(json.loads(Path(path).read_text()))
