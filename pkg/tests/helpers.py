"""Shared camera builders for the test suite."""

from __future__ import annotations

import numpy as np

from perspwarp.geometry import Camera
from perspwarp.scenes import default_intrinsics


def unit_cam(center=(0.0, 0.0, 0.0), near=0.05) -> Camera:
    """Identity-rotation camera with unit focal length and principal point at the origin."""
    return Camera(np.eye(3), np.asarray(center, dtype=float), 1.0, 1.0, 0.0, 0.0, 2, 2, near=near)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_camera(rng: np.random.Generator, width=64, height=48) -> Camera:
    f = rng.uniform(20, 120)
    return Camera(
        random_rotation(rng),
        rng.uniform(-3, 3, size=3),
        f,
        f * rng.uniform(0.8, 1.2),
        rng.uniform(0.3, 0.7) * width,
        rng.uniform(0.3, 0.7) * height,
        width,
        height,
        near=rng.uniform(0.01, 0.2),
    )


def point_in_front(rng: np.random.Generator, cam: Camera, lo=0.5, hi=10.0) -> np.ndarray:
    """A random world point at camera depth in [lo, hi] roughly inside the image."""
    depth = rng.uniform(lo, hi)
    u = rng.uniform(0, cam.width)
    v = rng.uniform(0, cam.height)
    xc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.rotation.T @ xc + cam.center


def ring_cameras(n=6, radius=4.0, span_deg=180.0, target=(0.0, 0.0, 0.0), width=32):
    intr = default_intrinsics(width, width)
    target = np.asarray(target, dtype=float)
    ang = np.deg2rad(np.linspace(-span_deg / 2, span_deg / 2, n))
    centers = target + radius * np.column_stack([np.sin(ang), np.zeros(n), -np.cos(ang)])
    return [Camera.look_at(c, target, **intr) for c in centers]
