"""Synthetic sphere scenes with an exact renderer, camera trajectories and dataset I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import Camera, GeometryError, generate_rays, read_manifest, write_manifest

PSNR_CAP = 99.0
TEST_EVERY = 8
PRESETS = ("three-spheres-free", "orbit", "forward")


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    sigma: float
    rgb: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(3)
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        if self.sigma < 0:
            raise ValueError("sphere density must be non-negative")
        if not (np.all(np.isfinite(self.center)) and np.all((self.rgb >= 0) & (self.rgb <= 1))):
            raise ValueError("sphere center must be finite and rgb in [0, 1]")


@dataclass(eq=False)
class SphereScene:
    """Constant-density spheres; inside overlaps the sphere with the nearest center wins."""

    spheres: list[Sphere]

    @property
    def centroid(self) -> np.ndarray:
        return np.mean([s.center for s in self.spheres], axis=0)

    def to_dict(self) -> dict:
        return {
            "spheres": [
                {"center": s.center.tolist(), "radius": s.radius, "sigma": s.sigma, "rgb": s.rgb.tolist()}
                for s in self.spheres
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SphereScene":
        if "spheres" not in doc:
            raise DatasetError("scene description is missing field 'spheres'")
        out = []
        for i, s in enumerate(doc["spheres"]):
            for key in ("center", "radius", "sigma", "rgb"):
                if key not in s:
                    raise DatasetError(f"scene sphere {i} is missing field '{key}'")
            out.append(Sphere(s["center"], float(s["radius"]), float(s["sigma"]), s["rgb"]))
        return cls(out)


# exact rendering


def render_rays_exact(scene: SphereScene, origins: np.ndarray, dirs: np.ndarray, near: float = 0.0,
                      splits: int = 1) -> np.ndarray:
    """Closed-form compositing of constant-density segments along each ray (black background).

    Breakpoints are sphere entries/exits and crossings of the bisector planes
    between sphere centers, so density and color are constant between them.
    ``splits`` > 1 cuts every segment further; the result must not change.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    if not scene.spheres:
        return np.zeros((n, 3))
    ctr = np.stack([s.center for s in scene.spheres])
    rad = np.array([s.radius for s in scene.spheres])
    sig = np.array([s.sigma for s in scene.spheres])
    col = np.stack([s.rgb for s in scene.spheres])

    bps = [np.full(n, float(near))]
    far = np.full(n, float(near))
    for k in range(len(ctr)):
        oc = o - ctr[k]
        b = np.einsum("ij,ij->i", d, oc)
        disc = b * b - (np.einsum("ij,ij->i", oc, oc) - rad[k] ** 2)
        root = np.sqrt(np.maximum(disc, 0))
        hit = disc > 0
        t0 = np.where(hit, -b - root, np.nan)
        t1 = np.where(hit, -b + root, np.nan)
        bps += [t0, t1]
        far = np.fmax(far, t1)
    for a in range(len(ctr)):
        for c in range(a + 1, len(ctr)):
            nrm = ctr[c] - ctr[a]
            rhs = 0.5 * (ctr[c] @ ctr[c] - ctr[a] @ ctr[a])
            den = d @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                bps.append(np.where(den != 0, (rhs - o @ nrm) / den, np.nan))
    t = np.stack(bps, axis=1)
    t = np.where(np.isnan(t), near, np.clip(t, near, far[:, None]))
    t = np.sort(t, axis=1)
    if splits > 1:
        f = np.arange(splits) / splits
        t = (t[:, :-1, None] + (t[:, 1:] - t[:, :-1])[:, :, None] * f).reshape(n, -1)
        t = np.concatenate([t, far[:, None]], axis=1)
        t = np.sort(np.maximum(t, near), axis=1)
    lo, hi = t[:, :-1], t[:, 1:]
    mid = 0.5 * (lo + hi)
    x = o[:, None, :] + mid[..., None] * d[:, None, :]
    dist2 = np.sum((x[:, :, None, :] - ctr) ** 2, axis=-1)
    inside = dist2 < rad**2
    dist2 = np.where(inside, dist2, np.inf)
    owner = np.argmin(dist2, axis=-1)
    occupied = inside.any(axis=-1)
    tau = np.where(occupied, sig[owner] * (hi - lo), 0.0)
    trans = np.exp(-np.concatenate([np.zeros((n, 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
    w = trans * -np.expm1(-tau)
    return np.einsum("ij,ijc->ic", w, np.where(occupied[..., None], col[owner], 0.0))


def oracle_render(scene: SphereScene, cam: Camera, splits: int = 1) -> np.ndarray:
    o, d = generate_rays(cam)
    return render_rays_exact(scene, o, d, cam.near, splits).reshape(cam.height, cam.width, 3)


# trajectories


@dataclass
class Trajectory:
    kind: str
    poses: list[Camera]

    def __post_init__(self):
        if len(self.poses) < 2:
            raise ValueError("a trajectory needs at least two poses")


def default_intrinsics(width: int = 64, height: int = 64, focal_ratio: float = 0.875, near: float = 0.05) -> dict:
    f = focal_ratio * width
    return dict(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height, near=near)


def _catmull_rom(pts: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions and tangents of a uniform Catmull-Rom spline through ``pts`` at parameters s in [0, 1]."""
    p = np.concatenate([2 * pts[:1] - pts[1:2], pts, 2 * pts[-1:] - pts[-2:-1]])
    nseg = len(pts) - 1
    u = np.clip(s, 0, 1) * nseg
    i = np.minimum(u.astype(int), nseg - 1)
    f = (u - i)[:, None]
    p0, p1, p2, p3 = p[i], p[i + 1], p[i + 2], p[i + 3]
    pos = 0.5 * (2 * p1 + (-p0 + p2) * f + (2 * p0 - 5 * p1 + 4 * p2 - p3) * f**2 + (-p0 + 3 * p1 - 3 * p2 + p3) * f**3)
    tan = 0.5 * ((-p0 + p2) + 2 * (2 * p0 - 5 * p1 + 4 * p2 - p3) * f + 3 * (-p0 + 3 * p1 - 3 * p2 + p3) * f**2)
    return pos, tan


def gen_trajectory(kind: str, scene: SphereScene, n: int, seed: int = 0, intrinsics: dict | None = None,
                   **params) -> Trajectory:
    """Camera poses for ``kind`` in forward, orbit or free.

    forward: params spacing, distance, jitter. orbit: radius, elevation (deg).
    free: clearance (lateral offset of the path from each sphere), jitter.
    """
    if n < 2:
        raise ValueError("need at least two poses")
    if not scene.spheres:
        raise ValueError("trajectories are laid out around the scene's spheres")
    intr = intrinsics or default_intrinsics()
    rng = np.random.default_rng(seed)
    target = scene.centroid
    if kind == "forward":
        spacing = float(params.get("spacing", 0.25))
        distance = float(params.get("distance", 6.0))
        jitter = float(params.get("jitter", 0.0))
        if spacing <= 0 or distance <= 0 or jitter < 0:
            raise ValueError("forward trajectory needs spacing > 0, distance > 0, jitter >= 0")
        base = Camera.look_at(target - np.array([0, 0, distance]), target, **intr)
        nx = int(np.ceil(np.sqrt(n)))
        poses = []
        for k in range(n):
            gx, gy = k % nx - (nx - 1) / 2, k // nx - (nx - 1) / 2
            offset = spacing * (gx * base.rotation[0] + gy * base.rotation[1])
            center = base.center + offset + jitter * spacing * rng.normal(size=3)
            if jitter > 0:
                # aim at a jittered target so orientations vary slightly
                aim = target + offset + jitter * spacing * rng.normal(size=3)
                poses.append(Camera.look_at(center, aim, **intr))
            else:
                poses.append(Camera(base.rotation, center, **intr))
        return Trajectory(kind, poses)
    if kind == "orbit":
        radius = float(params.get("radius", 6.0))
        elev = np.deg2rad(float(params.get("elevation", 20.0)))
        if radius <= 0:
            raise ValueError("orbit radius must be positive")
        ang = 2 * np.pi * np.arange(n) / n
        pts = target + radius * np.column_stack([np.cos(elev) * np.sin(ang), -np.sin(elev) * np.ones(n), -np.cos(elev) * np.cos(ang)])
        return Trajectory(kind, [Camera.look_at(p, target, **intr) for p in pts])
    if kind == "free":
        clearance = float(params.get("clearance", 2.0))
        jitter = float(params.get("jitter", 0.0))
        if clearance <= 0 or jitter < 0:
            raise ValueError("free trajectory needs clearance > 0 and jitter >= 0")
        ctr = np.stack([s.center for s in scene.spheres])
        axis = ctr[-1] - ctr[0] if len(ctr) > 1 else np.array([0.0, 0.0, 1.0])
        axis = axis / np.linalg.norm(axis)
        order = np.argsort(ctr @ axis)
        side = np.cross(axis, [0.0, 1.0, 0.0])
        if np.linalg.norm(side) < 1e-6:
            side = np.cross(axis, [1.0, 0.0, 0.0])
        side /= np.linalg.norm(side)
        way = [ctr[order[0]] - 4.0 * axis]
        for j, k in enumerate(order):
            lateral = (ctr[k] - target) @ side
            sgn = -np.sign(lateral) if abs(lateral) > 1e-6 else (1.0 if j % 2 == 0 else -1.0)
            way.append(ctr[k] + sgn * clearance * side - 1.0 * axis)
        pos, tan = _catmull_rom(np.array(way), np.linspace(0, 1, n))
        pos = pos + jitter * rng.normal(size=pos.shape)
        poses = []
        for p, tg in zip(pos, tan):
            tg = tg / np.linalg.norm(tg)
            ahead = [(np.linalg.norm(c - p), c) for c in ctr if (c - p) @ tg > 0]
            aim = min(ahead, key=lambda a: a[0])[1] if ahead else p + tg
            poses.append(Camera.look_at(p, aim, **intr))
        return Trajectory(kind, poses)
    raise ValueError(f"unknown trajectory kind {kind!r}")


def three_spheres() -> SphereScene:
    return SphereScene(
        [
            Sphere([-1.0, 0.0, 4.0], 0.6, 12.0, [0.9, 0.2, 0.15]),
            Sphere([1.0, 0.3, 7.5], 0.7, 12.0, [0.2, 0.8, 0.3]),
            Sphere([-1.0, -0.2, 11.0], 0.8, 12.0, [0.2, 0.35, 0.9]),
        ]
    )


def make_preset(name: str, n: int = 45, width: int = 64, height: int = 64, seed: int = 0) -> tuple[SphereScene, Trajectory]:
    intr = default_intrinsics(width, height)
    scene = three_spheres()
    if name == "three-spheres-free":
        return scene, gen_trajectory("free", scene, n, seed, intr, jitter=0.02)
    if name == "orbit":
        return scene, gen_trajectory("orbit", scene, n, seed, intr, radius=10.0)
    if name == "forward":
        return scene, gen_trajectory("forward", scene, n, seed, intr, distance=8.0, jitter=0.1)
    raise ValueError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")


# datasets


@dataclass
class Dataset:
    cams: list[Camera]
    images: list[np.ndarray]  # float (H, W, 3) in [0, 1]
    scene: SphereScene | None = None
    files: list[str] | None = None
    meta: dict | None = None

    @property
    def test_ids(self) -> list[int]:
        return [i for i in range(len(self.cams)) if i % TEST_EVERY == TEST_EVERY - 1]

    @property
    def train_ids(self) -> list[int]:
        return [i for i in range(len(self.cams)) if i % TEST_EVERY != TEST_EVERY - 1]

    def subset(self, ids: Sequence[int]) -> tuple[list[Camera], list[np.ndarray]]:
        return [self.cams[i] for i in ids], [self.images[i] for i in ids]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_dataset(scene: SphereScene, poses: Trajectory | Sequence[Camera], out_dir, meta: dict | None = None) -> Dataset:
    cams = poses.poses if isinstance(poses, Trajectory) else list(poses)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    files, images = [], []
    for i, cam in enumerate(cams):
        name = f"images/{i:04d}.png"
        img = to_uint8(oracle_render(scene, cam))
        Image.fromarray(img).save(out / name)
        files.append(name)
        images.append(img.astype(np.float64) / 255.0)
    write_manifest(out / "poses.json", cams, files)
    doc = scene.to_dict()
    if meta:
        doc["meta"] = meta
    (out / "scene.json").write_text(json.dumps(doc, indent=1))
    return Dataset(cams, images, scene, files, meta)


def read_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "poses.json").is_file():
        raise DatasetError(f"{root}: missing poses.json")
    try:
        cams = read_manifest(root / "poses.json")
        doc = json.loads((root / "poses.json").read_text())
    except (GeometryError, json.JSONDecodeError) as e:
        raise DatasetError(str(e)) from e
    files = [f.get("file") or f"images/{i:04d}.png" for i, f in enumerate(doc["frames"])]
    images = []
    for cam, name in zip(cams, files):
        p = root / name
        if not p.is_file():
            raise DatasetError(f"{root}: missing image {name}")
        img = np.asarray(Image.open(p).convert("RGB"))
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"{name}: size {img.shape[1]}x{img.shape[0]} does not match the pose 'width'/'height'")
        images.append(img.astype(np.float64) / 255.0)
    scene, meta = None, None
    if (root / "scene.json").is_file():
        sdoc = json.loads((root / "scene.json").read_text())
        scene = SphereScene.from_dict(sdoc)
        meta = sdoc.get("meta")
    return Dataset(cams, images, scene, files, meta)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))
