"""Volume rendering, losses, optimization and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field as dc_field
from typing import Sequence

import numba
import numpy as np

from .field import PARAM_NAMES, FieldConfig, GridConfig, RadianceField
from .geometry import Camera, cameras_from_manifest, cameras_to_manifest, generate_rays
from .sampling import DEFAULT_STEP, MAX_SAMPLES, SampleBatch, Sampler
from .subdivision import Octree, build_octree, leaf_face_pairs
from .warp import WarpTable, build_warps, identity_warp


class NumericError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_disp: float = 1e-3
    lambda_tv: float = 1e-1
    eps: float = 1e-4

    def __post_init__(self):
        if self.lambda_disp < 0 or self.lambda_tv < 0 or self.eps <= 0:
            raise ValueError("loss weights must be >= 0 and eps > 0")


@dataclass
class TrainConfig:
    steps: int = 20000
    point_batch: int = 262144
    lr_peak: float = 1e-1
    lr_warmup_steps: int = 1000
    lr_final: float = 1e-2
    tv_points: int = 8192
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.point_batch < 1:
            raise ValueError("steps and point_batch must be >= 1")


@dataclass
class ModelConfig:
    warp: str = "perspective"  # or "none"
    sample: str = "perspective"  # "exp" or "uniform"
    lam: float = 3.0
    n_c: int = 4
    max_depth: int = 12
    n_per_axis: int = 32
    step: float = DEFAULT_STEP
    max_samples: int = MAX_SAMPLES
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    seed: int = 0

    def __post_init__(self):
        if self.warp not in ("perspective", "none"):
            raise ValueError(f"unknown warp mode {self.warp!r}")
        if isinstance(self.field, dict):
            f = dict(self.field)
            f["grid"] = GridConfig(**f.get("grid", {}))
            self.field = FieldConfig(**f)


@dataclass
class FacePairs:
    wa: np.ndarray
    wb: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    area: np.ndarray

    def __len__(self):
        return len(self.wa)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Area-weighted uniform points on shared faces: (points, warp id a, warp id b)."""
        k = rng.choice(len(self), size=n, p=self.area / self.area.sum())
        u = rng.random((n, 3))
        return self.lo[k] + u * (self.hi[k] - self.lo[k]), self.wa[k], self.wb[k]


class Model:
    """Octree, warps, sampler and radiance field for one set of training cameras."""

    def __init__(self, cams: Sequence[Camera], config: ModelConfig):
        self.cams = list(cams)
        self.config = config
        self.tree: Octree = build_octree(self.cams, config.lam, config.n_c, config.max_depth)
        if config.warp == "none":
            root = self.tree.root_box
            self.warps = []
            for nid in self.tree.warped_leaves():
                w = identity_warp(root, node_id=nid)
                w.warp_bbox = root
                self.warps.append(w)
        else:
            self.warps = build_warps(self.tree, self.cams, config.n_per_axis)
        self.table = WarpTable(self.warps, max_cams=config.n_c)
        self.sampler = Sampler(self.tree, self.table, config.sample, config.step, config.max_samples)
        self.field = RadianceField(config.field, len(self.warps), seed=config.seed)
        self.faces = self._face_pairs()

    def _face_pairs(self) -> FacePairs:
        pairs = leaf_face_pairs(self.tree)
        wid = self.tree.leaf_warp
        lo = np.array([f.min for _, _, f in pairs]).reshape(-1, 3)
        hi = np.array([f.max for _, _, f in pairs]).reshape(-1, 3)
        ext = np.sort(hi - lo, axis=1)
        return FacePairs(
            np.array([wid[a] for a, _, _ in pairs], dtype=np.int64),
            np.array([wid[b] for _, b, _ in pairs], dtype=np.int64),
            lo, hi, ext[:, 1] * ext[:, 2],
        )

    def query(self, batch: SampleBatch, dirs: np.ndarray):
        """Field outputs for marched samples; ``dirs`` holds one direction per ray."""
        zn = self.table.normalize(batch.z, batch.wid)
        return self.field.forward(zn, batch.wid, dirs[batch.ray_index()])


# compositing


def composite(sigma, dt, rgb) -> tuple[np.ndarray, np.ndarray, float]:
    """Single-ray compositing over a black background: (color, weights, final transmittance)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    tau = sigma * dt
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(tau)]))
    weights = trans[:-1] * -np.expm1(-tau)
    return weights @ rgb, weights, float(trans[-1])


@numba.njit(cache=True)
def _composite_forward(offsets, sigma, dt, chan, out, t_end):
    for r in range(offsets.shape[0] - 1):
        trans = 1.0
        for k in range(chan.shape[1]):
            out[r, k] = 0.0
        for i in range(offsets[r], offsets[r + 1]):
            tau = sigma[i] * dt[i]
            nxt = trans * np.exp(-tau)
            w = trans - nxt
            for k in range(chan.shape[1]):
                out[r, k] += w * chan[i, k]
            trans = nxt
        t_end[r] = trans


@numba.njit(cache=True)
def _composite_backward(offsets, sigma, dt, chan, out, gout, dsigma, dchan):
    nk = chan.shape[1]
    acc = np.empty(nk)
    for r in range(offsets.shape[0] - 1):
        trans = 1.0
        for k in range(nk):
            acc[k] = 0.0
        for i in range(offsets[r], offsets[r + 1]):
            tau = sigma[i] * dt[i]
            nxt = trans * np.exp(-tau)
            w = trans - nxt
            g = 0.0
            for k in range(nk):
                acc[k] += w * chan[i, k]
                # dC/dsigma_i = dt_i * (T_{i+1} c_i - (C - C_{<=i}))
                g += gout[r, k] * (nxt * chan[i, k] - (out[r, k] - acc[k]))
                dchan[i, k] = w * gout[r, k]
            dsigma[i] = dt[i] * g
            trans = nxt


def composite_rays(offsets, sigma, dt, chan):
    """Batched compositing of per-sample channels: (N, K) -> per-ray (R, K) and final transmittance (R,)."""
    chan = np.ascontiguousarray(chan, dtype=np.float64)
    out = np.empty((len(offsets) - 1, chan.shape[1]))
    t_end = np.empty(len(offsets) - 1)
    _composite_forward(offsets, np.asarray(sigma, np.float64), np.asarray(dt, np.float64), chan, out, t_end)
    return out, t_end


def composite_rays_backward(offsets, sigma, dt, chan, out, gout):
    chan = np.ascontiguousarray(chan, dtype=np.float64)
    dsigma = np.empty(len(chan))
    dchan = np.empty_like(chan)
    _composite_backward(offsets, np.asarray(sigma, np.float64), np.asarray(dt, np.float64), chan, out,
                        np.ascontiguousarray(gout, dtype=np.float64), dsigma, dchan)
    return dsigma, dchan


# losses


def recon_loss(c, c_gt, eps: float = 1e-4) -> float:
    """Charbonnier penalty, averaged over channels (and rays for batched input)."""
    return float(np.mean(np.sqrt((np.asarray(c) - np.asarray(c_gt)) ** 2 + eps)))


def recon_loss_grad(c, c_gt, eps: float = 1e-4) -> np.ndarray:
    diff = np.asarray(c, dtype=np.float64) - np.asarray(c_gt, dtype=np.float64)
    return diff / np.sqrt(diff**2 + eps) / diff.size


def disparity_loss(weights: Sequence[np.ndarray], ts: Sequence[np.ndarray]) -> float:
    """Mean over rays of the squared expected disparity."""
    if len(weights) == 0:
        return 0.0
    disp = np.array([np.sum(np.asarray(w) / np.asarray(t)) for w, t in zip(weights, ts)])
    return float(np.mean(disp**2))


def tv_loss(model: Model, n_b: int, rng: np.random.Generator, grad_table: np.ndarray | None = None,
            scale: float = 1.0) -> float:
    """Mean squared difference of grid features read through the two leaves sharing a face.

    When ``grad_table`` is given, ``scale`` times the loss gradient is accumulated into it.
    """
    if len(model.faces) == 0 or n_b <= 0:
        return 0.0
    pts, wa, wb = model.faces.sample(rng, n_b)
    za, va = model.table.evaluate(pts, wa, with_jacobian=False)
    zb, vb = model.table.evaluate(pts, wb, with_jacobian=False)
    ok = va & vb
    if not ok.any():
        return 0.0
    wa, wb, za, zb = wa[ok], wb[ok], za[ok], zb[ok]
    na, nb = model.table.normalize(za, wa), model.table.normalize(zb, wb)
    fa, fb = model.field.encode(na, wa), model.field.encode(nb, wb)
    diff = fa.astype(np.float64) - fb
    loss = float(np.sum(diff**2) / len(diff))
    if grad_table is not None:
        g = (2.0 * scale / len(diff)) * diff
        model.field.encode_backward(na, wa, g, grad_table)
        model.field.encode_backward(nb, wb, -g, grad_table)
    return loss


@dataclass
class LossTerms:
    recon: float
    disp: float
    tv: float

    @property
    def total(self) -> float:
        return self.recon + self.disp + self.tv


def batch_loss(model: Model, batch: SampleBatch, dirs, colors, weights: LossWeights, tv_rng=None, n_tv: int = 0,
               grads: dict | None = None) -> LossTerms:
    """Total loss on marched rays (plus TV on sampled face points); accumulates gradients if ``grads`` is given.

    ``recon``, ``disp`` and ``tv`` are reported already multiplied by their weights.
    """
    sigma, rgb, cache = model.query(batch, dirs)
    chan = np.column_stack([rgb, 1.0 / batch.t])
    out, _ = composite_rays(batch.offsets, sigma, batch.dt, chan)
    recon = recon_loss(out[:, :3], colors, weights.eps)
    disp = weights.lambda_disp * float(np.mean(out[:, 3] ** 2)) if len(out) else 0.0
    tv = 0.0
    if tv_rng is not None and n_tv > 0 and weights.lambda_tv > 0:
        gt = grads["table"] if grads is not None else None
        tv = weights.lambda_tv * tv_loss(model, n_tv, tv_rng, gt, weights.lambda_tv)
    if grads is not None and len(out):
        gout = np.zeros_like(out)
        gout[:, :3] = recon_loss_grad(out[:, :3], colors, weights.eps)
        gout[:, 3] = weights.lambda_disp * 2.0 * out[:, 3] / len(out)
        dsigma, dchan = composite_rays_backward(batch.offsets, sigma, batch.dt, chan, out, gout)
        model.field.backward(cache, dsigma, dchan[:, :3], grads)
    return LossTerms(recon, disp, tv)


# optimization


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from zero, then cosine decay reaching ``lr_final`` at ``cfg.steps``."""
    warm = cfg.lr_warmup_steps
    if step < warm or cfg.steps <= warm:
        return cfg.lr_peak * min(step, warm) / max(warm, 1)
    p = min((step - warm) / (cfg.steps - warm), 1.0)
    return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * p))


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    for i in range(p.shape[0]):
        m[i] = b1 * m[i] + (1 - b1) * g[i]
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.99, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1 - self.beta1**self.t
        bc2 = 1 - self.beta2**self.t
        for k, p in params.items():
            _adam_kernel(p.reshape(-1), grads[k].reshape(-1), self.m[k].reshape(-1), self.v[k].reshape(-1),
                         lr, self.beta1, self.beta2, self.eps, bc1, bc2)


@dataclass
class RayPool:
    """Every pixel of the training images as a ray with its target color."""

    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    colors: np.ndarray

    @classmethod
    def from_images(cls, cams: Sequence[Camera], images: Sequence[np.ndarray]) -> "RayPool":
        o, d, n, c = [], [], [], []
        for cam, img in zip(cams, images):
            ro, rd = generate_rays(cam)
            o.append(ro)
            d.append(rd)
            n.append(np.full(len(ro), cam.near))
            c.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
        return cls(np.concatenate(o), np.concatenate(d), np.concatenate(n), np.concatenate(c))

    def __len__(self):
        return len(self.origins)


class Trainer:
    def __init__(self, model: Model, pool: RayPool, config: TrainConfig, weights: LossWeights | None = None):
        self.model = model
        self.pool = pool
        self.config = config
        self.weights = weights or LossWeights()
        self.rng = np.random.default_rng(config.seed)
        self.adam = Adam(model.field.params, config.beta1, config.beta2, config.adam_eps)
        self.step_count = 0
        self.rays_per_step = 0
        self._spr = 64.0  # running estimate of samples per ray

    def draw_batch(self) -> tuple[SampleBatch, np.ndarray]:
        """Random training rays marched until the point budget is reached; returns samples and pool indices."""
        budget = self.config.point_batch
        parts, idx_parts = [], []
        used = 0
        for _ in range(1000):
            if used >= budget:
                break
            k = max(8, int(1.25 * (budget - used) / self._spr) + 1)
            idx = self.rng.integers(0, len(self.pool), size=k)
            b = self.model.sampler.march(self.pool.origins[idx], self.pool.dirs[idx], self.pool.near[idx],
                                         capacity=budget - used)
            parts.append(b)
            idx_parts.append(idx[: b.n_rays])
            used += len(b)
            if b.n_rays < k:
                break
        batch = _concat_batches(parts)
        if batch.n_rays:
            self._spr = max(1.0, len(batch) / batch.n_rays)
        return batch, np.concatenate(idx_parts)

    def step(self) -> dict:
        i = self.step_count + 1
        lr = learning_rate(i, self.config)
        batch, idx = self.draw_batch()
        grads = self.model.field.zero_grads()
        terms = batch_loss(self.model, batch, self.pool.dirs[idx], self.pool.colors[idx], self.weights,
                           self.rng, self.config.tv_points, grads)
        if not math.isfinite(terms.total) or not all(np.isfinite(g).all() for g in grads.values()):
            raise NumericError(f"non-finite loss or gradient at step {i}")
        self.adam.step(self.model.field.params, grads, lr)
        self.step_count = i
        self.rays_per_step = batch.n_rays
        return {"step": i, "recon": terms.recon, "disp": terms.disp, "tv": terms.tv, "lr": lr}

    def train(self, steps: int | None = None, callback=None) -> list[dict]:
        log = []
        for _ in range(self.config.steps if steps is None else steps):
            row = self.step()
            log.append(row)
            if callback is not None:
                callback(row)
        return log


def _concat_batches(parts: list[SampleBatch]) -> SampleBatch:
    if len(parts) == 1:
        return parts[0]
    offsets = [np.zeros(1, dtype=np.int64)]
    base = 0
    for b in parts:
        offsets.append(b.offsets[1:] + base)
        base += len(b)
    return SampleBatch(
        np.concatenate(offsets),
        np.concatenate([b.t for b in parts]),
        np.concatenate([b.dt for b in parts]),
        np.concatenate([b.leaf for b in parts]),
        np.concatenate([b.wid for b in parts]),
        np.concatenate([b.z for b in parts]).reshape(-1, 3),
    )


def render_rays(model: Model, origins, dirs, near, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Colors (R, 3) and expected disparity (R,) for arbitrary rays."""
    colors, disp = [], []
    for s in range(0, len(origins), chunk):
        o, d = origins[s : s + chunk], dirs[s : s + chunk]
        b = model.sampler.march(o, d, near if np.isscalar(near) else near[s : s + chunk])
        if len(b) == 0:
            colors.append(np.zeros((len(o), 3)))
            disp.append(np.zeros(len(o)))
            continue
        sigma, rgb, _ = model.query(b, d)
        out, _ = composite_rays(b.offsets, sigma, b.dt, np.column_stack([rgb, 1.0 / b.t]))
        colors.append(out[:, :3])
        disp.append(out[:, 3])
    return np.concatenate(colors), np.concatenate(disp)


def render_image(model: Model, cam: Camera, chunk: int = 1024) -> np.ndarray:
    o, d = generate_rays(cam)
    c, _ = render_rays(model, o, d, cam.near, chunk)
    return np.clip(c.reshape(cam.height, cam.width, 3), 0.0, 1.0)


# checkpoints

CHECKPOINT_MAGIC = b"PWNRFCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Model, step: int = 0, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, u32 version, u64 header length, JSON header, then little-endian float32 arrays.

    The header lists the model config, training poses and each array's name and
    shape in storage order. Octree, warps and hash functions are rebuilt from
    the poses and seed on load.
    """
    params = model.field.params
    header = {
        "model": asdict(model.config),
        "cameras": cameras_to_manifest(model.cams),
        "step": int(step),
        "arrays": [{"name": k, "shape": list(params[k].shape)} for k in PARAM_NAMES],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for k in PARAM_NAMES:
            fh.write(np.ascontiguousarray(params[k], dtype="<f4").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{fh.name}: not a checkpoint file")
    version, n = struct.unpack("<IQ", fh.read(12))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return json.loads(fh.read(n))


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        model = Model(cameras_from_manifest(header["cameras"]), ModelConfig(**header["model"]))
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"checkpoint truncated in array {spec['name']!r}")
            raw = np.frombuffer(buf, dtype="<f4")
            p = model.field.params[spec["name"]]
            if p.shape != shape:
                raise ValueError(f"array {spec['name']!r} has shape {shape}, model expects {p.shape}")
            p[...] = raw.reshape(shape)
    return model, header
