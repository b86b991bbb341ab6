"""Radiance field: multi-level hash grid with one hash function per leaf, SH view encoding and two small MLPs.

Forward and backward passes are written out by hand. Grid kernels iterate
over levels in parallel; each level owns its own slice of the table, so the
gradient scatter is race-free and its summation order is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numba
import numpy as np

DENSITY_CLAMP = 15.0
SH_DIM = 16
SINGLE_HASH_PRIMES = (1, 2654435761, 805459861)

PARAM_NAMES = ("table", "d_w0", "d_b0", "d_w1", "d_b1", "c_w0", "c_b0", "c_w1", "c_b1", "c_w2", "c_b2")


@dataclass
class GridConfig:
    levels: int = 16
    table_len: int = 2**19
    feat_dim: int = 2
    base_res: int = 16
    max_res: int = 2048
    mode: str = "single"  # "single" table shared by all leaves or "per-node" slabs

    def __post_init__(self):
        if self.mode not in ("single", "per-node"):
            raise ValueError(f"unknown hash mode {self.mode!r}")
        if self.levels < 1 or self.table_len < 1 or self.feat_dim < 1:
            raise ValueError("grid sizes must be positive")

    def resolutions(self) -> np.ndarray:
        if self.levels == 1:
            return np.array([self.base_res], dtype=np.int64)
        g = np.exp(np.log(self.max_res / self.base_res) / (self.levels - 1))
        return np.round(self.base_res * g ** np.arange(self.levels)).astype(np.int64)

    @property
    def out_dim(self) -> int:
        return self.levels * self.feat_dim


@dataclass
class FieldConfig:
    grid: GridConfig = dc_field(default_factory=GridConfig)
    density_hidden: int = 64
    density_out: int = 16  # 1 raw density + 15 features
    color_hidden: int = 64
    density_bias: float = 0.0  # initial bias of the raw-density output
    dtype: str = "float32"


# hashing


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24."""
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)
    for p in small:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(rng: np.random.Generator, lo: int = 2**20, hi: int = 2**31) -> int:
    while True:
        c = int(rng.integers(lo, hi)) | 1
        if is_prime(c):
            return c


@dataclass
class NodeHashParams:
    pi: tuple[int, int, int]
    delta: tuple[int, int, int]

    @classmethod
    def generate(cls, seed: int, index: int) -> "NodeHashParams":
        rng = np.random.default_rng([seed, index])
        pi = []
        while len(pi) < 3:
            p = random_prime(rng)
            if p not in pi:
                pi.append(p)
        delta = tuple(int(v) for v in rng.integers(0, 2**31, size=3))
        return cls(tuple(pi), delta)

    @classmethod
    def shared(cls) -> "NodeHashParams":
        return cls(SINGLE_HASH_PRIMES, (0, 0, 0))


def hash_params_arrays(params: list[NodeHashParams]) -> tuple[np.ndarray, np.ndarray]:
    pi = np.array([p.pi for p in params], dtype=np.uint64).reshape(-1, 3)
    delta = np.array([p.delta for p in params], dtype=np.uint64).reshape(-1, 3)
    return pi, delta


_MASK = (1 << 64) - 1


def hash_vertex(hp: NodeHashParams, v, table_len: int) -> int:
    """xor over axes of (v_k * pi_k + delta_k), in wrapping 64-bit arithmetic, mod table_len."""
    h = 0
    for k in range(3):
        h ^= (int(v[k]) * hp.pi[k] + hp.delta[k]) & _MASK
    return h % table_len


@numba.njit(cache=True, inline="always")
def _hash(v0, v1, v2, pi, delta, w):
    a = np.uint64(v0) * pi[w, 0] + delta[w, 0]
    b = np.uint64(v1) * pi[w, 1] + delta[w, 1]
    c = np.uint64(v2) * pi[w, 2] + delta[w, 2]
    return a ^ b ^ c


@numba.njit(cache=True)
def hash_indices(v, w, pi, delta, table_len):
    out = np.empty(v.shape[0], dtype=np.int64)
    for i in range(v.shape[0]):
        out[i] = np.int64(_hash(v[i, 0], v[i, 1], v[i, 2], pi, delta, w[i]) % np.uint64(table_len))
    return out


@numba.njit(cache=True, parallel=True)
def _grid_forward(zn, wid, res, pi, delta, slab_start, slab_len, table, out):
    n = zn.shape[0]
    nf = table.shape[2]
    for lvl in numba.prange(res.shape[0]):
        r = res[lvl]
        for i in range(n):
            w = wid[i]
            px = zn[i, 0] * r
            py = zn[i, 1] * r
            pz = zn[i, 2] * r
            ix = int(np.floor(px))
            iy = int(np.floor(py))
            iz = int(np.floor(pz))
            fx = px - ix
            fy = py - iy
            fz = pz - iz
            base = lvl * nf
            for f in range(nf):
                out[i, base + f] = 0.0
            slen = np.uint64(slab_len[w])
            for c in range(8):
                dx = c & 1
                dy = (c >> 1) & 1
                dz = (c >> 2) & 1
                wt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
                h = slab_start[w] + np.int64(_hash(ix + dx, iy + dy, iz + dz, pi, delta, w) % slen)
                for f in range(nf):
                    out[i, base + f] += wt * table[lvl, h, f]


@numba.njit(cache=True, parallel=True)
def _grid_backward(zn, wid, res, pi, delta, slab_start, slab_len, dout, grad):
    n = zn.shape[0]
    nf = grad.shape[2]
    for lvl in numba.prange(res.shape[0]):
        r = res[lvl]
        for i in range(n):
            w = wid[i]
            px = zn[i, 0] * r
            py = zn[i, 1] * r
            pz = zn[i, 2] * r
            ix = int(np.floor(px))
            iy = int(np.floor(py))
            iz = int(np.floor(pz))
            fx = px - ix
            fy = py - iy
            fz = pz - iz
            base = lvl * nf
            slen = np.uint64(slab_len[w])
            for c in range(8):
                dx = c & 1
                dy = (c >> 1) & 1
                dz = (c >> 2) & 1
                wt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
                h = slab_start[w] + np.int64(_hash(ix + dx, iy + dy, iz + dz, pi, delta, w) % slen)
                for f in range(nf):
                    grad[lvl, h, f] += wt * dout[i, base + f]


# direction encoding


def sh_encode(d: np.ndarray) -> np.ndarray:
    """Real spherical harmonics up to degree 3 (16 values) for unit directions (N, 3)."""
    d = np.asarray(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (SH_DIM,), dtype=d.dtype)
    out[..., 0] = 0.28209479177387814
    out[..., 1] = -0.48860251190291987 * y
    out[..., 2] = 0.48860251190291987 * z
    out[..., 3] = -0.48860251190291987 * x
    out[..., 4] = 1.0925484305920792 * x * y
    out[..., 5] = -1.0925484305920792 * y * z
    out[..., 6] = 0.94617469575755997 * zz - 0.31539156525251999
    out[..., 7] = -1.0925484305920792 * x * z
    out[..., 8] = 0.54627421529603959 * (xx - yy)
    out[..., 9] = 0.59004358992664352 * y * (-3.0 * xx + yy)
    out[..., 10] = 2.8906114426405538 * x * y * z
    out[..., 11] = 0.45704579946446572 * y * (1.0 - 5.0 * zz)
    out[..., 12] = 0.3731763325901154 * z * (5.0 * zz - 3.0)
    out[..., 13] = 0.45704579946446572 * x * (1.0 - 5.0 * zz)
    out[..., 14] = 1.4453057213202769 * z * (xx - yy)
    out[..., 15] = 0.59004358992664352 * x * (-xx + 3.0 * yy)
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class FieldCache:
    zn: np.ndarray
    wid: np.ndarray
    feat: np.ndarray
    h0: np.ndarray
    dens: np.ndarray
    cin: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray


class RadianceField:
    """Trainable parameters plus per-leaf hash functions for ``n_leaves`` warped leaves."""

    def __init__(self, config: FieldConfig, n_leaves: int, seed: int = 0, hash_params: list[NodeHashParams] | None = None):
        self.config = config
        self.n_leaves = int(n_leaves)
        self.seed = int(seed)
        self.dtype = np.dtype(config.dtype)
        g = config.grid
        self.res = g.resolutions()
        if hash_params is None:
            hash_params = [NodeHashParams.generate(seed, i) for i in range(self.n_leaves)]
        if len(hash_params) != self.n_leaves:
            raise ValueError("need one hash parameter set per leaf")
        self.hash_params = hash_params
        self.pi, self.delta = hash_params_arrays(hash_params)
        if g.mode == "per-node":
            slab = g.table_len // max(self.n_leaves, 1)
            if slab < 1:
                raise ValueError("table too small for one slab per leaf")
            self.slab_len = np.full(self.n_leaves, slab, dtype=np.int64)
            self.slab_start = np.arange(self.n_leaves, dtype=np.int64) * slab
        else:
            self.slab_len = np.full(self.n_leaves, g.table_len, dtype=np.int64)
            self.slab_start = np.zeros(self.n_leaves, dtype=np.int64)
        self.params = self.init_params(seed)

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        c = self.config
        g = c.grid
        rng = np.random.default_rng(seed)
        dt = self.dtype

        def he(fan_in, fan_out):
            b = np.sqrt(6.0 / fan_in)
            return rng.uniform(-b, b, size=(fan_in, fan_out)).astype(dt)

        p = {"table": rng.uniform(-1e-4, 1e-4, size=(g.levels, g.table_len, g.feat_dim)).astype(dt)}
        p["d_w0"] = he(g.out_dim, c.density_hidden)
        p["d_b0"] = np.zeros(c.density_hidden, dt)
        p["d_w1"] = he(c.density_hidden, c.density_out)
        p["d_b1"] = np.zeros(c.density_out, dt)
        p["d_b1"][0] = c.density_bias
        p["c_w0"] = he(c.density_out + SH_DIM, c.color_hidden)
        p["c_b0"] = np.zeros(c.color_hidden, dt)
        p["c_w1"] = he(c.color_hidden, c.color_hidden)
        p["c_b1"] = np.zeros(c.color_hidden, dt)
        p["c_w2"] = he(c.color_hidden, 3)
        p["c_b2"] = np.zeros(3, dt)
        return p

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # grid

    def encode(self, zn: np.ndarray, wid: np.ndarray) -> np.ndarray:
        """Hash-grid features (N, levels * feat_dim) for normalized warp coords in [0, 1]^3."""
        zn = np.ascontiguousarray(zn, dtype=self.dtype).reshape(-1, 3)
        wid = np.ascontiguousarray(wid, dtype=np.int64).reshape(-1)
        out = np.empty((len(zn), self.config.grid.out_dim), dtype=self.dtype)
        _grid_forward(zn, wid, self.res, self.pi, self.delta, self.slab_start, self.slab_len, self.params["table"], out)
        return out

    def encode_backward(self, zn, wid, dfeat, grad_table: np.ndarray) -> None:
        zn = np.ascontiguousarray(zn, dtype=self.dtype)
        dfeat = np.ascontiguousarray(dfeat, dtype=self.dtype)
        _grid_backward(zn, np.ascontiguousarray(wid, dtype=np.int64), self.res, self.pi, self.delta,
                       self.slab_start, self.slab_len, dfeat, grad_table)

    # full field

    def forward(self, zn: np.ndarray, wid: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, FieldCache]:
        """Density (N,) and color (N, 3) plus a cache for ``backward``."""
        p = self.params
        feat = self.encode(zn, wid)
        h0 = feat @ p["d_w0"] + p["d_b0"]
        dens = np.maximum(h0, 0) @ p["d_w1"] + p["d_b1"]
        sigma = np.exp(np.minimum(dens[:, 0], DENSITY_CLAMP))
        cin = np.concatenate([dens, sh_encode(np.asarray(dirs, dtype=self.dtype))], axis=1)
        h1 = cin @ p["c_w0"] + p["c_b0"]
        h2 = np.maximum(h1, 0) @ p["c_w1"] + p["c_b1"]
        rgb = _sigmoid(np.maximum(h2, 0) @ p["c_w2"] + p["c_b2"])
        cache = FieldCache(np.ascontiguousarray(zn, dtype=self.dtype), np.asarray(wid), feat, h0, dens, cin, h1, h2, sigma, rgb)
        return sigma, rgb, cache

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backward(self, cache: FieldCache, dsigma: np.ndarray, drgb: np.ndarray, grads: dict | None = None) -> dict:
        """Accumulate parameter gradients of a scalar loss given its gradients w.r.t. sigma and rgb."""
        p = self.params
        if grads is None:
            grads = self.zero_grads()
        dt = self.dtype
        dsigma = np.asarray(dsigma, dtype=dt)
        drgb = np.asarray(drgb, dtype=dt)
        a1 = np.maximum(cache.h1, 0)
        a2 = np.maximum(cache.h2, 0)
        dh3 = drgb * cache.rgb * (1 - cache.rgb)
        grads["c_w2"] += a2.T @ dh3
        grads["c_b2"] += dh3.sum(axis=0)
        dh2 = (dh3 @ p["c_w2"].T) * (cache.h2 > 0)
        grads["c_w1"] += a1.T @ dh2
        grads["c_b1"] += dh2.sum(axis=0)
        dh1 = (dh2 @ p["c_w1"].T) * (cache.h1 > 0)
        grads["c_w0"] += cache.cin.T @ dh1
        grads["c_b0"] += dh1.sum(axis=0)
        ddens = dh1 @ p["c_w0"][: self.config.density_out].T
        ddens[:, 0] += dsigma * cache.sigma * (cache.dens[:, 0] < DENSITY_CLAMP)
        a0 = np.maximum(cache.h0, 0)
        grads["d_w1"] += a0.T @ ddens
        grads["d_b1"] += ddens.sum(axis=0)
        dh0 = (ddens @ p["d_w1"].T) * (cache.h0 > 0)
        grads["d_w0"] += cache.feat.T @ dh0
        grads["d_b0"] += dh0.sum(axis=0)
        self.encode_backward(cache.zn, cache.wid, dh0 @ p["d_w0"].T, grads["table"])
        return grads
