"""Frustum-driven octree over the scene.

Nodes are split while some visible camera center lies within
``lam * side`` of the node center. Leaves keep the cameras whose frusta
touch them and a farthest-point subset of those (after turning them toward
the leaf center) that later drives the leaf's warp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Aabb, Camera, FrustumSet, GeometryError, farthest_point_selection, rectified_centers

ROOT_SCALE = 512.0
FAR_FACTOR = 8.0
FACE_PROBE = 1e-6  # probe offset across a face, as a fraction of the leaf side

# bit0 = +x, bit1 = +y, bit2 = +z
OCTANT_SIGNS = np.array([[1 if (i >> k) & 1 else -1 for k in range(3)] for i in range(8)], dtype=np.float64)


@dataclass
class OctreeNode:
    center: np.ndarray
    side: float
    depth: int
    children: Optional[list[int]] = None
    visible_cams: list[int] = field(default_factory=list)
    selected_cams: list[int] = field(default_factory=list)
    warp_id: Optional[int] = None
    hash_params: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def box(self) -> Aabb:
        return Aabb.from_center(self.center, self.side)


@dataclass
class Octree:
    nodes: list[OctreeNode]
    root: int = 0
    lam: float = 3.0
    n_c: int = 4
    max_depth: int = 12

    def __post_init__(self):
        self._refresh()

    def _refresh(self):
        n = len(self.nodes)
        self.centers = np.array([nd.center for nd in self.nodes], dtype=np.float64).reshape(n, 3)
        self.sides = np.array([nd.side for nd in self.nodes], dtype=np.float64)
        self.depths = np.array([nd.depth for nd in self.nodes], dtype=np.int64)
        self.children = np.full((n, 8), -1, dtype=np.int64)
        for i, nd in enumerate(self.nodes):
            if nd.children is not None:
                self.children[i] = nd.children
        self.leaf_warp = np.array(
            [-1 if nd.warp_id is None else nd.warp_id for nd in self.nodes], dtype=np.int64
        )

    @property
    def root_box(self) -> Aabb:
        return self.nodes[self.root].box

    @property
    def root_side(self) -> float:
        return self.nodes[self.root].side

    def leaves(self) -> list[int]:
        return [i for i, nd in enumerate(self.nodes) if nd.is_leaf]

    def warped_leaves(self) -> list[int]:
        """Leaf ids ordered by warp id."""
        ids = [i for i, nd in enumerate(self.nodes) if nd.is_leaf and nd.warp_id is not None]
        return sorted(ids, key=lambda i: self.nodes[i].warp_id)


def root_cube(cams: Sequence[Camera]) -> tuple[np.ndarray, float]:
    pts = np.stack([c.center for c in cams])
    extent = max(float(np.ptp(pts, axis=0).max()), 1.0)
    return pts.mean(axis=0), ROOT_SCALE * extent


def build_octree(cams: Sequence[Camera], lam: float = 3.0, n_c: int = 4, max_depth: int = 12) -> Octree:
    if len(cams) == 0:
        raise GeometryError("build_octree needs at least one camera")
    centers = np.stack([c.center for c in cams])
    root_center, root_side = root_cube(cams)
    frusta = FrustumSet(cams, FAR_FACTOR * root_side)

    root = OctreeNode(center=root_center, side=root_side, depth=0)
    root.visible_cams = frusta.intersects(root.box, np.arange(len(cams))).tolist()
    nodes = [root]
    queue = [0]
    head = 0
    while head < len(queue):
        nid = queue[head]
        head += 1
        node = nodes[nid]
        vis = np.asarray(node.visible_cams, dtype=np.int64)
        split = False
        if node.depth < max_depth and vis.size:
            d = np.linalg.norm(centers[vis] - node.center, axis=1)
            split = bool(np.any(d <= lam * node.side))
        if not split:
            continue
        node.children = []
        half = node.side / 2
        for k in range(8):
            child = OctreeNode(center=node.center + OCTANT_SIGNS[k] * (half / 2), side=half, depth=node.depth + 1)
            child.visible_cams = frusta.intersects(child.box, vis).tolist()
            node.children.append(len(nodes))
            queue.append(len(nodes))
            nodes.append(child)

    warp_id = 0
    for node in nodes:
        if not node.is_leaf or not node.visible_cams:
            continue
        node.selected_cams = leaf_camera_subset(cams, node.visible_cams, node.center, n_c)
        if node.selected_cams:
            node.warp_id = warp_id
            node.hash_params = warp_id
            warp_id += 1
    return Octree(nodes=nodes, root=0, lam=lam, n_c=n_c, max_depth=max_depth)


def leaf_camera_subset(cams, visible: Sequence[int], center, n_c: int) -> list[int]:
    """Rectify the visible cameras toward ``center``, then farthest-point select among them."""
    visible = [i for i in visible if np.linalg.norm(cams[i].center - center) >= 1e-9]
    if not visible:
        return []
    pts = rectified_centers(np.stack([cams[i].center for i in visible]), center)
    return [visible[j] for j in farthest_point_selection(pts, n_c)]


# queries


def locate_leaves(tree: Octree, x: np.ndarray) -> np.ndarray:
    """Leaf id per point (N, 3) with half-open boxes; -1 outside the root."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    rb = tree.root_box
    inside = np.all((x >= rb.min) & (x < rb.max), axis=1)
    node = np.where(inside, tree.root, -1)
    active = np.flatnonzero(inside & (tree.children[np.maximum(node, 0), 0] >= 0))
    while active.size:
        nd = node[active]
        bits = (x[active] >= tree.centers[nd]).astype(np.int64)
        octant = bits[:, 0] | (bits[:, 1] << 1) | (bits[:, 2] << 2)
        node[active] = tree.children[nd, octant]
        active = active[tree.children[node[active], 0] >= 0]
    return node


def locate_leaf(tree: Octree, x) -> Optional[int]:
    nid = int(locate_leaves(tree, np.asarray(x, dtype=np.float64)[None])[0])
    return None if nid < 0 else nid


def leaf_face_pairs(tree: Octree) -> list[tuple[int, int, Aabb]]:
    """Unordered pairs of warped leaves sharing a face of positive area."""
    ids = np.asarray(tree.warped_leaves(), dtype=np.int64)
    if ids.size == 0:
        return []
    ctr = tree.centers[ids]
    half = tree.sides[ids] / 2
    lo, hi = ctr - half[:, None], ctr + half[:, None]
    probes, owner, axes, planes = [], [], [], []
    for axis in range(3):
        for upper in (False, True):
            p = ctr.copy()
            # step just across the face; recursive centers drift by a few ulps
            step = FACE_PROBE * 2 * half
            p[:, axis] = hi[:, axis] + step if upper else lo[:, axis] - step
            probes.append(p)
            owner.append(ids)
            axes.append(np.full(ids.size, axis))
            planes.append(hi[:, axis] if upper else lo[:, axis])
    probes = np.concatenate(probes)
    owner = np.concatenate(owner)
    axes = np.concatenate(axes)
    planes = np.concatenate(planes)
    other = locate_leaves(tree, probes)
    ok = other >= 0
    ok[ok] = tree.leaf_warp[other[ok]] >= 0
    # the smaller of two unequal neighbours reports the shared face
    ok &= (other != owner) & (tree.sides[np.maximum(other, 0)] >= tree.sides[owner])
    pairs = {}
    for k in np.flatnonzero(ok):
        a, b = int(owner[k]), int(other[k])
        key = (min(a, b), max(a, b))
        if key in pairs:
            continue
        h = tree.sides[a] / 2
        fmin, fmax = tree.centers[a] - h, tree.centers[a] + h
        fmin[axes[k]] = fmax[axes[k]] = planes[k]
        pairs[key] = Aabb(fmin, fmax)
    return [(a, b, face) for (a, b), face in sorted(pairs.items())]


# serialization


def octree_to_dict(tree: Octree) -> dict:
    return {
        "format": "perspwarp-octree",
        "version": 1,
        "root": tree.root,
        "lambda": tree.lam,
        "n_c": tree.n_c,
        "max_depth": tree.max_depth,
        "nodes": [
            {
                "center": [float(v) for v in nd.center],
                "side": float(nd.side),
                "depth": int(nd.depth),
                "is_leaf": nd.is_leaf,
                "children": nd.children,
                "visible_cams": [int(i) for i in nd.visible_cams],
                "selected_cams": [int(i) for i in nd.selected_cams],
                "warp_id": nd.warp_id,
                "hash_params": nd.hash_params,
            }
            for nd in tree.nodes
        ],
    }


def dump_octree(tree: Octree) -> bytes:
    return json.dumps(octree_to_dict(tree), sort_keys=True, separators=(",", ":")).encode()


def load_octree(data: bytes | str) -> Octree:
    doc = json.loads(data)
    nodes = [
        OctreeNode(
            center=np.array(nd["center"], dtype=np.float64),
            side=float(nd["side"]),
            depth=int(nd["depth"]),
            children=None if nd["is_leaf"] else list(nd["children"]),
            visible_cams=list(nd["visible_cams"]),
            selected_cams=list(nd["selected_cams"]),
            warp_id=nd["warp_id"],
            hash_params=nd["hash_params"],
        )
        for nd in doc["nodes"]
    ]
    return Octree(nodes=nodes, root=doc["root"], lam=doc["lambda"], n_c=doc["n_c"], max_depth=doc["max_depth"])


def write_leaf_ply(tree: Octree, path) -> None:
    """ASCII PLY of leaf centers colored by depth (shallow = blue, deep = red)."""
    leaves = tree.leaves()
    top = max(1, max(tree.nodes[i].depth for i in leaves))
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(leaves)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int depth",
        "end_header",
    ]
    for i in leaves:
        nd = tree.nodes[i]
        f = nd.depth / top
        r, b = int(round(255 * f)), int(round(255 * (1 - f)))
        lines.append(f"{nd.center[0]:.9g} {nd.center[1]:.9g} {nd.center[2]:.9g} {r} 0 {b} {nd.depth}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
