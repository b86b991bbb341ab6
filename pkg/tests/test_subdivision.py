from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import ring_cameras, unit_cam
from perspwarp.geometry import Aabb, Camera, GeometryError, frustum_intersects_aabb
from perspwarp.subdivision import (
    FAR_FACTOR,
    Octree,
    OctreeNode,
    build_octree,
    dump_octree,
    leaf_face_pairs,
    load_octree,
    locate_leaf,
    locate_leaves,
    root_cube,
    write_leaf_ply,
)


def split_once_tree(warped=True) -> Octree:
    root = OctreeNode(center=np.zeros(3), side=2.0, depth=0, children=list(range(1, 9)))
    nodes = [root]
    for k in range(8):
        off = np.array([1 if (k >> a) & 1 else -1 for a in range(3)], dtype=float) * 0.5
        nodes.append(OctreeNode(center=off, side=1.0, depth=1, warp_id=k if warped else None))
    return Octree(nodes)


def brute_leaf(tree: Octree, x: np.ndarray) -> np.ndarray:
    """Leaf per point by linear scan over every leaf box (half-open)."""
    out = np.full(len(x), -1)
    for i in tree.leaves():
        nd = tree.nodes[i]
        inside = np.all((x >= nd.center - nd.side / 2) & (x < nd.center + nd.side / 2), axis=1)
        out[inside] = i
    return out


@pytest.fixture(scope="module")
def ring_tree(small_cams):
    return build_octree(small_cams, max_depth=8)


class TestRoot:
    def test_unit_cube_cameras_give_side_512(self, rng):
        cams = [unit_cam(center=c) for c in rng.random((5, 3))]
        cams.append(unit_cam(center=(0.0, 0.0, 0.0)))
        cams.append(unit_cam(center=(1.0, 1.0, 1.0)))
        _, side = root_cube(cams)
        assert side == pytest.approx(512.0)

    def test_single_camera_floor(self):
        center, side = root_cube([unit_cam(center=(2.0, 3.0, 4.0))])
        assert side == 512.0
        np.testing.assert_allclose(center, [2, 3, 4])

    def test_side_scales_with_extent(self):
        cams = [unit_cam(center=(0.0, 0.0, 0.0)), unit_cam(center=(0.0, 5.0, 1.0))]
        assert root_cube(cams)[1] == pytest.approx(512.0 * 5.0)

    def test_empty_raises(self):
        with pytest.raises(GeometryError):
            build_octree([])


class TestBuild:
    def test_split_rule(self, ring_tree, small_cams):
        centers = np.stack([c.center for c in small_cams])
        for i, nd in enumerate(ring_tree.nodes):
            vis = nd.visible_cams
            near = bool(vis) and np.linalg.norm(centers[vis] - nd.center, axis=1).min() <= ring_tree.lam * nd.side
            if nd.is_leaf:
                assert not near or nd.depth == ring_tree.max_depth
            else:
                assert near and nd.depth < ring_tree.max_depth

    def test_root_side_at_distance_100_subdivides(self):
        # a camera 100 units from the root center of a 512 cube: 100 <= 3 * 512
        cams = [unit_cam(center=(0.0, 0.0, 0.0)), unit_cam(center=(0.5, 0.5, 0.5))]
        tree = build_octree(cams, max_depth=1)
        assert not tree.nodes[0].is_leaf

    def test_children_geometry(self, ring_tree):
        for nd in ring_tree.nodes:
            if nd.is_leaf:
                continue
            for k, c in enumerate(nd.children):
                ch = ring_tree.nodes[c]
                assert ch.side == nd.side / 2
                sign = np.array([1 if (k >> a) & 1 else -1 for a in range(3)])
                np.testing.assert_allclose(ch.center - nd.center, sign * nd.side / 4)

    def test_visible_cams_match_frustum_oracle(self, ring_tree, small_cams):
        far = FAR_FACTOR * ring_tree.root_side
        rng = np.random.default_rng(0)
        leaves = ring_tree.leaves()
        for i in rng.choice(leaves, size=min(200, len(leaves)), replace=False):
            nd = ring_tree.nodes[i]
            expect = [j for j, c in enumerate(small_cams) if frustum_intersects_aabb(c, nd.box, far)]
            assert sorted(nd.visible_cams) == expect

    def test_invisible_leaves_have_no_warp(self, ring_tree):
        for i in ring_tree.leaves():
            nd = ring_tree.nodes[i]
            if not nd.visible_cams:
                assert nd.warp_id is None and not nd.selected_cams
            else:
                assert nd.warp_id is not None and 1 <= len(nd.selected_cams) <= ring_tree.n_c

    def test_selected_subset_of_visible(self, ring_tree):
        for i in ring_tree.warped_leaves():
            nd = ring_tree.nodes[i]
            assert set(nd.selected_cams) <= set(nd.visible_cams)

    def test_warp_ids_sequential(self, ring_tree):
        ids = [ring_tree.nodes[i].warp_id for i in ring_tree.warped_leaves()]
        assert ids == list(range(len(ids)))

    def test_deterministic(self, small_cams):
        a = build_octree(small_cams, max_depth=6)
        b = build_octree(small_cams, max_depth=6)
        assert dump_octree(a) == dump_octree(b)

    def test_camera_at_node_center_terminates(self):
        tree = build_octree([unit_cam(center=(0.0, 0.0, 0.0))], max_depth=4)
        assert max(nd.depth for nd in tree.nodes) == 4


class TestLocate:
    def test_root_center(self, ring_tree):
        c = ring_tree.root_box.center
        leaf = locate_leaf(ring_tree, c)
        assert leaf is not None
        assert ring_tree.nodes[leaf].box.contains(c, closed=False)

    def test_outside_root(self, ring_tree):
        assert locate_leaf(ring_tree, ring_tree.root_box.max + 1.0) is None
        assert locate_leaf(ring_tree, ring_tree.root_box.max) is None  # half-open

    def test_agrees_with_linear_scan(self, ring_tree):
        rng = np.random.default_rng(3)
        rb = ring_tree.root_box
        # half the points near the cameras where leaves are small
        pts = np.concatenate([
            rb.min + rng.random((50_000, 3)) * rb.extent,
            rng.normal(scale=6.0, size=(50_000, 3)),
        ])
        np.testing.assert_array_equal(locate_leaves(ring_tree, pts), brute_leaf(ring_tree, pts))

    def test_tiles_root_exactly(self, ring_tree):
        rng = np.random.default_rng(4)
        pts = rng.normal(scale=8.0, size=(100_000, 3))
        counts = np.zeros(len(pts), dtype=int)
        for i in ring_tree.leaves():
            nd = ring_tree.nodes[i]
            counts += np.all((pts >= nd.center - nd.side / 2) & (pts < nd.center + nd.side / 2), axis=1)
        assert np.all(counts == 1)


class TestFacePairs:
    def test_single_leaf_tree(self):
        tree = Octree([OctreeNode(center=np.zeros(3), side=1.0, depth=0, warp_id=0)])
        assert leaf_face_pairs(tree) == []

    def test_split_once_has_12_pairs(self):
        pairs = leaf_face_pairs(split_once_tree())
        assert len(pairs) == 12
        for a, b, face in pairs:
            assert np.count_nonzero(face.extent == 0) == 1
            assert np.prod(np.sort(face.extent)[1:]) == pytest.approx(1.0)

    def test_unwarped_leaves_excluded(self):
        assert leaf_face_pairs(split_once_tree(warped=False)) == []

    def test_faces_lie_on_both_boxes(self, ring_tree):
        pairs = leaf_face_pairs(ring_tree)
        assert pairs
        for a, b, face in pairs[:500]:
            assert a < b
            ba, bb = ring_tree.nodes[a].box, ring_tree.nodes[b].box
            for box in (ba, bb):
                assert np.all(face.min >= box.min - 1e-9) and np.all(face.max <= box.max + 1e-9)
            axis = int(np.flatnonzero(face.extent == 0)[0])
            plane = face.min[axis]
            tol = 1e-9 * ring_tree.root_side
            assert min(abs(plane - ba.min[axis]), abs(plane - ba.max[axis])) <= tol
            assert min(abs(plane - bb.min[axis]), abs(plane - bb.max[axis])) <= tol

    def test_all_adjacent_pairs_found(self, ring_tree):
        # oracle: probe just across the middle of every face of every warped leaf
        found = {(a, b) for a, b, _ in leaf_face_pairs(ring_tree)}
        expect = set()
        for i in ring_tree.warped_leaves():
            nd = ring_tree.nodes[i]
            for axis in range(3):
                for s in (-1, 1):
                    p = nd.center.copy()
                    p[axis] += s * (nd.side / 2 + 1e-4 * nd.side)
                    j = locate_leaf(ring_tree, p)
                    if j is not None and ring_tree.nodes[j].warp_id is not None:
                        expect.add((min(i, j), max(i, j)))
        assert expect <= found


class TestSerialization:
    def test_round_trip_bytes(self, ring_tree):
        data = dump_octree(ring_tree)
        assert dump_octree(load_octree(data)) == data

    def test_single_node_document(self):
        tree = build_octree([Camera(np.eye(3), np.zeros(3), 1, 1, 0, 0, 2, 2)], max_depth=0)
        doc = json.loads(dump_octree(tree))
        assert len(doc["nodes"]) == 1

    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 5), depth=st.integers(0, 4))
    def test_random_trees_round_trip(self, seed, n, depth):
        rng = np.random.default_rng(seed)
        cams = [Camera.look_at(rng.normal(size=3) * 2, rng.normal(size=3) * 0.1 + [0, 0, 5],
                               fx=8, fy=8, cx=4, cy=4, width=8, height=8) for _ in range(n)]
        tree = build_octree(cams, max_depth=depth)
        back = load_octree(dump_octree(tree))
        assert len(back.nodes) == len(tree.nodes)
        for a, b in zip(tree.nodes, back.nodes):
            np.testing.assert_array_equal(a.center, b.center)
            assert (a.side, a.depth, a.children, a.visible_cams, a.selected_cams, a.warp_id, a.hash_params) == (
                b.side, b.depth, b.children, b.visible_cams, b.selected_cams, b.warp_id, b.hash_params)

    def test_leaf_ply(self, ring_tree, tmp_path):
        write_leaf_ply(ring_tree, tmp_path / "leaves.ply")
        lines = (tmp_path / "leaves.ply").read_text().splitlines()
        n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
        assert n == len(ring_tree.leaves())
        assert len(lines) == lines.index("end_header") + 1 + n


class TestProperties:
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 6))
    def test_leaf_rule_holds(self, seed, n):
        rng = np.random.default_rng(seed)
        cams = [Camera.look_at(rng.normal(size=3), [0.0, 0.0, 4.0], fx=8, fy=8, cx=4, cy=4, width=8, height=8)
                for _ in range(n)]
        tree = build_octree(cams, max_depth=5)
        centers = np.stack([c.center for c in cams])
        for i in tree.leaves():
            nd = tree.nodes[i]
            if nd.visible_cams and nd.depth < tree.max_depth:
                assert np.linalg.norm(centers[nd.visible_cams] - nd.center, axis=1).min() > tree.lam * nd.side
