"""Route planner checks against path oracles built from raw branch data.

The oracle adjacency is assembled straight from Branch fields (chain edges
plus zero-length attach hops), so agreement with plan() exercises the
parent-pointer walk end to end. On a tree the path is unique, which lets the
tests demand exact equality, including bitwise-equal arc lengths, because all
implementations fold the same segment norms in route order.
"""

from collections import deque

import numpy as np
import pytest

from vesselnav.planning import (
    AddressError,
    OffPathError,
    address_depth,
    child_addresses,
    dijkstra_route_length,
    nearest_on_route,
    on_path,
    parent_address,
    plan,
    progress,
    within_route_corridor,
)
from vesselnav.vessel_model import (
    Branch,
    CenterlinePoint,
    PhantomSpec,
    VesselTree,
    generate_phantom,
    validate_tree,
)


def _branch(bid, positions, radius=1.5, parent=None, attach=None):
    pts = [CenterlinePoint(p, radius, i) for i, p in enumerate(positions)]
    return Branch(bid, pts, parent, attach, [])


def y_tree():
    """Root along +x with one child at index 1 (+y) and one at index 3 (+z)."""
    root = _branch(0, [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)])
    left = _branch(1, [(1, 0, 0), (1, 1, 0), (1, 2, 0)], parent=0, attach=1)
    right = _branch(2, [(3, 0, 0), (3, 0, 1)], parent=0, attach=3)
    root.child_links = [1, 2]
    tree = VesselTree({0: root, 1: left, 2: right}, root=0)
    validate_tree(tree)
    return tree


def oracle_adjacency(tree):
    adj = {}
    for bid, br in tree.branches.items():
        for i in range(len(br.points)):
            adj.setdefault((bid, i), [])
        for i in range(len(br.points) - 1):
            adj[(bid, i)].append((bid, i + 1))
            adj[(bid, i + 1)].append((bid, i))
    for bid, br in tree.branches.items():
        if br.parent_link is not None:
            a, b = (bid, 0), (br.parent_link, br.attach_index)
            adj[a].append(b)
            adj[b].append(a)
    return adj


def oracle_path(tree, start, dest):
    """Unique simple path by breadth-first search over the raw adjacency."""
    adj = oracle_adjacency(tree)
    prev = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == dest:
            break
        for nb in adj[node]:
            if nb not in prev:
                prev[nb] = node
                queue.append(nb)
    path = [dest]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return path[::-1]


def oracle_root_path(tree, addr):
    """Address chain from addr up to the root tip, via raw branch fields."""
    chain = [addr]
    bid, idx = addr
    while True:
        if idx > 0:
            idx -= 1
        else:
            br = tree.branches[bid]
            if br.parent_link is None:
                return chain
            bid, idx = br.parent_link, br.attach_index
        chain.append((bid, idx))


def fold_length(tree, path):
    total = 0.0
    for a, b in zip(path, path[1:]):
        total += float(np.linalg.norm(tree.position(b) - tree.position(a)))
    return total


class TestAddressing:
    def test_parent_steps(self):
        tree = y_tree()
        assert parent_address(tree, (0, 0)) is None
        assert parent_address(tree, (0, 2)) == (0, 1)
        assert parent_address(tree, (1, 0)) == (0, 1)
        assert parent_address(tree, (2, 0)) == (0, 3)

    def test_children_continuation_first(self):
        tree = y_tree()
        assert child_addresses(tree, (0, 1)) == [(0, 2), (1, 0)]
        assert child_addresses(tree, (0, 3)) == [(2, 0)]
        assert child_addresses(tree, (1, 2)) == []

    def test_depth_counts_parent_steps(self):
        tree = y_tree()
        for addr in [(0, 0), (0, 3), (1, 0), (1, 2), (2, 1)]:
            assert address_depth(tree, addr) == len(oracle_root_path(tree, addr)) - 1

    def test_bad_addresses_rejected(self):
        tree = y_tree()
        for addr in [(9, 0), (0, 4), (0, -1), (1, 3)]:
            with pytest.raises(AddressError):
                plan(tree, addr, (0, 0))
            with pytest.raises(AddressError):
                plan(tree, (0, 0), addr)


class TestPlanHandTree:
    def test_route_across_junctions(self):
        tree = y_tree()
        route = plan(tree, (1, 2), (2, 1))
        assert route.addresses == (
            (1, 2), (1, 1), (1, 0), (0, 1), (0, 2), (0, 3), (2, 0), (2, 1),
        )
        # Unit-spaced points, two zero-length attach hops: 5 moving segments.
        assert route.length_mm == pytest.approx(5.0, abs=1e-12)
        assert route.start == (1, 2) and route.dest == (2, 1)
        assert len(route) == 8

    def test_attach_hop_is_zero_length(self):
        tree = y_tree()
        route = plan(tree, (0, 1), (1, 0))
        assert route.addresses == ((0, 1), (1, 0))
        assert route.length_mm == 0.0

    def test_single_point_route(self):
        tree = y_tree()
        route = plan(tree, (1, 1), (1, 1))
        assert route.addresses == ((1, 1),)
        assert route.length_mm == 0.0
        assert route.visited == 0


class TestPlanOracle:
    def test_matches_bfs_and_dijkstra_on_random_trees(self):
        rng = np.random.default_rng(7)
        for trial in range(30):
            tree = generate_phantom(PhantomSpec(), seed=100 + trial)
            _, addresses = tree.flat_points()
            for _ in range(8):
                start, dest = (addresses[rng.integers(len(addresses))] for _ in range(2))
                route = plan(tree, start, dest)
                expect = oracle_path(tree, start, dest)
                assert route.addresses == tuple(expect)
                # Same fold order over the same floats: exact, not approx.
                assert route.length_mm == fold_length(tree, expect)
                assert route.length_mm == dijkstra_route_length(tree, start, dest)

    def test_visited_counter_identity(self):
        rng = np.random.default_rng(8)
        for trial in range(20):
            tree = generate_phantom(PhantomSpec(), seed=300 + trial)
            _, addresses = tree.flat_points()
            for _ in range(8):
                start, dest = (addresses[rng.integers(len(addresses))] for _ in range(2))
                route = plan(tree, start, dest)
                up_s = oracle_root_path(tree, start)
                up_d = oracle_root_path(tree, dest)
                shared = 0
                while (
                    shared < min(len(up_s), len(up_d))
                    and up_s[len(up_s) - 1 - shared] == up_d[len(up_d) - 1 - shared]
                ):
                    shared += 1
                lca_depth = shared - 1
                da, db = len(up_s) - 1, len(up_d) - 1
                assert route.visited == da + db - 2 * lca_depth
                assert route.visited <= da + db


class TestRouteQueries:
    def test_progress_and_membership(self):
        tree = y_tree()
        route = plan(tree, (1, 2), (2, 1))
        for i, addr in enumerate(route.addresses):
            assert progress(route, addr) == i
            assert on_path(route, addr)
        assert not on_path(route, (0, 0))
        with pytest.raises(OffPathError):
            progress(route, (0, 0))

    def test_corridor_uses_local_radius(self):
        tree = y_tree()
        route = plan(tree, (0, 0), (0, 3))
        anchor = tree.position((0, 2))
        radius = tree.radius((0, 2))
        inside = anchor + np.array([0.0, 0.4 * radius, 0.0])
        outside = anchor + np.array([0.0, radius + 0.5, 0.0])
        i, d = nearest_on_route(tree, route, inside)
        assert route.addresses[i] == (0, 2)
        assert d == pytest.approx(0.4 * radius)
        assert within_route_corridor(tree, route, inside)
        assert not within_route_corridor(tree, route, outside)
        assert within_route_corridor(tree, route, outside, slack_mm=0.6)
