"""Route planning over a vessel tree addressed by (branch id, point index).

A tree has exactly one simple path between two addresses, so planning walks
parent pointers: lift both endpoints to equal depth, ascend in lockstep to the
common ancestor, and splice the two half-paths. Branch attachments are
zero-length hops between the coincident addresses (child, 0) and
(parent, attach index).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .vessel_model import VesselTree

Address = tuple[int, int]


class AddressError(KeyError):
    """Address does not exist in the tree."""


class OffPathError(RuntimeError):
    """Queried position is not on the planned route."""


@dataclass(frozen=True)
class RoutePlan:
    addresses: tuple[Address, ...]
    length_mm: float
    # Parent steps taken while finding the common ancestor; each step enters
    # one node, so this is bounded by depth(start) + depth(dest).
    visited: int = 0

    def __len__(self) -> int:
        return len(self.addresses)

    @property
    def start(self) -> Address:
        return self.addresses[0]

    @property
    def dest(self) -> Address:
        return self.addresses[-1]


def _check_address(tree: VesselTree, addr: Address) -> Address:
    bid, idx = addr
    branch = tree.branches.get(bid)
    if branch is None or not 0 <= idx < len(branch.points):
        raise AddressError(f"address {addr!r} not in tree")
    return (int(bid), int(idx))


def parent_address(tree: VesselTree, addr: Address) -> Address | None:
    """One step toward the root; None at the root's first point."""
    bid, idx = addr
    if idx > 0:
        return (bid, idx - 1)
    branch = tree.branches[bid]
    if branch.parent_link is None:
        return None
    return (branch.parent_link, branch.attach_index)


def child_addresses(tree: VesselTree, addr: Address) -> list[Address]:
    """Addresses one step away from the root, same-branch continuation first."""
    bid, idx = addr
    branch = tree.branches[bid]
    out: list[Address] = []
    if idx + 1 < len(branch.points):
        out.append((bid, idx + 1))
    for cid in branch.child_links:
        if tree.branches[cid].attach_index == idx:
            out.append((cid, 0))
    return out


def address_depth(tree: VesselTree, addr: Address) -> int:
    """Number of parent steps from addr to the root's first point."""
    bid, idx = addr
    depth = idx
    branch = tree.branches[bid]
    while branch.parent_link is not None:
        depth += branch.attach_index + 1
        branch = tree.branches[branch.parent_link]
    return depth


def plan(tree: VesselTree, start: Address, dest: Address) -> RoutePlan:
    """Unique tree route from start to dest, inclusive of both.

    Runs in O(route length) using parent pointers only: both endpoints climb
    to the depth of the shallower one, then climb together until they meet.
    """
    start = _check_address(tree, start)
    dest = _check_address(tree, dest)
    da, db = address_depth(tree, start), address_depth(tree, dest)
    up_start: list[Address] = [start]
    up_dest: list[Address] = [dest]
    a, b = start, dest
    visited = 0
    for _ in range(da - db):
        a = parent_address(tree, a)
        up_start.append(a)
        visited += 1
    for _ in range(db - da):
        b = parent_address(tree, b)
        up_dest.append(b)
        visited += 1
    while a != b:
        a = parent_address(tree, a)
        b = parent_address(tree, b)
        up_start.append(a)
        up_dest.append(b)
        visited += 2
    route = up_start + up_dest[-2::-1]
    length = 0.0
    prev = route[0]
    for addr in route[1:]:
        length += float(np.linalg.norm(tree.position(addr) - tree.position(prev)))
        prev = addr
    return RoutePlan(tuple(route), length, visited)


def dijkstra_route_length(tree: VesselTree, start: Address, dest: Address) -> float:
    """Shortest-path length by Dijkstra over the address graph.

    On a tree this must agree with plan() exactly; it exists as the reference
    the fast planner is checked against.
    """
    start = _check_address(tree, start)
    dest = _check_address(tree, dest)
    dist: dict[Address, float] = {start: 0.0}
    done: set[Address] = set()
    heap: list[tuple[float, Address]] = [(0.0, start)]
    while heap:
        d, node = heapq.heappop(heap)
        if node in done:
            continue
        if node == dest:
            return d
        done.add(node)
        neighbors = child_addresses(tree, node)
        up = parent_address(tree, node)
        if up is not None:
            neighbors.append(up)
        pos = tree.position(node)
        for nb in neighbors:
            if nb in done:
                continue
            nd = d + float(np.linalg.norm(tree.position(nb) - pos))
            if nd < dist.get(nb, np.inf):
                dist[nb] = nd
                heapq.heappush(heap, (nd, nb))
    raise AddressError(f"no route from {start!r} to {dest!r}")


def progress(route: RoutePlan, addr: Address) -> int:
    """Index of addr along the route; raises OffPathError when absent."""
    try:
        return route.addresses.index(tuple(addr))
    except ValueError:
        raise OffPathError(f"{addr!r} is not on the route") from None


def on_path(route: RoutePlan, addr: Address) -> bool:
    return tuple(addr) in route.addresses


def nearest_on_route(tree: VesselTree, route: RoutePlan, position3: np.ndarray) -> tuple[int, float]:
    """Route index and distance of the route point nearest a 3D position."""
    pos = np.asarray(position3, dtype=float).reshape(3)
    pts = np.array([tree.position(a) for a in route.addresses])
    d = np.linalg.norm(pts - pos, axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def within_route_corridor(
    tree: VesselTree, route: RoutePlan, position3: np.ndarray, slack_mm: float = 0.0
) -> bool:
    """Spatial on-path test: inside the lumen of the nearest route point."""
    i, d = nearest_on_route(tree, route, position3)
    return d <= tree.radius(route.addresses[i]) + slack_mm
