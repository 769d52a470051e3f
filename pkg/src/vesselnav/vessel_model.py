"""Vessel centerline trees: phantom generation, resampling, serialization.

A tree is a set of branches with parent links. A child branch attaches at a
specific point index on its parent and shares that point, so branch
transitions contribute zero arc length. All coordinates are millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

FORMAT_HEADER = "VTREE 1"


class TreeFormatError(ValueError):
    """Malformed serialized tree. ``line`` holds the 1-based offending line."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TreeStructureError(ValueError):
    """Tree violates a structural invariant."""


@dataclass(frozen=True)
class CenterlinePoint:
    """One centerline sample: position (3,), lumen radius, index along branch."""

    position: np.ndarray
    radius: float
    arc_index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if not self.radius > 0.0:
            raise TreeStructureError(f"radius must be positive, got {self.radius}")


@dataclass
class Branch:
    """A polyline of centerline points with tree links.

    ``parent_link`` is None for the root. ``attach_index`` is the point index
    on the parent where this branch departs; the branch's first point equals
    that parent point.
    """

    branch_id: int
    points: list[CenterlinePoint]
    parent_link: int | None = None
    attach_index: int | None = None
    child_links: list[int] = field(default_factory=list)

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.points])

    def radii(self) -> np.ndarray:
        return np.array([p.radius for p in self.points])

    def arc_length(self) -> float:
        pos = self.positions()
        return float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))


class VesselTree:
    """Branches keyed by id, with a single root and acyclic parent links."""

    def __init__(self, branches: dict[int, Branch], root: int):
        self.branches = branches
        self.root = root
        self._kdtree: cKDTree | None = None
        self._flat: tuple[np.ndarray, list[tuple[int, int]]] | None = None
        validate_tree(self)

    def position(self, address: tuple[int, int]) -> np.ndarray:
        b, i = address
        return self.branches[b].points[i].position

    def radius(self, address: tuple[int, int]) -> float:
        b, i = address
        return self.branches[b].points[i].radius

    def has_address(self, address: tuple[int, int]) -> bool:
        b, i = address
        return b in self.branches and 0 <= i < len(self.branches[b].points)

    def depth(self, branch_id: int) -> int:
        d = 0
        b = self.branches[branch_id]
        while b.parent_link is not None:
            b = self.branches[b.parent_link]
            d += 1
        return d

    def children_at(self, branch_id: int, arc_index: int) -> list[int]:
        out = []
        for cid in self.branches[branch_id].child_links:
            if self.branches[cid].attach_index == arc_index:
                out.append(cid)
        return out

    def flat_points(self) -> tuple[np.ndarray, list[tuple[int, int]]]:
        """All centerline positions stacked with their (branch, index) addresses."""
        if self._flat is None:
            addrs: list[tuple[int, int]] = []
            rows = []
            for bid in sorted(self.branches):
                br = self.branches[bid]
                for pt in br.points:
                    rows.append(pt.position)
                    addrs.append((bid, pt.arc_index))
            self._flat = (np.array(rows), addrs)
        return self._flat

    def point_index(self) -> cKDTree:
        if self._kdtree is None:
            self._kdtree = cKDTree(self.flat_points()[0])
        return self._kdtree

    def total_arc_length(self) -> float:
        return float(sum(b.arc_length() for b in self.branches.values()))


def validate_tree(tree: VesselTree) -> None:
    """Checks the structural invariants; raises TreeStructureError on violation."""
    branches = tree.branches
    if tree.root not in branches:
        raise TreeStructureError("root id missing from branch map")
    if branches[tree.root].parent_link is not None:
        raise TreeStructureError("root branch must have no parent")
    seen: set[int] = set()
    stack = [tree.root]
    while stack:
        bid = stack.pop()
        if bid in seen:
            raise TreeStructureError(f"branch {bid} reached twice; links form a cycle")
        seen.add(bid)
        br = branches[bid]
        if br.branch_id != bid:
            raise TreeStructureError(f"branch {bid} has mismatched id {br.branch_id}")
        if len(br.points) < 2:
            raise TreeStructureError(f"branch {bid} has fewer than two points")
        for k, pt in enumerate(br.points):
            if pt.arc_index != k:
                raise TreeStructureError(f"branch {bid} point {k} has arc_index {pt.arc_index}")
        for cid in br.child_links:
            if cid not in branches:
                raise TreeStructureError(f"branch {bid} links to missing child {cid}")
            child = branches[cid]
            if child.parent_link != bid:
                raise TreeStructureError(f"child {cid} does not link back to parent {bid}")
            if child.attach_index is None or not 0 <= child.attach_index < len(br.points):
                raise TreeStructureError(f"child {cid} attach index out of range")
            if not np.array_equal(child.points[0].position, br.points[child.attach_index].position):
                raise TreeStructureError(f"child {cid} first point is not the parent attach point")
            stack.append(cid)
    if seen != set(branches):
        orphans = sorted(set(branches) - seen)
        raise TreeStructureError(f"branches {orphans} are not reachable from the root")


# ---------------------------------------------------------------------------
# phantom generation


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters for the synthetic tree generator.

    ``depth`` counts levels including the root. ``branching`` children are
    attached at the end of every branch above the deepest level.
    """

    depth: int = 4
    branching: int = 2
    segment_length: tuple[float, float] = (22.0, 34.0)
    root_radius: float = 2.6
    radius_decay: float = 0.72
    min_radius: float = 0.9
    curvature_deg_per_mm: tuple[float, float] = (0.4, 1.6)
    branch_angle_deg: tuple[float, float] = (28.0, 52.0)
    step_mm: float = 1.0
    slab_flatten: float = 0.35

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.branching < 0:
            raise ValueError("branching must be >= 0")
        lo, hi = self.segment_length
        if not (0.0 < lo <= hi):
            raise ValueError("segment_length range must be positive and ordered")
        if not (0.0 < self.min_radius <= self.root_radius):
            raise ValueError("radii must satisfy 0 < min_radius <= root_radius")
        if not (0.0 < self.radius_decay <= 1.0):
            raise ValueError("radius_decay must lie in (0, 1]")
        if not self.step_mm > 0.0:
            raise ValueError("step_mm must be positive")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _perp_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = _unit(np.cross(d, ref))
    return u, np.cross(d, u)


def _rotate_about(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = _unit(axis)
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * np.dot(axis, v) * (1.0 - c)


def generate_phantom(spec: PhantomSpec, seed: int) -> VesselTree:
    """Deterministic synthetic vascular tree.

    The same (spec, seed) always yields the same tree. Branch ids are assigned
    in breadth-first creation order with the root as 0.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    branches: dict[int, Branch] = {}
    next_id = 0

    def grow(start: np.ndarray, direction: np.ndarray, radius: float, level: int) -> Branch:
        nonlocal next_id
        bid = next_id
        next_id += 1
        length = float(rng.uniform(*spec.segment_length))
        curv = float(np.deg2rad(rng.uniform(*spec.curvature_deg_per_mm)))
        u, w = _perp_basis(direction)
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        bend_axis = _unit(np.cos(phase) * u + np.sin(phase) * w)
        n_steps = max(2, int(np.ceil(length / spec.step_mm)))
        step = length / n_steps
        tip_radius = max(spec.min_radius, radius * 0.85)
        pos = start.copy()
        d = direction.copy()
        pts = [CenterlinePoint(pos.copy(), radius, 0)]
        for k in range(1, n_steps + 1):
            d = _unit(_rotate_about(d, bend_axis, curv * step))
            pos = pos + d * step
            r = radius + (tip_radius - radius) * (k / n_steps)
            pts.append(CenterlinePoint(pos.copy(), r, k))
        br = Branch(bid, pts)
        branches[bid] = br
        return br

    root_dir = _unit(np.array([0.15, 1.0, 0.1]))
    root = grow(np.zeros(3), root_dir, spec.root_radius, 0)
    frontier = [(root, 1)]
    while frontier:
        parent, level = frontier.pop(0)
        if level >= spec.depth or spec.branching == 0:
            continue
        end = parent.points[-1].position
        end_dir = _unit(end - parent.points[-2].position)
        u, w = _perp_basis(end_dir)
        base_azimuth = float(rng.uniform(0.0, 2.0 * np.pi))
        child_radius = max(spec.min_radius, parent.points[-1].radius * spec.radius_decay)
        for c in range(spec.branching):
            polar = float(np.deg2rad(rng.uniform(*spec.branch_angle_deg)))
            azimuth = base_azimuth + 2.0 * np.pi * c / spec.branching + float(rng.uniform(-0.25, 0.25))
            lateral = np.cos(azimuth) * u + np.sin(azimuth) * w
            d = _unit(np.cos(polar) * end_dir + np.sin(polar) * lateral)
            # Squash out-of-slab growth so the tree stays inside the field of view.
            d = _unit(d * np.array([1.0, 1.0, spec.slab_flatten]))
            child = grow(end, d, child_radius, level)
            child.parent_link = parent.branch_id
            child.attach_index = len(parent.points) - 1
            parent.child_links.append(child.branch_id)
            frontier.append((child, level + 1))
    return VesselTree(branches, root.branch_id)


# ---------------------------------------------------------------------------
# resampling


def resample_centerlines(tree: VesselTree, spacing: float) -> VesselTree:
    """Subdivide every gap longer than ``spacing``.

    Original vertices are kept, so endpoints, attach points, and total arc
    length are preserved exactly; new points are linearly interpolated on the
    existing polyline. Zero-length gaps are dropped.
    """
    if not spacing > 0.0:
        raise ValueError("spacing must be positive")
    new_branches: dict[int, Branch] = {}
    index_maps: dict[int, dict[int, int]] = {}
    for bid, br in tree.branches.items():
        pos = br.positions()
        rad = br.radii()
        out_pos: list[np.ndarray] = [pos[0]]
        out_rad: list[float] = [float(rad[0])]
        imap = {0: 0}
        for k in range(1, len(pos)):
            gap = float(np.linalg.norm(pos[k] - pos[k - 1]))
            if gap <= 0.0:
                imap[k] = len(out_pos) - 1
                continue
            n_seg = max(1, int(np.ceil(gap / spacing - 1e-9)))
            for j in range(1, n_seg + 1):
                t = j / n_seg
                out_pos.append(pos[k - 1] + (pos[k] - pos[k - 1]) * t)
                out_rad.append(float(rad[k - 1] + (rad[k] - rad[k - 1]) * t))
            imap[k] = len(out_pos) - 1
        pts = [CenterlinePoint(p, r, i) for i, (p, r) in enumerate(zip(out_pos, out_rad))]
        new_branches[bid] = Branch(bid, pts, br.parent_link, None, list(br.child_links))
        index_maps[bid] = imap
    for bid, br in new_branches.items():
        old = tree.branches[bid]
        if old.parent_link is not None:
            br.attach_index = index_maps[old.parent_link][old.attach_index]
    return VesselTree(new_branches, tree.root)


# ---------------------------------------------------------------------------
# serialization


def serialize_tree(tree: VesselTree) -> bytes:
    """Text serialization; identical trees produce identical bytes."""
    lines = [FORMAT_HEADER, f"root {tree.root}"]
    for bid in sorted(tree.branches):
        br = tree.branches[bid]
        parent = "-" if br.parent_link is None else str(br.parent_link)
        attach = "-" if br.attach_index is None else str(br.attach_index)
        children = ",".join(str(c) for c in br.child_links) or "-"
        lines.append(f"branch {bid} parent {parent} attach {attach} children {children}")
        for pt in br.points:
            x, y, z = (repr(float(v)) for v in pt.position)
            lines.append(f"point {x} {y} {z} {repr(float(pt.radius))}")
        lines.append("end")
    lines.append("endtree")
    return ("\n".join(lines) + "\n").encode("utf-8")


def deserialize_tree(data: bytes) -> VesselTree:
    """Inverse of serialize_tree. Raises TreeFormatError with a line offset."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TreeFormatError(f"not valid utf-8: {exc}", 1) from exc
    lines = text.splitlines()
    n = 0

    def take() -> str:
        nonlocal n
        if n >= len(lines):
            raise TreeFormatError("unexpected end of stream", len(lines) + 1)
        n += 1
        return lines[n - 1].strip()

    if take() != FORMAT_HEADER:
        raise TreeFormatError(f"expected header {FORMAT_HEADER!r}", 1)
    root_line = take()
    if not root_line.startswith("root "):
        raise TreeFormatError("expected 'root <id>'", n)
    try:
        root = int(root_line.split()[1])
    except (IndexError, ValueError) as exc:
        raise TreeFormatError("bad root id", n) from exc

    branches: dict[int, Branch] = {}
    while True:
        line = take()
        if line == "endtree":
            break
        parts = line.split()
        if len(parts) != 8 or parts[0] != "branch" or parts[2] != "parent" or parts[4] != "attach" or parts[6] != "children":
            raise TreeFormatError(f"expected branch header, got {line!r}", n)
        try:
            bid = int(parts[1])
            parent = None if parts[3] == "-" else int(parts[3])
            attach = None if parts[5] == "-" else int(parts[5])
            children = [] if parts[7] == "-" else [int(c) for c in parts[7].split(",")]
        except ValueError as exc:
            raise TreeFormatError(f"bad branch header field: {exc}", n) from exc
        if bid in branches:
            raise TreeFormatError(f"duplicate branch id {bid}", n)
        pts: list[CenterlinePoint] = []
        while True:
            line = take()
            if line == "end":
                break
            fields = line.split()
            if len(fields) != 5 or fields[0] != "point":
                raise TreeFormatError(f"expected point or end, got {line!r}", n)
            try:
                x, y, z, r = (float(v) for v in fields[1:])
            except ValueError as exc:
                raise TreeFormatError(f"bad point value: {exc}", n) from exc
            try:
                pts.append(CenterlinePoint(np.array([x, y, z]), r, len(pts)))
            except TreeStructureError as exc:
                raise TreeFormatError(str(exc), n) from exc
        branches[bid] = Branch(bid, pts, parent, attach, children)
    if n < len(lines) and any(s.strip() for s in lines[n:]):
        raise TreeFormatError("trailing content after endtree", n + 1)
    try:
        return VesselTree(branches, root)
    except (TreeStructureError, KeyError) as exc:
        raise TreeFormatError(f"inconsistent tree: {exc}", n) from exc
