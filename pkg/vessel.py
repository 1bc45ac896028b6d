"""
Vascular anatomy module: centerline branch graphs with per-point radii.

Provides:
- VesselTree construction, validation and resampling
- Geometric queries (nearest centerline point, lumen containment, arc sampling)
- Along-centerline path lengths over the branch graph
- Scale/rotation augmentation
- Synthetic aortic-arch anatomy generation
- Anatomy document I/O ("endonav-anatomy/1")
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)

ANATOMY_FORMAT = "endonav-anatomy/1"
MAX_POINT_SPACING = 2.0
SCALE_RANGE = (0.7, 1.3)
MAX_ROTATION = math.radians(30.0)

# Anterior axis; the fluoroscopy projection drops it.
DEPTH_AXIS = 2


class AnatomyError(ValueError):
    """Anatomy document or branch data violates the schema."""


class TopologyError(AnatomyError):
    """Branch graph is not a single connected tree."""


class ArchType(str, Enum):
    TYPE_I = "TypeI"
    TYPE_II = "TypeII"


@dataclass(frozen=True)
class CenterlinePoint:
    position: np.ndarray
    radius: float
    arc: float


@dataclass(frozen=True)
class Attachment:
    """Where a child branch leaves its parent."""
    branch: str
    s: float


@dataclass(frozen=True)
class ArcPosition:
    branch: str
    s: float


@dataclass(frozen=True)
class Region:
    """Arc interval on one branch (task start/target areas)."""
    branch: str
    s_min: float
    s_max: float

    @classmethod
    def coerce(cls, region: Union['Region', Sequence]) -> 'Region':
        if isinstance(region, Region):
            return region
        branch, s_min, s_max = region
        return cls(str(branch), float(s_min), float(s_max))


class LumenPoint(NamedTuple):
    arc: ArcPosition
    distance: float
    tangent: np.ndarray
    radius: float


class LumenContact(NamedTuple):
    """Result of a lumen query against the union of vessel tubes."""
    arc: ArcPosition
    clearance: float
    normal: np.ndarray
    radius: float
    foot: np.ndarray


def orthonormal_basis(t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Two unit vectors perpendicular to t and to each other."""
    t = t / np.linalg.norm(t)
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(t)))] = 1.0
    u = ref - np.dot(ref, t) * t
    u /= np.linalg.norm(u)
    v = np.cross(t, u)
    return u, v


def _arc_lengths(positions: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _resample(positions: np.ndarray, radii: np.ndarray,
              max_spacing: float) -> Tuple[np.ndarray, np.ndarray]:
    """Subdivide segments longer than max_spacing; original vertices are kept exactly."""
    out_p = [positions[0]]
    out_r = [radii[0]]
    for i in range(1, len(positions)):
        seg = positions[i] - positions[i - 1]
        length = float(np.linalg.norm(seg))
        pieces = max(1, math.ceil(length / max_spacing - 1e-12))
        for j in range(1, pieces):
            f = j / pieces
            out_p.append(positions[i - 1] + f * seg)
            out_r.append(radii[i - 1] + f * (radii[i] - radii[i - 1]))
        out_p.append(positions[i])
        out_r.append(radii[i])
    return np.array(out_p, dtype=float), np.array(out_r, dtype=float)


def _map_arc(old_arcs: np.ndarray, new_arcs: np.ndarray, s: float) -> float:
    """Carry an arc coordinate across a vertex-preserving transform."""
    n = len(old_arcs)
    idx = int(np.clip(np.searchsorted(old_arcs, s, side='right') - 1, 0, n - 2))
    span = old_arcs[idx + 1] - old_arcs[idx]
    frac = (s - old_arcs[idx]) / span
    return float(new_arcs[idx] + frac * (new_arcs[idx + 1] - new_arcs[idx]))


class Branch:
    """One centerline polyline. Arrays are read-only after construction."""

    def __init__(self, id: str, positions: np.ndarray, radii: np.ndarray,
                 parent: Optional[Attachment] = None):
        self.id = id
        self.positions = np.array(positions, dtype=float)
        self.radii = np.array(radii, dtype=float)
        self.parent = parent
        self._validate()
        self.arcs = _arc_lengths(self.positions)
        for arr in (self.positions, self.radii, self.arcs):
            arr.setflags(write=False)

    def _validate(self):
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise AnatomyError(f"branch '{self.id}': positions must be an (n, 3) array")
        if len(self.positions) < 2:
            raise AnatomyError(f"branch '{self.id}': needs at least 2 points, got {len(self.positions)}")
        if self.radii.shape != (len(self.positions),):
            raise AnatomyError(f"branch '{self.id}': radii length does not match point count")
        for i, (p, r) in enumerate(zip(self.positions, self.radii)):
            if not np.all(np.isfinite(p)) or not math.isfinite(r):
                raise AnatomyError(f"branch '{self.id}' point {i}: non-finite value")
            if r <= 0:
                raise AnatomyError(f"branch '{self.id}' point {i}: radius must be > 0, got {r}")
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        bad = np.nonzero(steps <= 0)[0]
        if len(bad):
            raise AnatomyError(
                f"branch '{self.id}' point {int(bad[0]) + 1}: duplicate point, arc must strictly increase"
            )

    @property
    def length(self) -> float:
        return float(self.arcs[-1])

    @property
    def points(self) -> List[CenterlinePoint]:
        return [CenterlinePoint(p.copy(), float(r), float(a))
                for p, r, a in zip(self.positions, self.radii, self.arcs)]

    def locate(self, s: float) -> Tuple[int, float]:
        """Segment index and fraction for arc coordinate s (clamped to the branch)."""
        s = min(max(s, 0.0), self.length)
        idx = int(np.clip(np.searchsorted(self.arcs, s, side='right') - 1, 0, len(self.arcs) - 2))
        span = self.arcs[idx + 1] - self.arcs[idx]
        return idx, float((s - self.arcs[idx]) / span)

    def point_at(self, s: float) -> np.ndarray:
        idx, f = self.locate(s)
        return self.positions[idx] + f * (self.positions[idx + 1] - self.positions[idx])

    def radius_at(self, s: float) -> float:
        idx, f = self.locate(s)
        return float(self.radii[idx] + f * (self.radii[idx + 1] - self.radii[idx]))

    def tangent_at(self, s: float) -> np.ndarray:
        idx, _ = self.locate(s)
        seg = self.positions[idx + 1] - self.positions[idx]
        return seg / np.linalg.norm(seg)


class VesselTree:
    """
    Immutable branch graph of centerlines.

    Branches are resampled to MAX_POINT_SPACING on construction. All geometric
    queries (nearest point, lumen containment, path length) go through here.
    """

    def __init__(self, branches: Iterable[Branch], root: Optional[str] = None,
                 arch_type: ArchType = ArchType.TYPE_I,
                 landmarks: Optional[Dict[str, ArcPosition]] = None):
        resampled = []
        for b in branches:
            pos, rad = _resample(b.positions, b.radii, MAX_POINT_SPACING)
            resampled.append(Branch(b.id, pos, rad, b.parent))
        self.branches: Dict[str, Branch] = {}
        for b in resampled:
            if b.id in self.branches:
                raise AnatomyError(f"branch '{b.id}': duplicate branch id")
            self.branches[b.id] = b
        self.arch_type = ArchType(arch_type)
        self.root = self._find_root(root)
        self._check_attachments()
        self.landmarks: Dict[str, ArcPosition] = dict(landmarks or {})
        for name, pos in self.landmarks.items():
            self._check_arc(pos, f"landmark '{name}'")

        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for b in self.branches.values():
            lo = np.minimum(lo, (b.positions - b.radii[:, None]).min(axis=0))
            hi = np.maximum(hi, (b.positions + b.radii[:, None]).max(axis=0))
        self.bounding_box = (lo, hi)

        self._build_segments()
        self._build_graph()

    # ------------------------------------------------------------------
    # Construction helpers
    # ------------------------------------------------------------------

    def _find_root(self, root: Optional[str]) -> str:
        roots = [b.id for b in self.branches.values() if b.parent is None]
        if len(roots) != 1:
            raise TopologyError(f"expected exactly one root branch, found {len(roots)}: {roots}")
        if root is not None and root != roots[0]:
            raise TopologyError(f"declared root '{root}' has a parent; actual root is '{roots[0]}'")
        for b in self.branches.values():
            if b.parent is not None and b.parent.branch not in self.branches:
                raise TopologyError(f"branch '{b.id}': parent '{b.parent.branch}' does not exist")
        reached = {roots[0]}
        children = self.children_map()
        stack = [roots[0]]
        while stack:
            for child in children.get(stack.pop(), []):
                if child not in reached:
                    reached.add(child)
                    stack.append(child)
        missing = sorted(set(self.branches) - reached)
        if missing:
            raise TopologyError(f"branches not connected to root '{roots[0]}': {missing}")
        return roots[0]

    def _check_arc(self, pos: ArcPosition, what: str):
        if pos.branch not in self.branches:
            raise AnatomyError(f"{what}: unknown branch '{pos.branch}'")
        length = self.branches[pos.branch].length
        if not (-1e-9 <= pos.s <= length + 1e-9):
            raise AnatomyError(f"{what}: s={pos.s} outside branch '{pos.branch}' (length {length:.3f})")

    def _check_attachments(self):
        for b in self.branches.values():
            if b.parent is None:
                continue
            parent = self.branches[b.parent.branch]
            self._check_arc(ArcPosition(parent.id, b.parent.s), f"branch '{b.id}' attachment")
            gap = float(np.linalg.norm(b.positions[0] - parent.point_at(b.parent.s)))
            allowed = parent.radius_at(b.parent.s)
            if gap > allowed * (1 + 1e-9) + 1e-9:
                raise AnatomyError(
                    f"branch '{b.id}' point 0: {gap:.3f} mm from parent '{parent.id}' centerline, "
                    f"outside its lumen (radius {allowed:.3f} mm)"
                )

    def _build_segments(self):
        starts, dirs, r0, r1, s0, owner = [], [], [], [], [], []
        self._branch_order = list(self.branches)
        for bi, b in enumerate(self.branches.values()):
            starts.append(b.positions[:-1])
            dirs.append(np.diff(b.positions, axis=0))
            r0.append(b.radii[:-1])
            r1.append(b.radii[1:])
            s0.append(b.arcs[:-1])
            owner.append(np.full(len(b.positions) - 1, bi))
        self._seg_a = np.concatenate(starts)
        self._seg_d = np.concatenate(dirs)
        self._seg_len2 = np.einsum('ij,ij->i', self._seg_d, self._seg_d)
        self._seg_len = np.sqrt(self._seg_len2)
        self._seg_r0 = np.concatenate(r0)
        self._seg_r1 = np.concatenate(r1)
        self._seg_s0 = np.concatenate(s0)
        self._seg_owner = np.concatenate(owner)

    def _build_graph(self):
        """Nodes are branch endpoints and attachment points; edges carry arc length."""
        breaks: Dict[str, set] = {bid: {0.0, b.length} for bid, b in self.branches.items()}
        for b in self.branches.values():
            if b.parent is not None:
                breaks[b.parent.branch].add(float(b.parent.s))
        graph = nx.Graph()
        self._breaks: Dict[str, np.ndarray] = {}
        for bid, values in breaks.items():
            ordered = np.array(sorted(values))
            self._breaks[bid] = ordered
            for s in ordered:
                graph.add_node((bid, float(s)))
            for s_a, s_b in zip(ordered[:-1], ordered[1:]):
                graph.add_edge((bid, float(s_a)), (bid, float(s_b)), weight=float(s_b - s_a))
        for b in self.branches.values():
            if b.parent is not None:
                parent = self.branches[b.parent.branch]
                join = float(np.linalg.norm(b.positions[0] - parent.point_at(b.parent.s)))
                graph.add_edge((b.id, 0.0), (parent.id, float(b.parent.s)), weight=join)
        self.graph = graph
        self._node_dist = dict(nx.all_pairs_dijkstra_path_length(graph, weight='weight'))

    # ------------------------------------------------------------------
    # Structure
    # ------------------------------------------------------------------

    def children_map(self) -> Dict[str, List[str]]:
        children: Dict[str, List[str]] = {}
        for b in self.branches.values():
            if b.parent is not None:
                children.setdefault(b.parent.branch, []).append(b.id)
        return children

    def ancestry(self, branch: str) -> List[str]:
        """Branch ids from the root down to (and including) branch."""
        chain = [branch]
        while self.branches[chain[-1]].parent is not None:
            chain.append(self.branches[chain[-1]].parent.branch)
        return chain[::-1]

    def branch(self, branch_id: str) -> Branch:
        return self.branches[branch_id]

    def point_at(self, pos: ArcPosition) -> np.ndarray:
        return self.branches[pos.branch].point_at(pos.s)

    def all_points(self) -> np.ndarray:
        return np.concatenate([b.positions for b in self.branches.values()])

    # ------------------------------------------------------------------
    # Geometric queries
    # ------------------------------------------------------------------

    def _foot_points(self, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        rel = p - self._seg_a
        t = np.clip(np.einsum('ij,ij->i', rel, self._seg_d) / self._seg_len2, 0.0, 1.0)
        foot = self._seg_a + t[:, None] * self._seg_d
        dist = np.linalg.norm(p - foot, axis=1)
        return t, foot, dist

    def _arc_of(self, i: int, t: float) -> ArcPosition:
        branch = self._branch_order[int(self._seg_owner[i])]
        return ArcPosition(branch, float(self._seg_s0[i] + t * self._seg_len[i]))

    def nearest_lumen_point(self, p: Sequence[float]) -> LumenPoint:
        """Closest point on the piecewise-linear centerlines (Euclidean)."""
        p = np.asarray(p, dtype=float)
        t, _, dist = self._foot_points(p)
        i = int(np.argmin(dist))
        radius = self._seg_r0[i] + t[i] * (self._seg_r1[i] - self._seg_r0[i])
        tangent = self._seg_d[i] / self._seg_len[i]
        return LumenPoint(self._arc_of(i, t[i]), float(dist[i]), tangent, float(radius))

    def lumen_query(self, p: Sequence[float]) -> LumenContact:
        """
        Query the lumen as the union of per-segment tubes.

        Returns the segment with the largest clearance (interpolated radius minus
        distance); clearance >= 0 means p lies inside the lumen.
        """
        p = np.asarray(p, dtype=float)
        t, foot, dist = self._foot_points(p)
        radius = self._seg_r0 + t * (self._seg_r1 - self._seg_r0)
        clearance = radius - dist
        i = int(np.argmax(clearance))
        offset = p - foot[i]
        if dist[i] > 1e-12:
            normal = offset / dist[i]
        else:
            normal, _ = orthonormal_basis(self._seg_d[i])
        return LumenContact(self._arc_of(i, t[i]), float(clearance[i]), normal,
                            float(radius[i]), foot[i].copy())

    def contains(self, p: Sequence[float], margin: float = 0.0) -> bool:
        return self.lumen_query(p).clearance >= margin - 1e-9

    def project_to_branch(self, branch_id: str, p: Sequence[float]) -> ArcPosition:
        p = np.asarray(p, dtype=float)
        bi = self._branch_order.index(branch_id)
        mask = self._seg_owner == bi
        t, _, dist = self._foot_points(p)
        dist = np.where(mask, dist, np.inf)
        i = int(np.argmin(dist))
        return self._arc_of(i, t[i])

    def _bracket(self, pos: ArcPosition) -> List[Tuple[Tuple[str, float], float]]:
        breaks = self._breaks[pos.branch]
        s = min(max(pos.s, 0.0), float(breaks[-1]))
        i = int(np.clip(np.searchsorted(breaks, s, side='right'), 1, len(breaks) - 1))
        lower, upper = float(breaks[i - 1]), float(breaks[i])
        return [((pos.branch, lower), s - lower), ((pos.branch, upper), upper - s)]

    def path_length(self, a: ArcPosition, b: ArcPosition) -> float:
        """Shortest along-centerline distance between two arc positions."""
        best = abs(a.s - b.s) if a.branch == b.branch else math.inf
        for node_a, off_a in self._bracket(a):
            row = self._node_dist[node_a]
            for node_b, off_b in self._bracket(b):
                best = min(best, off_a + row[node_b] + off_b)
        return float(best)

    def sample_point_in_region(self, region: Union[Region, Sequence],
                               rng: np.random.Generator) -> np.ndarray:
        point, _ = self.sample_region(region, rng)
        return point

    def sample_region(self, region: Union[Region, Sequence],
                      rng: np.random.Generator) -> Tuple[np.ndarray, ArcPosition]:
        """Uniform arc coordinate, then a uniform point on the lumen cross-section disc."""
        region = Region.coerce(region)
        if region.branch not in self.branches:
            raise ValueError(f"region branch '{region.branch}' does not exist")
        if region.s_min > region.s_max:
            raise ValueError(f"empty region: s_min {region.s_min} > s_max {region.s_max}")
        b = self.branches[region.branch]
        if region.s_min < -1e-9 or region.s_max > b.length + 1e-9:
            raise ValueError(
                f"region [{region.s_min}, {region.s_max}] outside branch '{b.id}' (length {b.length:.3f})"
            )
        s = float(rng.uniform(region.s_min, region.s_max))
        s = min(max(s, 0.0), b.length)
        center = b.point_at(s)
        u, v = orthonormal_basis(b.tangent_at(s))
        rho = b.radius_at(s) * math.sqrt(rng.random())
        theta = 2.0 * math.pi * rng.random()
        point = center + rho * (math.cos(theta) * u + math.sin(theta) * v)
        return point, ArcPosition(b.id, s)

    # ------------------------------------------------------------------
    # Augmentation
    # ------------------------------------------------------------------

    def apply_augmentation(self, params: 'AugmentParams') -> 'VesselTree':
        params.validate()
        scale = np.asarray(params.scale, dtype=float)
        matrix = params.matrix()
        det = float(np.prod(scale))
        new_branches = []
        new_arcs: Dict[str, np.ndarray] = {}
        for b in self.branches.values():
            pos = b.positions @ matrix.T
            tangents = np.gradient(b.positions, axis=0)
            tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
            stretch = np.linalg.norm(tangents * scale, axis=1)
            radii = b.radii * np.sqrt(det / stretch)
            new_arcs[b.id] = _arc_lengths(pos)
            new_branches.append((b, pos, radii))

        def remap(pos: ArcPosition) -> ArcPosition:
            old = self.branches[pos.branch].arcs
            return ArcPosition(pos.branch, _map_arc(old, new_arcs[pos.branch], pos.s))

        rebuilt = []
        for b, pos, radii in new_branches:
            parent = None
            if b.parent is not None:
                moved = remap(ArcPosition(b.parent.branch, b.parent.s))
                parent = Attachment(moved.branch, moved.s)
            rebuilt.append(Branch(b.id, pos, radii, parent))
        landmarks = {name: remap(p) for name, p in self.landmarks.items()}
        return VesselTree(rebuilt, self.root, self.arch_type, landmarks)


# ----------------------------------------------------------------------
# Augmentation parameters
# ----------------------------------------------------------------------

def rotation_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class AugmentParams:
    scale: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    rot_x: float = 0.0
    rot_y: float = 0.0

    def validate(self):
        lo, hi = SCALE_RANGE
        if len(self.scale) != 3 or any(not (lo <= c <= hi) for c in self.scale):
            raise ValueError(f"augmentation scale {self.scale} outside [{lo}, {hi}]")
        if abs(self.rot_x) > MAX_ROTATION + 1e-12 or abs(self.rot_y) > MAX_ROTATION + 1e-12:
            raise ValueError(f"augmentation rotation ({self.rot_x}, {self.rot_y}) exceeds ±30°")

    def matrix(self) -> np.ndarray:
        return rotation_y(self.rot_y) @ rotation_x(self.rot_x) @ np.diag(self.scale)

    @classmethod
    def sample(cls, rng: np.random.Generator) -> 'AugmentParams':
        scale = rng.uniform(SCALE_RANGE[0], SCALE_RANGE[1], size=3)
        rot = rng.uniform(-MAX_ROTATION, MAX_ROTATION, size=2)
        return cls(tuple(float(c) for c in scale), float(rot[0]), float(rot[1]))

    def to_dict(self) -> Dict[str, Any]:
        return {'scale': list(self.scale), 'rot_x': self.rot_x, 'rot_y': self.rot_y}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AugmentParams':
        return cls(tuple(float(c) for c in data['scale']), float(data['rot_x']), float(data['rot_y']))


def apply_augmentation(tree: VesselTree, params: AugmentParams) -> VesselTree:
    return tree.apply_augmentation(params)


def nearest_lumen_point(tree: VesselTree, p: Sequence[float]) -> LumenPoint:
    return tree.nearest_lumen_point(p)


def path_length(tree: VesselTree, a: ArcPosition, b: ArcPosition) -> float:
    return tree.path_length(a, b)


def sample_point_in_region(tree: VesselTree, region, rng: np.random.Generator) -> np.ndarray:
    return tree.sample_point_in_region(region, rng)


# ----------------------------------------------------------------------
# Anatomy documents
# ----------------------------------------------------------------------

def serialize_tree(tree: VesselTree) -> Dict[str, Any]:
    doc: Dict[str, Any] = {
        'version': ANATOMY_FORMAT,
        'arch_type': tree.arch_type.value,
        'branches': [],
    }
    for b in tree.branches.values():
        doc['branches'].append({
            'id': b.id,
            'parent': None if b.parent is None else {'id': b.parent.branch, 's': b.parent.s},
            'points': [
                {'x': float(p[0]), 'y': float(p[1]), 'z': float(p[2]), 'r': float(r)}
                for p, r in zip(b.positions, b.radii)
            ],
        })
    if tree.landmarks:
        doc['landmarks'] = {name: {'branch': p.branch, 's': p.s} for name, p in tree.landmarks.items()}
    return doc


def load_tree(document: Union[str, Dict[str, Any]]) -> VesselTree:
    """Parse and validate an anatomy document (JSON text or already-decoded dict)."""
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise AnatomyError(f"anatomy document is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise AnatomyError("anatomy document must be an object")
    version = document.get('version')
    if version != ANATOMY_FORMAT:
        raise AnatomyError(f"unsupported anatomy version {version!r} (expected {ANATOMY_FORMAT!r})")
    try:
        arch_type = ArchType(document.get('arch_type', ArchType.TYPE_I.value))
    except ValueError as e:
        raise AnatomyError(f"unknown arch_type {document.get('arch_type')!r}") from e
    entries = document.get('branches')
    if not isinstance(entries, list) or not entries:
        raise AnatomyError("anatomy document needs a non-empty 'branches' list")

    branches = []
    for bi, entry in enumerate(entries):
        bid = entry.get('id') if isinstance(entry, dict) else None
        if not isinstance(bid, str) or not bid:
            raise AnatomyError(f"branch #{bi}: missing string 'id'")
        parent = None
        if entry.get('parent') is not None:
            ref = entry['parent']
            try:
                parent = Attachment(str(ref['id']), float(ref['s']))
            except (KeyError, TypeError, ValueError) as e:
                raise AnatomyError(f"branch '{bid}': malformed parent reference {ref!r}") from e
        points = entry.get('points')
        if not isinstance(points, list):
            raise AnatomyError(f"branch '{bid}': missing 'points' list")
        positions, radii = [], []
        for pi, pt in enumerate(points):
            try:
                positions.append([float(pt['x']), float(pt['y']), float(pt['z'])])
                radii.append(float(pt['r']))
            except (KeyError, TypeError, ValueError) as e:
                raise AnatomyError(f"branch '{bid}' point {pi}: expected numeric x, y, z, r") from e
        if len(positions) < 2:
            raise AnatomyError(f"branch '{bid}': needs at least 2 points, got {len(positions)}")
        branches.append(Branch(bid, np.array(positions), np.array(radii), parent))

    landmarks = {}
    for name, ref in (document.get('landmarks') or {}).items():
        try:
            landmarks[name] = ArcPosition(str(ref['branch']), float(ref['s']))
        except (KeyError, TypeError, ValueError) as e:
            raise AnatomyError(f"landmark '{name}': malformed reference {ref!r}") from e
    return VesselTree(branches, arch_type=arch_type, landmarks=landmarks)


def save_tree(tree: VesselTree, path: Path) -> None:
    """Write an anatomy file atomically."""
    path = Path(path)
    temp_file = path.with_suffix('.tmp')
    with open(temp_file, 'w') as f:
        json.dump(serialize_tree(tree), f, indent=1)
    temp_file.replace(path)


def load_tree_file(path: Path) -> VesselTree:
    with open(path, 'r') as f:
        return load_tree(f.read())


# ----------------------------------------------------------------------
# Synthetic anatomy generation
# ----------------------------------------------------------------------

@dataclass
class VesselShape:
    """Take-off and size of one generated vessel."""
    length: float
    radius: Tuple[float, float]
    takeoff: float = 0.0
    origin: float = 0.0


def _default_vessels() -> Dict[str, VesselShape]:
    # origin: angle along the arch measured from the descending side (radians)
    # takeoff: angle from cranial direction, positive toward the descending side
    return {
        'bct': VesselShape(35.0, (5.5, 6.5), takeoff=-0.35, origin=0.66 * math.pi),
        'rcca': VesselShape(80.0, (3.5, 4.2), takeoff=-0.10),
        'rica': VesselShape(50.0, (2.3, 2.8), takeoff=-0.05),
        'lcca': VesselShape(100.0, (3.5, 4.2), takeoff=0.15, origin=0.48 * math.pi),
        'lica': VesselShape(50.0, (2.3, 2.8), takeoff=0.05),
        'lsa': VesselShape(60.0, (4.0, 5.0), takeoff=0.60, origin=0.30 * math.pi),
    }


@dataclass
class AnatomySpec:
    arch_type: ArchType = ArchType.TYPE_I
    trunk_length: float = 220.0
    arch_radius: float = 30.0
    arch_depth: float = 20.0
    ascending_length: float = 50.0
    aorta_radius: Tuple[float, float] = (10.0, 12.5)
    takeoff_std: float = 0.08
    type2_shift: float = 0.15 * math.pi
    ica_tortuosity: float = 3.0
    vessels: Dict[str, VesselShape] = field(default_factory=_default_vessels)

    def validate(self):
        ranges = {'aorta': self.aorta_radius}
        ranges.update({name: v.radius for name, v in self.vessels.items()})
        for name, (lo, hi) in ranges.items():
            if lo <= 0 or hi <= 0:
                raise ValueError(f"{name}: radius range ({lo}, {hi}) must be positive")
            if lo > hi:
                raise ValueError(f"{name}: radius range ({lo}, {hi}) is inverted")
        for name in ('trunk_length', 'arch_radius', 'ascending_length'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.takeoff_std < 0:
            raise ValueError("takeoff_std must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['arch_type'] = self.arch_type.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AnatomySpec':
        data = dict(data)
        if 'arch_type' in data:
            data['arch_type'] = ArchType(data['arch_type'])
        if 'vessels' in data:
            vessels = _default_vessels()
            for name, shape in data['vessels'].items():
                shape = dict(shape)
                if 'radius' in shape:
                    shape['radius'] = tuple(shape['radius'])
                vessels[name] = VesselShape(**shape)
            data['vessels'] = vessels
        for key in ('aorta_radius',):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def _grow_vessel(start: np.ndarray, takeoff: float, length: float,
                 tortuosity: float = 0.0, tilt: float = 0.0) -> np.ndarray:
    """Polyline leaving start at `takeoff` from cranial, relaxing toward cranial."""
    n = max(2, int(math.ceil(length)) + 1)
    points = [start.astype(float)]
    step = length / (n - 1)
    for i in range(1, n):
        ell = i * step
        angle = takeoff * math.exp(-ell / 30.0)
        direction = np.array([math.sin(angle), math.cos(angle), tilt])
        direction /= np.linalg.norm(direction)
        points.append(points[-1] + step * direction)
    points = np.array(points)
    if tortuosity:
        ell = np.linspace(0.0, length, n)
        points[:, 0] += tortuosity * np.sin(2.0 * math.pi * ell / 25.0) * np.minimum(1.0, ell / 10.0)
    return points


def _tapered(n: int, start_radius: float, radius: float, arcs: np.ndarray,
             taper: float = 15.0) -> np.ndarray:
    f = np.clip(arcs / taper, 0.0, 1.0)
    return start_radius + f * (radius - start_radius) if n else np.array([])


def generate_synthetic_anatomy(spec: AnatomySpec, rng: np.random.Generator) -> VesselTree:
    """
    Build an aortic-arch tree: descending aorta -> arch -> ascending aorta, with
    brachiocephalic (-> RCCA -> R-ICA), LCCA (-> L-ICA) and left subclavian branches.
    """
    spec.validate()
    vessels = spec.vessels
    radius = {name: float(rng.uniform(*v.radius)) for name, v in vessels.items()}
    aorta_r = float(rng.uniform(*spec.aorta_radius))
    takeoff = {name: v.takeoff + spec.takeoff_std * float(rng.standard_normal())
               for name, v in vessels.items()}

    origin = {name: vessels[name].origin for name in ('bct', 'lcca', 'lsa')}
    if spec.arch_type == ArchType.TYPE_II:
        # Origins slide down the arch: toward the ascending side for BCT/LCCA,
        # toward the descending side for LSA.
        origin['bct'] = min(origin['bct'] + spec.type2_shift, 0.95 * math.pi)
        origin['lcca'] = min(origin['lcca'] + spec.type2_shift, 0.9 * math.pi)
        origin['lsa'] = max(origin['lsa'] - 0.5 * spec.type2_shift, 0.05 * math.pi)

    H, R = spec.trunk_length, spec.arch_radius
    descending = [np.array([0.0, y, 0.0]) for y in np.linspace(0.0, H, int(math.ceil(H)) + 1)]
    thetas = np.linspace(0.0, math.pi, 181)
    arch = [np.array([-R + R * math.cos(t), H + R * math.sin(t), spec.arch_depth * t / math.pi])
            for t in thetas[1:]]
    end = arch[-1]
    ascending = [end + np.array([0.0, -d, 0.0])
                 for d in np.linspace(0.0, spec.ascending_length, int(math.ceil(spec.ascending_length)) + 1)[1:]]
    aorta_pts = np.array(descending + arch + ascending)
    aorta_arcs = _arc_lengths(aorta_pts)
    n_desc = len(descending)

    def arch_index(theta: float) -> int:
        return n_desc - 1 + int(np.argmin(np.abs(thetas - theta)))

    branches = [Branch('aorta', aorta_pts, np.full(len(aorta_pts), aorta_r))]

    def side_branch(name: str, theta: float, tilt: float) -> Branch:
        idx = arch_index(theta)
        pts = _grow_vessel(aorta_pts[idx], takeoff[name], vessels[name].length, tilt=tilt)
        return Branch(name, pts, np.full(len(pts), radius[name]),
                      Attachment('aorta', float(aorta_arcs[idx])))

    def continuation(name: str, parent: Branch, tortuosity: float = 0.0) -> Branch:
        pts = _grow_vessel(parent.positions[-1], takeoff[name], vessels[name].length,
                           tortuosity=tortuosity)
        radii = _tapered(len(pts), float(parent.radii[-1]), radius[name], _arc_lengths(pts))
        return Branch(name, pts, radii, Attachment(parent.id, parent.length))

    bct = side_branch('bct', origin['bct'], tilt=0.1)
    lcca = side_branch('lcca', origin['lcca'], tilt=0.05)
    lsa = side_branch('lsa', origin['lsa'], tilt=-0.05)
    rcca = continuation('rcca', bct)
    rica = continuation('rica', rcca, spec.ica_tortuosity)
    lica = continuation('lica', lcca, spec.ica_tortuosity)
    branches += [bct, rcca, rica, lcca, lica, lsa]

    landmarks = {
        'descending_top': ArcPosition('aorta', float(aorta_arcs[n_desc - 1])),
        'arch_apex': ArcPosition('aorta', float(aorta_arcs[arch_index(0.5 * math.pi)])),
    }
    tree = VesselTree(branches, root='aorta', arch_type=spec.arch_type, landmarks=landmarks)
    logger.debug("generated %s anatomy with %d branches", spec.arch_type.value, len(tree.branches))
    return tree


@dataclass
class ToyAnatomySpec:
    trunk_length: float = 120.0
    trunk_radius: float = 6.0
    child_length: float = 80.0
    child_radius: float = 3.5
    split_angle: float = math.radians(35.0)
    radius_noise: float = 0.05

    def validate(self):
        if min(self.trunk_radius, self.child_radius) * (1 - self.radius_noise) <= 0:
            raise ValueError("toy anatomy radii must stay positive")


def generate_toy_anatomy(spec: ToyAnatomySpec, rng: np.random.Generator) -> VesselTree:
    """Two-branch Y: a straight cranial trunk splitting into 'left' and 'right'."""
    spec.validate()
    noise = lambda: 1.0 + spec.radius_noise * float(rng.uniform(-1.0, 1.0))
    n = int(math.ceil(spec.trunk_length)) + 1
    trunk_pts = np.array([[0.0, y, 0.0] for y in np.linspace(0.0, spec.trunk_length, n)])
    trunk = Branch('trunk', trunk_pts, np.full(n, spec.trunk_radius * noise()))
    branches = [trunk]
    for name, sign in (('left', 1.0), ('right', -1.0)):
        direction = np.array([sign * math.sin(spec.split_angle), math.cos(spec.split_angle), 0.0])
        m = int(math.ceil(spec.child_length)) + 1
        pts = trunk_pts[-1] + np.linspace(0.0, spec.child_length, m)[:, None] * direction
        radii = _tapered(m, float(trunk.radii[-1]), spec.child_radius * noise(), _arc_lengths(pts), taper=10.0)
        branches.append(Branch(name, pts, radii, Attachment('trunk', trunk.length)))
    return VesselTree(branches, root='trunk')
