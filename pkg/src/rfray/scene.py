"""Scene geometry: triangle meshes, materials, diffraction edges, ray queries.

A scene is a triangle soup loaded from a YAML document. Each triangle carries
a material reference; wedge edges suitable for diffraction are extracted
automatically from the mesh dihedrals (or declared explicitly). Ray queries
run through a median-split bounding volume hierarchy and are guarded by a
self-intersection epsilon so that rays re-emitted from a surface never hit
their own launch point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

logger = logging.getLogger(__name__)

# Self-intersection guard: hits closer than this to the ray origin are ignored,
# and occlusion tests exclude this margin at both segment endpoints.
EPS_GEOM = 1e-4

# Vertex welding tolerance for mesh connectivity (meters).
WELD_TOL = 1e-6

# A shared edge becomes a diffraction edge when the dihedral deviates from a
# flat continuation by at least this angle (radians).
DIHEDRAL_THRESHOLD = math.pi / 12


class SceneError(ValueError):
    """Raised when a scene document is malformed or references unknown data."""


@dataclass(frozen=True)
class Material:
    """Surface material with frequency-dependent ITU-style permittivity law.

    Relative permittivity follows ``eps' = a * f_GHz**b`` and conductivity
    ``sigma = c * f_GHz**d`` (S/m). ``h_rms_m`` is the surface RMS roughness
    height and ``thickness_m`` the slab thickness used for penetration.
    """

    name: str
    a: float
    b: float
    c: float
    d: float
    h_rms_m: float = 0.0
    thickness_m: float = 0.1


# Default material library (ITU-style power-law coefficients). Scene files
# may override any entry or add their own.
BUILTIN_MATERIALS: dict[str, Material] = {
    m.name: m
    for m in [
        Material("concrete", 5.24, 0.0, 0.0462, 0.7822, h_rms_m=269e-6, thickness_m=0.30),
        Material("brick", 3.91, 0.0, 0.0238, 0.16, h_rms_m=325e-6, thickness_m=0.20),
        Material("plasterboard", 2.73, 0.0, 0.0085, 0.9395, h_rms_m=99.2e-6, thickness_m=0.10),
        Material("wood", 1.99, 0.0, 0.0047, 1.0718, h_rms_m=80e-6, thickness_m=0.05),
        Material("glass", 6.31, 0.0, 0.0036, 1.3394, h_rms_m=14.5e-6, thickness_m=0.01),
        Material("metal", 1.0, 0.0, 1e7, 0.0, h_rms_m=0.0, thickness_m=0.01),
    ]
}


@dataclass(frozen=True)
class DiffractionEdge:
    """A wedge edge between two mesh faces.

    ``interior_angle`` is measured through the solid, so a square building
    corner has pi/2 and a thin screen approaches 0. The edge frame
    (``e_hat``, ``t0_hat``, ``n0_hat``) orients angular coordinates: angles
    are measured from the face-0 tangent ``t0_hat`` rotating toward the
    face-0 outward normal ``n0_hat``, sweeping the exterior region
    ``[0, n*pi]`` with ``n = (2*pi - interior_angle)/pi``.
    """

    a: np.ndarray
    b: np.ndarray
    face0: int
    face1: int
    interior_angle: float
    e_hat: np.ndarray
    t0_hat: np.ndarray
    n0_hat: np.ndarray
    n1_hat: np.ndarray

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))

    @property
    def n_param(self) -> float:
        """Exterior wedge parameter n = (2*pi - interior) / pi, in (1, 2)."""
        return (2.0 * math.pi - self.interior_angle) / math.pi


def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


class _Bvh:
    """Binary BVH, median split on the longest centroid axis."""

    LEAF_SIZE = 4

    def __init__(self, v0: np.ndarray, e1: np.ndarray, e2: np.ndarray):
        n = len(v0)
        tri_min = np.minimum(np.minimum(v0, v0 + e1), v0 + e2)
        tri_max = np.maximum(np.maximum(v0, v0 + e1), v0 + e2)
        centroids = (tri_min + tri_max) * 0.5

        self.order = np.arange(n)
        node_min, node_max = [], []
        node_left, node_right = [], []
        node_start, node_count = [], []

        def build(lo: int, hi: int) -> int:
            idx = len(node_min)
            sel = self.order[lo:hi]
            node_min.append(tri_min[sel].min(axis=0))
            node_max.append(tri_max[sel].max(axis=0))
            node_left.append(-1)
            node_right.append(-1)
            if hi - lo <= self.LEAF_SIZE:
                node_start.append(lo)
                node_count.append(hi - lo)
                return idx
            node_start.append(-1)
            node_count.append(0)
            axis = int(np.argmax(node_max[idx] - node_min[idx]))
            key = centroids[sel, axis]
            perm = np.argsort(key, kind="stable")
            self.order[lo:hi] = sel[perm]
            mid = lo + (hi - lo) // 2
            node_left[idx] = build(lo, mid)
            node_right[idx] = build(mid, hi)
            return idx

        if n:
            build(0, n)
        self.node_min = np.array(node_min) if node_min else np.zeros((0, 3))
        self.node_max = np.array(node_max) if node_max else np.zeros((0, 3))
        self.node_left = np.array(node_left, dtype=int)
        self.node_right = np.array(node_right, dtype=int)
        self.node_start = np.array(node_start, dtype=int)
        self.node_count = np.array(node_count, dtype=int)


class Scene:
    """Triangulated propagation environment with ray-query acceleration."""

    def __init__(
        self,
        vertices: np.ndarray,
        materials: list[Material],
        material_index: np.ndarray,
        edges: list[DiffractionEdge] | None = None,
    ):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.size and (vertices.ndim != 3 or vertices.shape[1:] != (3, 3)):
            raise SceneError("triangle vertex array must have shape (n, 3, 3)")
        self.tri_vertices = vertices.reshape(-1, 3, 3)
        self.materials = materials
        self.material_index = np.asarray(material_index, dtype=int)

        self.v0 = self.tri_vertices[:, 0, :].copy()
        self.e1 = self.tri_vertices[:, 1, :] - self.v0
        self.e2 = self.tri_vertices[:, 2, :] - self.v0
        raw_n = np.cross(self.e1, self.e2)
        areas = 0.5 * np.linalg.norm(raw_n, axis=1)
        if np.any(areas < 1e-12):
            bad = int(np.argmin(areas))
            raise SceneError(f"degenerate triangle at index {bad} (area ~ 0)")
        self.normals = raw_n / np.linalg.norm(raw_n, axis=1, keepdims=True)
        self.areas = areas

        self.edges: list[DiffractionEdge] = edges if edges is not None else []
        self._bvh = _Bvh(self.v0, self.e1, self.e2) if len(self.v0) else None

    # ------------------------------------------------------------------
    @property
    def n_triangles(self) -> int:
        return len(self.v0)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the geometry (lo, hi)."""
        if not self.n_triangles:
            z = np.zeros(3)
            return z, z
        flat = self.tri_vertices.reshape(-1, 3)
        return flat.min(axis=0), flat.max(axis=0)

    def material_of(self, tri: int) -> Material:
        return self.materials[self.material_index[tri]]

    # ------------------------------------------------------------------
    def _tri_candidates_t(self, origin, direction, tri_sel):
        """Moller-Trumbore for one ray against a triangle subset.

        Returns an array of hit distances (inf where missed).
        """
        ox, oy, oz = origin
        dx, dy, dz = direction
        v0 = self.v0[tri_sel]
        e1 = self.e1[tri_sel]
        e2 = self.e2[tri_sel]
        px, py, pz = _cross(dx, dy, dz, e2[:, 0], e2[:, 1], e2[:, 2])
        det = _dot(e1[:, 0], e1[:, 1], e1[:, 2], px, py, pz)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tx, ty, tz = ox - v0[:, 0], oy - v0[:, 1], oz - v0[:, 2]
            u = _dot(tx, ty, tz, px, py, pz) * inv
            qx, qy, qz = _cross(tx, ty, tz, e1[:, 0], e1[:, 1], e1[:, 2])
            v = _dot(dx, dy, dz, qx, qy, qz) * inv
            t = _dot(e2[:, 0], e2[:, 1], e2[:, 2], qx, qy, qz) * inv
            ok = (
                (np.abs(det) > 1e-14)
                & (u >= 0.0)
                & (v >= 0.0)
                & (u + v <= 1.0)
                & np.isfinite(t)
            )
        return np.where(ok, t, np.inf)

    def intersect_brute(self, origin, direction, t_max=np.inf):
        """Nearest hit by exhaustive triangle test: (t, tri_index) or None.

        Ties at identical t resolve to the lowest triangle index.
        """
        if not self.n_triangles:
            return None
        t = self._tri_candidates_t(np.asarray(origin, float), np.asarray(direction, float), slice(None))
        t = np.where((t > EPS_GEOM) & (t < t_max), t, np.inf)
        best = int(np.argmin(t))  # argmin returns the first (lowest) index on ties
        if not np.isfinite(t[best]):
            return None
        return float(t[best]), best

    def intersect(self, origin, direction, t_max=np.inf):
        """Nearest hit via the BVH: (t, tri_index) or None.

        Identical result (including tie-breaking) to ``intersect_brute``.
        """
        if self._bvh is None:
            return None
        origin = np.asarray(origin, float)
        direction = np.asarray(direction, float)
        bvh = self._bvh
        with np.errstate(divide="ignore"):
            inv_d = 1.0 / direction
        best_t, best_idx = np.inf, -1
        stack = [0]
        while stack:
            node = stack.pop()
            lo = (bvh.node_min[node] - origin) * inv_d
            hi = (bvh.node_max[node] - origin) * inv_d
            near = np.minimum(lo, hi).max()
            far = np.maximum(lo, hi).min()
            if near > far or far < EPS_GEOM or near > min(best_t, t_max):
                continue
            if bvh.node_count[node] > 0:
                sel = bvh.order[bvh.node_start[node] : bvh.node_start[node] + bvh.node_count[node]]
                t = self._tri_candidates_t(origin, direction, sel)
                t = np.where((t > EPS_GEOM) & (t < t_max), t, np.inf)
                for tt, idx in zip(t, sel):
                    if tt < best_t or (tt == best_t and idx < best_idx):
                        best_t, best_idx = tt, int(idx)
            else:
                stack.append(int(bvh.node_right[node]))
                stack.append(int(bvh.node_left[node]))
        if not np.isfinite(best_t):
            return None
        return float(best_t), best_idx

    def any_hit(self, origin, direction, t_min, t_max) -> bool:
        """True if any triangle is hit with t in (t_min, t_max)."""
        if self._bvh is None:
            return False
        origin = np.asarray(origin, float)
        direction = np.asarray(direction, float)
        bvh = self._bvh
        with np.errstate(divide="ignore"):
            inv_d = 1.0 / direction
        stack = [0]
        while stack:
            node = stack.pop()
            lo = (bvh.node_min[node] - origin) * inv_d
            hi = (bvh.node_max[node] - origin) * inv_d
            near = np.minimum(lo, hi).max()
            far = np.maximum(lo, hi).min()
            if near > far or far < t_min or near > t_max:
                continue
            if bvh.node_count[node] > 0:
                sel = bvh.order[bvh.node_start[node] : bvh.node_start[node] + bvh.node_count[node]]
                t = self._tri_candidates_t(origin, direction, sel)
                if np.any((t > t_min) & (t < t_max)):
                    return True
            else:
                stack.append(int(bvh.node_right[node]))
                stack.append(int(bvh.node_left[node]))
        return False

    def occluded(self, p, q) -> bool:
        """True if the open segment p->q is blocked by geometry.

        Hits within EPS_GEOM of either endpoint do not count, so a segment
        starting or ending exactly on a surface is not occluded by it.
        """
        p = np.asarray(p, float)
        q = np.asarray(q, float)
        d = q - p
        dist = float(np.linalg.norm(d))
        if dist <= 2 * EPS_GEOM:
            return False
        return self.any_hit(p, d / dist, EPS_GEOM, dist - EPS_GEOM)

    def first_hits(self, origins: np.ndarray, directions: np.ndarray):
        """Vectorized nearest-hit query for a batch of rays.

        Loops over triangles, vectorized over rays; same epsilon and
        tie-break rules as the single-ray queries. Returns (t, tri_index)
        arrays with t = inf / index = -1 where nothing is hit.
        """
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_idx = np.full(n, -1, dtype=int)
        ox, oy, oz = origins[:, 0], origins[:, 1], origins[:, 2]
        dx, dy, dz = directions[:, 0], directions[:, 1], directions[:, 2]
        for k in range(self.n_triangles):
            v0, e1, e2 = self.v0[k], self.e1[k], self.e2[k]
            px, py, pz = _cross(dx, dy, dz, e2[0], e2[1], e2[2])
            det = _dot(e1[0], e1[1], e1[2], px, py, pz)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / det
                tx, ty, tz = ox - v0[0], oy - v0[1], oz - v0[2]
                u = _dot(tx, ty, tz, px, py, pz) * inv
                qx, qy, qz = _cross(tx, ty, tz, e1[0], e1[1], e1[2])
                v = _dot(dx, dy, dz, qx, qy, qz) * inv
                t = _dot(e2[0], e2[1], e2[2], qx, qy, qz) * inv
                ok = (
                    (np.abs(det) > 1e-14)
                    & (u >= 0.0)
                    & (v >= 0.0)
                    & (u + v <= 1.0)
                    & np.isfinite(t)
                    & (t > EPS_GEOM)
                    & (t < best_t)
                )
            best_t = np.where(ok, t, best_t)
            best_idx = np.where(ok, k, best_idx)
        return best_t, best_idx


# ----------------------------------------------------------------------
# Edge extraction


def _weld_key(point: np.ndarray) -> tuple[int, int, int]:
    return tuple(int(round(c / WELD_TOL)) for c in point)


def extract_edges(
    tri_vertices: np.ndarray,
    normals: np.ndarray,
    threshold: float = DIHEDRAL_THRESHOLD,
) -> list[DiffractionEdge]:
    """Find wedge edges shared by exactly two faces.

    Vertices are welded to a 1e-6 m grid to establish connectivity. An edge
    qualifies when the dihedral deviates from a flat continuation by at
    least ``threshold``. Boundary edges (single face) and non-manifold
    edges (more than two faces) are skipped. The returned set is
    independent of triangle winding; the stored ``interior_angle`` and
    frame do assume outward-facing normals.
    """
    shared: dict[tuple, list[tuple[int, np.ndarray, np.ndarray]]] = {}
    for tri in range(len(tri_vertices)):
        pts = tri_vertices[tri]
        keys = [_weld_key(p) for p in pts]
        for i in range(3):
            j = (i + 1) % 3
            if keys[i] == keys[j]:
                continue
            key = (min(keys[i], keys[j]), max(keys[i], keys[j]))
            shared.setdefault(key, []).append((tri, pts[i], pts[j]))

    edges = []
    n_boundary = 0
    for key in sorted(shared):
        faces = shared[key]
        if len(faces) == 1:
            n_boundary += 1
            continue
        if len(faces) > 2:
            logger.debug("skipping non-manifold edge shared by %d faces", len(faces))
            continue
        (f0, a, b), (f1, _, _) = sorted(faces, key=lambda item: item[0])
        edge = _make_edge(a, b, f0, f1, tri_vertices, normals)
        if edge is None:
            continue
        if abs(math.pi - edge.interior_angle) >= threshold:
            edges.append(edge)
    if n_boundary:
        logger.debug("suppressed %d boundary edges (no second face)", n_boundary)
    return edges


def _face_tangent(tri_pts: np.ndarray, a: np.ndarray, e_dir: np.ndarray) -> np.ndarray:
    """In-face unit vector perpendicular to the edge, pointing into the face."""
    centroid = tri_pts.mean(axis=0)
    w = centroid - a
    t = w - np.dot(w, e_dir) * e_dir
    norm = np.linalg.norm(t)
    if norm < 1e-12:
        return np.zeros(3)
    return t / norm


def _make_edge(a, b, f0, f1, tri_vertices, normals) -> DiffractionEdge | None:
    e_dir = b - a
    e_len = np.linalg.norm(e_dir)
    if e_len < WELD_TOL:
        return None
    e_dir = e_dir / e_len
    t0 = _face_tangent(tri_vertices[f0], a, e_dir)
    t1 = _face_tangent(tri_vertices[f1], a, e_dir)
    if not t0.any() or not t1.any():
        return None
    n0, n1 = normals[f0], normals[f1]
    cosang = float(np.clip(np.dot(t0, t1), -1.0, 1.0))
    ang = math.acos(cosang)
    mid = t0 + t1
    if np.linalg.norm(mid) < 1e-9:
        interior = math.pi
    elif np.dot(mid / np.linalg.norm(mid), n0 + n1) < 0.0:
        interior = ang  # bisector of the between-tangents region points into the solid
    else:
        interior = 2.0 * math.pi - ang
    e_hat = np.cross(t0, n0)
    # orient the stored endpoints along e_hat for a reproducible frame
    if np.dot(e_hat, b - a) < 0:
        a, b = b, a
    return DiffractionEdge(
        a=np.array(a, float),
        b=np.array(b, float),
        face0=f0,
        face1=f1,
        interior_angle=interior,
        e_hat=e_hat,
        t0_hat=t0,
        n0_hat=np.array(n0, float),
        n1_hat=np.array(n1, float),
    )


# ----------------------------------------------------------------------
# Scene document loading


def _as_point(value, context: str) -> np.ndarray:
    try:
        p = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SceneError(f"{context}: vertex is not numeric: {value!r}") from exc
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise SceneError(f"{context}: vertex must be a finite [x, y, z] triple, got {value!r}")
    return p


def load_scene(source: str | Path | dict) -> Scene:
    """Load a scene document (YAML path, YAML text, or parsed mapping).

    Top-level keys: ``materials`` (name -> coefficient mapping),
    ``quads`` / ``triangles`` (each entry has ``material`` and ``vertices``),
    and optional ``edges`` (explicit endpoint pairs which must coincide with
    mesh edges). An empty document yields an empty scene.
    """
    if isinstance(source, dict):
        doc = source
    else:
        path = Path(source)
        if path.exists():
            text = path.read_text()
        elif isinstance(source, str) and ("\n" in source or ":" in source):
            text = source
        else:
            raise SceneError(f"scene file not found: {source}")
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise SceneError(f"scene document is not valid YAML: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise SceneError("scene document must be a mapping at the top level")

    known = {"materials", "quads", "triangles", "edges"}
    unknown = set(doc) - known
    if unknown:
        raise SceneError(f"unknown top-level keys in scene document: {sorted(unknown)}")

    materials: dict[str, Material] = dict(BUILTIN_MATERIALS)
    if doc.get("materials") is not None and not isinstance(doc["materials"], dict):
        raise SceneError("'materials' must map material names to properties")
    for name, props in (doc.get("materials") or {}).items():
        if not isinstance(props, dict):
            raise SceneError(f"material {name!r}: properties must be a mapping")
        extra = set(props) - {"a", "b", "c", "d", "h_rms_m", "thickness_m"}
        if extra:
            raise SceneError(f"material {name!r}: unknown keys {sorted(extra)}")
        base = materials.get(name, Material(name, 1.0, 0.0, 0.0, 0.0))
        materials[name] = Material(
            name=name,
            a=float(props.get("a", base.a)),
            b=float(props.get("b", base.b)),
            c=float(props.get("c", base.c)),
            d=float(props.get("d", base.d)),
            h_rms_m=float(props.get("h_rms_m", base.h_rms_m)),
            thickness_m=float(props.get("thickness_m", base.thickness_m)),
        )

    tri_list: list[np.ndarray] = []
    mat_names: list[str] = []

    def add_face(entry: dict, context: str, n_vertices: int):
        if not isinstance(entry, dict) or "vertices" not in entry or "material" not in entry:
            raise SceneError(f"{context}: each face needs 'material' and 'vertices'")
        name = entry["material"]
        if name not in materials:
            raise SceneError(f"{context}: unknown material {name!r}")
        verts = entry["vertices"]
        if len(verts) != n_vertices:
            raise SceneError(f"{context}: expected {n_vertices} vertices, got {len(verts)}")
        pts = [_as_point(v, context) for v in verts]
        if n_vertices == 4:
            tri_list.append(np.stack([pts[0], pts[1], pts[2]]))
            mat_names.append(name)
            tri_list.append(np.stack([pts[0], pts[2], pts[3]]))
            mat_names.append(name)
        else:
            tri_list.append(np.stack(pts))
            mat_names.append(name)

    for i, entry in enumerate(doc.get("quads") or []):
        add_face(entry, f"quads[{i}]", 4)
    for i, entry in enumerate(doc.get("triangles") or []):
        add_face(entry, f"triangles[{i}]", 3)

    mat_list = sorted({n for n in mat_names}, key=str)
    mat_objects = [materials[n] for n in mat_list]
    mat_index = np.array([mat_list.index(n) for n in mat_names], dtype=int)

    vertices = np.stack(tri_list) if tri_list else np.zeros((0, 3, 3))
    scene = Scene(vertices, mat_objects, mat_index)

    auto = extract_edges(scene.tri_vertices, scene.normals) if scene.n_triangles else []
    declared = []
    declared_raw = doc.get("edges") or []
    if declared_raw:
        # index mesh edges by welded endpoint pair for explicit lookup
        available = {
            (min(_weld_key(e.a), _weld_key(e.b)), max(_weld_key(e.a), _weld_key(e.b))): e
            for e in extract_edges(scene.tri_vertices, scene.normals, threshold=0.0)
        }
        for i, pair in enumerate(declared_raw):
            if len(pair) != 2:
                raise SceneError(f"edges[{i}]: expected a pair of points")
            pa = _as_point(pair[0], f"edges[{i}]")
            pb = _as_point(pair[1], f"edges[{i}]")
            key = (min(_weld_key(pa), _weld_key(pb)), max(_weld_key(pa), _weld_key(pb)))
            if key not in available:
                raise SceneError(f"edges[{i}]: no mesh edge with these endpoints")
            declared.append(available[key])

    seen = set()
    merged = []
    for e in auto + declared:
        key = (_weld_key(e.a), _weld_key(e.b))
        if key not in seen:
            seen.add(key)
            merged.append(e)
    scene.edges = merged
    logger.debug(
        "loaded scene: %d triangles, %d materials, %d diffraction edges",
        scene.n_triangles, len(mat_objects), len(merged),
    )
    return scene
