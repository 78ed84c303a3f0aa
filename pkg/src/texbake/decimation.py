"""Quadric-error-metric edge collapse.

Greedy: the cheapest edge is collapsed first, using a heap with lazy
invalidation (entries carry the vertex versions they were computed from and
are re-costed when popped). Ties resolve to the lowest vertex pair.
"""

from dataclasses import replace
import heapq

import numpy as np

from texbake.diagnostics import warn
from texbake.geometry import compute_vertex_normals, face_normals_and_areas

COND_LIMIT = 1e8


def face_planes(mesh):
    """(F, 4) unit plane coefficients (a, b, c, d) and face areas."""
    normals, areas = face_normals_and_areas(mesh.positions, mesh.triangles)
    d = -(normals * mesh.positions[mesh.triangles[:, 0]]).sum(axis=1)
    return np.concatenate([normals, d[:, None]], axis=1), areas


def compute_vertex_quadrics(mesh):
    """(V, 4, 4) area-weighted sums of plane outer products over incident faces."""
    planes, areas = face_planes(mesh)
    per_face = areas[:, None, None] * planes[:, :, None] * planes[:, None, :]
    Q = np.zeros((mesh.n_vertices, 4, 4))
    for k in range(3):
        np.add.at(Q, mesh.triangles[:, k], per_face)
    return Q


def quadric_error(Q, p):
    h = np.append(np.asarray(p, dtype=np.float64), 1.0)
    return float(h @ Q @ h)


def collapse_cost(quadrics, edge, positions=None):
    """(cost, position) for merging the edge's endpoints.

    Uses the minimizer of the summed quadric when its 3x3 block is well
    conditioned, otherwise the best of midpoint and endpoints.
    """
    a, b = edge
    Q = quadrics[a] + quadrics[b]
    A = Q[:3, :3]
    if np.linalg.cond(A) < COND_LIMIT:
        p = np.linalg.solve(A, -Q[:3, 3])
        return max(quadric_error(Q, p), 0.0), p
    if positions is None:
        raise ValueError("singular quadric: endpoint positions are required for the fallback")
    pa, pb = positions[a], positions[b]
    best = None
    for cand in (pa, pb, 0.5 * (pa + pb)):
        e = quadric_error(Q, cand)
        if best is None or e < best[0]:
            best = (e, np.array(cand, dtype=np.float64))
    return max(best[0], 0.0), best[1]


def _seam_vertices(mesh):
    """Vertices with more than one distinct UV wedge, or on an edge whose two
    sides disagree on UVs."""
    n = mesh.n_vertices
    seam = np.zeros(n, dtype=bool)
    if mesh.corner_uvs is None:
        return seam
    first = {}
    for f, tri in enumerate(mesh.triangles):
        for k in range(3):
            v = int(tri[k])
            uv = tuple(mesh.corner_uvs[f, k])
            if v in first and first[v] != uv:
                seam[v] = True
            first.setdefault(v, uv)
    for a, b in uv_seam_edges(mesh):
        seam[a] = seam[b] = True
    return seam


def uv_seam_edges(mesh):
    """Vertex pairs (a < b) whose two incident triangles carry different UVs
    at either endpoint."""
    if mesh.corner_uvs is None:
        return set()
    sides = {}
    for f, tri in enumerate(mesh.triangles):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            key = (min(a, b), max(a, b))
            uva = tuple(mesh.corner_uvs[f, k])
            uvb = tuple(mesh.corner_uvs[f, (k + 1) % 3])
            sides.setdefault(key, []).append((uva, uvb) if a < b else (uvb, uva))
    return {e for e, s in sides.items() if len(s) == 2 and s[0] != s[1]}


class _Decimator:
    def __init__(self, mesh, preserve_uv_seams):
        self.pos = mesh.positions.copy()
        self.tris = mesh.triangles.copy()
        self.uvs = None if mesh.corner_uvs is None else mesh.corner_uvs.copy()
        self.alive = np.ones(len(self.tris), dtype=bool)
        self.vert_alive = np.ones(len(self.pos), dtype=bool)
        self.Q = compute_vertex_quadrics(mesh)
        self.version = np.zeros(len(self.pos), dtype=np.int64)
        self.faces_of = [set() for _ in range(len(self.pos))]
        for f, tri in enumerate(self.tris):
            for v in tri:
                self.faces_of[v].add(f)
        self.locked = _seam_vertices(mesh) if preserve_uv_seams else np.zeros(len(self.pos), dtype=bool)
        lo, hi = mesh.bbox()
        self.area_eps = 1e-12 * float(np.max(hi - lo)) ** 2
        self.heap = []
        self.accepted_costs = []
        self.n_faces = len(self.tris)

    def neighbors(self, v):
        out = set()
        for f in self.faces_of[v]:
            out.update(int(x) for x in self.tris[f])
        out.discard(v)
        return out

    def push(self, a, b):
        a, b = min(a, b), max(a, b)
        if self.locked[a] or self.locked[b]:
            return
        cost, p = collapse_cost(self.Q, (a, b), self.pos)
        heapq.heappush(self.heap, (cost, a, b, int(self.version[a]), int(self.version[b]), tuple(p)))

    def legal(self, a, b, p):
        fa, fb = self.faces_of[a], self.faces_of[b]
        shared = fa & fb
        # link condition keeps the surface manifold
        common = self.neighbors(a) & self.neighbors(b)
        if len(common) != len(shared):
            return False
        for f in (fa | fb) - shared:
            tri = self.tris[f]
            old = self.pos[tri]
            new = old.copy()
            new[tri == a] = p
            new[tri == b] = p
            n_old = np.cross(old[1] - old[0], old[2] - old[0])
            n_new = np.cross(new[1] - new[0], new[2] - new[0])
            if 0.5 * np.linalg.norm(n_new) <= self.area_eps:
                return False
            if n_old @ n_new <= 0:
                return False
        return True

    def collapse(self, a, b, p):
        """Merge b into a at position p; a's UV wedge replaces b's."""
        shared = self.faces_of[a] & self.faces_of[b]
        wedge = None
        if self.uvs is not None:
            f0 = min(shared) if shared else min(self.faces_of[a])
            wedge = self.uvs[f0, list(self.tris[f0]).index(a)].copy()
        for f in shared:
            self.alive[f] = False
            for v in self.tris[f]:
                self.faces_of[v].discard(f)
            self.n_faces -= 1
        for f in self.faces_of[b]:
            k = list(self.tris[f]).index(b)
            self.tris[f, k] = a
            if wedge is not None:
                self.uvs[f, k] = wedge
            self.faces_of[a].add(f)
        self.faces_of[b] = set()
        self.vert_alive[b] = False
        self.pos[a] = p
        self.Q[a] = self.Q[a] + self.Q[b]
        self.version[a] += 1
        self.version[b] += 1

    def run(self, target_faces):
        edges = set()
        for tri in self.tris:
            for k in range(3):
                a, b = int(tri[k]), int(tri[(k + 1) % 3])
                edges.add((min(a, b), max(a, b)))
        for a, b in sorted(edges):
            self.push(a, b)
        while self.n_faces > target_faces and self.heap:
            cost, a, b, va, vb, p = heapq.heappop(self.heap)
            if not (self.vert_alive[a] and self.vert_alive[b]):
                continue
            if va != self.version[a] or vb != self.version[b]:
                continue
            p = np.array(p)
            if not self.legal(a, b, p):
                continue
            self.collapse(a, b, p)
            self.accepted_costs.append(cost)
            for n in sorted(self.neighbors(a)):
                self.push(a, n)


def decimate(mesh, target_faces, preserve_uv_seams=False, return_costs=False):
    """Collapse edges until at most ``target_faces`` triangles remain.

    Collapses that flip a face (normal rotating by more than 90 degrees),
    leave a degenerate face or break the link condition are rejected. With
    ``preserve_uv_seams`` no edge touching a UV seam is collapsed. Surviving
    corners keep the UV wedge of the surviving vertex, which stretches the
    texture the way a naive simplification does.
    """
    if target_faces < 4:
        raise ValueError("target_faces must be at least 4")
    if mesh.n_faces <= target_faces:
        return (mesh, []) if return_costs else mesh
    dec = _Decimator(mesh, preserve_uv_seams)
    dec.run(target_faces)
    if dec.n_faces > target_faces:
        warn(f"decimation stopped at {dec.n_faces} faces; no legal collapse reaches {target_faces}")

    faces = np.flatnonzero(dec.alive)
    used = np.unique(dec.tris[faces])
    remap = np.full(len(dec.pos), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    out = replace(
        mesh,
        positions=dec.pos[used],
        triangles=remap[dec.tris[faces]],
        corner_uvs=None if dec.uvs is None else dec.uvs[faces],
        vertex_normals=np.zeros((len(used), 3)),
    )
    out = compute_vertex_normals(out)
    return (out, dec.accepted_costs) if return_costs else out
