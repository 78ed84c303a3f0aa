"""Triangle meshes with per-corner (wedge) UVs: OBJ I/O, normalization,
vertex normals and a per-triangle fallback UV atlas."""

from dataclasses import dataclass, replace
import math

import numpy as np

from texbake.diagnostics import warn


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    positions: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int64
    corner_uvs: np.ndarray | None  # (F, 3, 2) float64, or None when the mesh has no UVs
    vertex_normals: np.ndarray  # (V, 3) float64, unit length

    @property
    def n_vertices(self):
        return len(self.positions)

    @property
    def n_faces(self):
        return len(self.triangles)

    @property
    def bake_ready(self):
        if self.corner_uvs is None or self.n_faces == 0:
            return False
        uv = self.corner_uvs
        if uv.min() < 0.0 or uv.max() > 1.0:
            return False
        return bool(np.all(np.abs(uv_signed_areas(uv)) > 0.0))

    def bbox(self):
        return self.positions.min(axis=0), self.positions.max(axis=0)


def uv_signed_areas(corner_uvs):
    a, b, c = corner_uvs[:, 0], corner_uvs[:, 1], corner_uvs[:, 2]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))


def face_normals_and_areas(positions, triangles):
    """Unit face normals (zero for degenerate faces) and face areas."""
    p = positions[triangles]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    normals = np.zeros_like(cross)
    ok = norm > 0
    normals[ok] = cross[ok] / norm[ok, None]
    return normals, 0.5 * norm


def make_mesh(positions, triangles, corner_uvs=None, vertex_normals=None):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if corner_uvs is not None:
        corner_uvs = np.asarray(corner_uvs, dtype=np.float64).reshape(-1, 3, 2)
        if len(corner_uvs) != len(triangles):
            raise MeshError("corner_uvs must have one entry per triangle")
    if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(positions)):
        raise MeshError("triangle index out of range")
    mesh = Mesh(positions, triangles, corner_uvs, np.zeros_like(positions))
    if vertex_normals is None:
        return compute_vertex_normals(mesh)
    return replace(mesh, vertex_normals=np.asarray(vertex_normals, dtype=np.float64).reshape(-1, 3))


def compute_vertex_normals(mesh):
    """Area-weighted average of incident face normals.

    Vertices without a non-degenerate incident face get +Z and a warning.
    """
    acc = np.zeros((mesh.n_vertices, 3))
    if mesh.n_faces:
        p = mesh.positions[mesh.triangles]
        # |cross| is twice the face area, so summing raw cross products weights by area
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        for k in range(3):
            np.add.at(acc, mesh.triangles[:, k], cross)
    norm = np.linalg.norm(acc, axis=1)
    lonely = norm <= 0
    normals = np.zeros_like(acc)
    normals[~lonely] = acc[~lonely] / norm[~lonely, None]
    if lonely.any():
        normals[lonely] = (0.0, 0.0, 1.0)
        warn(f"{int(lonely.sum())} vertices have no non-degenerate incident face; normal set to +Z")
    return replace(mesh, vertex_normals=normals)


def normalization_transform(mesh):
    """(center, scale) mapping the bbox to a unit-longest-side box at the origin."""
    if mesh.n_vertices == 0:
        raise MeshError("mesh has no vertices")
    lo, hi = mesh.bbox()
    extent = float((hi - lo).max())
    if not extent > 0:
        raise MeshError("degenerate mesh: all vertices coincide")
    return (lo + hi) / 2.0, 1.0 / extent


def apply_transform(mesh, center, scale):
    return replace(mesh, positions=(mesh.positions - np.asarray(center)) * scale)


def normalize_unit(mesh):
    center, scale = normalization_transform(mesh)
    return apply_transform(mesh, center, scale)


# --------------------------------------------------------------------------- OBJ


def _resolve(index, count, what, lineno):
    i = int(index)
    i = i - 1 if i > 0 else count + i
    if not 0 <= i < count:
        raise MeshError(f"line {lineno}: {what} index {index} out of range (have {count})")
    return i


def load_mesh(path):
    positions, texcoords, normals = [], [], []
    faces = []  # list of (v, vt|None, vn|None) triples per triangle
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                positions.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                texcoords.append([float(x) for x in parts[1:3]])
            elif tag == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                corners = []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    v = _resolve(fields[0], len(positions), "vertex", lineno)
                    vt = _resolve(fields[1], len(texcoords), "texcoord", lineno) if len(fields) > 1 and fields[1] else None
                    vn = _resolve(fields[2], len(normals), "normal", lineno) if len(fields) > 2 and fields[2] else None
                    corners.append((v, vt, vn))
                if len(corners) < 3:
                    raise MeshError(f"line {lineno}: face with fewer than 3 vertices")
                for k in range(1, len(corners) - 1):
                    faces.append((corners[0], corners[k], corners[k + 1]))

    kept = [f for f in faces if len({c[0] for c in f}) == 3]
    if len(kept) < len(faces):
        warn(f"{path}: dropped {len(faces) - len(kept)} faces that repeat a vertex")
    if not kept:
        raise MeshError(f"{path}: mesh has zero triangles")

    positions = np.array(positions, dtype=np.float64)
    triangles = np.array([[c[0] for c in f] for f in kept], dtype=np.int64)

    corner_uvs = None
    if all(c[1] is not None for f in kept for c in f):
        tc = np.array(texcoords, dtype=np.float64)
        corner_uvs = tc[np.array([[c[1] for c in f] for f in kept])]
    elif texcoords:
        warn(f"{path}: some faces lack texture coordinates; mesh is not bake-ready")

    vertex_normals = None
    if normals and all(c[2] is not None for f in kept for c in f):
        vn = np.array(normals, dtype=np.float64)
        acc = np.zeros_like(positions)
        for k in range(3):
            np.add.at(acc, triangles[:, k], vn[[f[k][2] for f in kept]])
        norm = np.linalg.norm(acc, axis=1)
        if np.all(norm > 0):
            vertex_normals = acc / norm[:, None]

    mesh = make_mesh(positions, triangles, corner_uvs, vertex_normals)
    if corner_uvs is not None and not mesh.bake_ready:
        warn(f"{path}: UVs outside [0,1] or with zero-area footprints; mesh is not bake-ready")
    return mesh


def save_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"# {mesh.n_vertices} vertices, {mesh.n_faces} faces\n")
        for p in mesh.positions:
            fh.write(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        if mesh.corner_uvs is not None:
            for uv in mesh.corner_uvs.reshape(-1, 2):
                fh.write(f"vt {float(uv[0])!r} {float(uv[1])!r}\n")
        for n in mesh.vertex_normals:
            fh.write(f"vn {float(n[0])!r} {float(n[1])!r} {float(n[2])!r}\n")
        for f, tri in enumerate(mesh.triangles + 1):
            if mesh.corner_uvs is not None:
                t = 3 * f + 1
                fh.write(f"f {tri[0]}/{t}/{tri[0]} {tri[1]}/{t + 1}/{tri[1]} {tri[2]}/{t + 2}/{tri[2]}\n")
            else:
                fh.write(f"f {tri[0]}//{tri[0]} {tri[1]}//{tri[1]} {tri[2]}//{tri[2]}\n")


# ------------------------------------------------------------------ fallback atlas

DEFAULT_GUTTER = 2.0  # texels between charts
MIN_CHART_SIDE = 4.0


def _corner_angles(p):
    angles = np.empty(p.shape[:2])
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        cos = np.divide((a * b).sum(1), denom, out=np.ones(len(p)), where=denom > 0)
        angles[:, k] = np.arccos(np.clip(cos, -1.0, 1.0))
    return angles


def _locality_order(mesh, grid):
    """Face order that fills the chart grid row by row so that neighbouring
    cells hold nearby surface: rows are latitude bands of the centroid
    direction around the bbox centre, columns run along longitude."""
    lo, hi = mesh.bbox()
    d = mesh.positions[mesh.triangles].mean(axis=1) - (lo + hi) / 2.0
    norm = np.linalg.norm(d, axis=1)
    d = np.divide(d, norm[:, None], out=np.zeros_like(d), where=norm[:, None] > 0)
    lat = np.arcsin(np.clip(d[:, 1], -1.0, 1.0))
    lon = np.arctan2(d[:, 0], d[:, 2])
    by_lat = np.lexsort((lon, lat))
    per_row = 2 * grid
    order = []
    for r in range(0, len(by_lat), per_row):
        row = by_lat[r:r + per_row]
        order.append(row[np.lexsort((row, lon[row]))])
    return np.concatenate(order)


def generate_fallback_atlas(mesh, texture_resolution, gutter=DEFAULT_GUTTER):
    """Give every triangle its own right-triangle chart.

    Cells of a uniform grid each hold two charts split along the diagonal;
    the widest corner of each triangle lands on the right angle, and charts
    of nearby faces land in nearby cells. Charts are separated by at least
    ``gutter`` texels (at least 2) at ``texture_resolution``.
    """
    if gutter < 2.0:
        raise ValueError("gutter must be at least 2 texels")
    n = mesh.n_faces
    if n == 0:
        raise MeshError("cannot atlas a mesh with zero triangles")
    res = float(texture_resolution)
    grid = math.ceil(math.sqrt(math.ceil(n / 2)))
    cell = res / grid
    # half the gutter on each cell border; hypotenuses step 0.75 * gutter
    # along both axes off the diagonal, which leaves 1.06 * gutter between them
    m, d = gutter / 2.0, 0.75 * gutter
    leg = cell - 2 * m - d
    if leg < MIN_CHART_SIDE:
        raise MeshError(
            f"{n} triangles give {leg:.2f}-texel charts at resolution {texture_resolution}; "
            f"use a texture resolution of at least {math.ceil(grid * (MIN_CHART_SIDE + 2 * m + d))} or a narrower gutter"
        )

    # chart corners in cell-local texel coordinates (x right, y down); right angle first
    lower = np.array([[m, m], [m + leg, m], [m, m + leg]])
    upper = np.array([[cell - m, cell - m], [cell - m - leg, cell - m], [cell - m, cell - m - leg]])

    slot = np.empty(n, dtype=np.int64)
    slot[_locality_order(mesh, grid)] = np.arange(n)
    cells = slot // 2
    origin = np.stack([(cells % grid) * cell, (cells // grid) * cell], axis=1)
    local = np.where((slot % 2 == 0)[:, None, None], lower, upper)
    texel_xy = origin[:, None, :] + local

    # rotate so the widest corner of each triangle maps to the right angle
    widest = np.argmax(_corner_angles(mesh.positions[mesh.triangles]), axis=1)
    order = (widest[:, None] + np.arange(3)[None, :]) % 3
    uv = np.empty((n, 3, 2))
    rows = np.arange(n)[:, None]
    uv[rows, order, 0] = texel_xy[:, :, 0] / res
    uv[rows, order, 1] = 1.0 - texel_xy[:, :, 1] / res
    return replace(mesh, corner_uvs=np.clip(uv, 0.0, 1.0))
