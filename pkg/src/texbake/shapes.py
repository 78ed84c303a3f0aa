"""Procedural meshes and textures for tests, demos and the acceptance runs."""

import numpy as np

from texbake.geometry import make_mesh


def icosphere(subdivisions=4, radius=0.5):
    """Icosahedron subdivided ``subdivisions`` times, 20 * 4**subdivisions faces."""
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return make_mesh(np.array(verts) * radius, np.array(faces))


def spherical_uvs(mesh):
    """Longitude/latitude wedge UVs; seam-crossing and polar corners are patched
    so every coordinate stays inside [0,1]."""
    p = mesh.positions[mesh.triangles]
    r = np.linalg.norm(p, axis=2)
    u = np.arctan2(p[..., 0], p[..., 2]) / (2 * np.pi) + 0.5
    v = np.arcsin(np.clip(p[..., 1] / r, -1, 1)) / np.pi + 0.5
    wraps = u.max(axis=1) - u.min(axis=1) > 0.5
    u[wraps] = np.where(u[wraps] < 0.5, 1.0, u[wraps])
    polar = np.hypot(p[..., 0], p[..., 2]) < 1e-9 * r
    for f, k in zip(*np.nonzero(polar)):
        others = [j for j in range(3) if j != k]
        u[f, k] = u[f, others].mean()
    return make_mesh(mesh.positions, mesh.triangles, np.stack([u, v], axis=-1), mesh.vertex_normals)


def cube(size=1.0, flat=True):
    """Axis-aligned cube centred at the origin, 12 outward-facing triangles.

    With ``flat`` every face has its own four vertices, so vertex normals
    equal face normals; otherwise the 8 corners are shared.
    """
    h = size / 2.0
    verts = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    # vertex index = 4*ix + 2*iy + iz
    quads = [
        (1, 5, 7, 3),  # +z
        (4, 0, 2, 6),  # -z
        (5, 4, 6, 7),  # +x
        (0, 1, 3, 2),  # -x
        (3, 7, 6, 2),  # +y
        (0, 4, 5, 1),  # -y
    ]
    if flat:
        verts = verts[np.array(quads).ravel()]
        quads = [tuple(range(4 * k, 4 * k + 4)) for k in range(6)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return make_mesh(verts, np.array(faces))


def grid_plane(n=8, size=1.0):
    """Flat n x n quad grid in the z=0 plane facing +z, 2*n*n triangles."""
    xs = np.linspace(-size / 2, size / 2, n + 1)
    xx, yy = np.meshgrid(xs, xs)
    verts = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    faces = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b, c, d = a + 1, a + n + 2, a + n + 1
            faces += [(a, b, c), (a, c, d)]
    uv = (verts[:, :2] / size + 0.5)[np.array(faces)]
    return make_mesh(verts, np.array(faces), uv)


def smooth_color_field(points):
    """Smooth RGB pattern over 3D points, values in [0.1, 0.9]."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    r = 0.5 + 0.4 * np.sin(2.0 * np.pi * (1.1 * x + 0.4 * y))
    g = 0.5 + 0.4 * np.sin(2.0 * np.pi * (0.9 * y - 0.6 * z) + 1.0)
    b = 0.5 + 0.4 * np.cos(2.0 * np.pi * (0.8 * z + 0.5 * x) - 0.5)
    return np.stack([r, g, b], axis=-1)


def bake_field_texture(mesh, resolution, field=smooth_color_field):
    """Texture whose texels hold ``field`` evaluated at the surface point they map to.

    Gutter texels take the value of the nearest chart point so bilinear lookups
    near chart borders stay on-surface.
    """
    from texbake.raster import texel_surface_map

    tri, bary = texel_surface_map(mesh, resolution)
    pts = np.einsum("hwk,hwkd->hwd", bary, mesh.positions[mesh.triangles[tri]])
    return np.clip(field(pts), 0.0, 1.0)
