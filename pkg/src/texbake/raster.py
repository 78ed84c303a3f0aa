"""CPU rasterization: orbit cameras, per-view G-buffers, keep/update
partition and UV-space coverage masks.

Everything is vectorized over (triangle, candidate pixel) pairs and resolved
with a deterministic z-buffer: nearest depth wins, ties go to the lower
triangle id, so results do not depend on the chunking.
"""

from dataclasses import dataclass, asdict
import math

import numpy as np
from scipy import ndimage

from texbake import bilinear
from texbake.diagnostics import warn

DEFAULT_RADIUS = 2.0
DEFAULT_FOV_Y = math.radians(45.0)
DEFAULT_IMAGE_SIZE = 1024
FLAT_GRAY = 0.8
BACKGROUND = 1.0
NEAR = 1e-3
CHUNK_CANDIDATES = 1 << 21
EDGE_EPS = 1e-10

ORBIT_DESCRIPTORS = (
    "front", "left front", "left", "left back",
    "back", "right back", "right", "right front",
)


@dataclass(frozen=True)
class Camera:
    azimuth: float
    elevation: float
    radius: float = DEFAULT_RADIUS
    fov_y: float = DEFAULT_FOV_Y
    width: int = DEFAULT_IMAGE_SIZE
    height: int = DEFAULT_IMAGE_SIZE
    descriptor: str = ""

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("camera radius must be positive")
        if not 0 < self.fov_y < math.pi:
            raise ValueError("fov_y must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def eye(self):
        ce = math.cos(self.elevation)
        return self.radius * np.array(
            [ce * math.sin(self.azimuth), math.sin(self.elevation), ce * math.cos(self.azimuth)]
        )

    def frame(self):
        """(eye, right, up, forward); looks at the origin with +Y up."""
        eye = self.eye
        forward = -eye / np.linalg.norm(eye)
        up_hint = np.array([0.0, 1.0, 0.0])
        if abs(forward @ up_hint) > 1.0 - 1e-9:
            # at the poles the image top points toward -Z from above, +Z from below
            up_hint = np.array([0.0, 0.0, -1.0 if forward[1] < 0 else 1.0])
        right = np.cross(forward, up_hint)
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return eye, right, up, forward

    @property
    def focal_px(self):
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if k != "descriptor"}

    @classmethod
    def from_dict(cls, d, descriptor=""):
        return cls(
            azimuth=float(d["azimuth"]),
            elevation=float(d["elevation"]),
            radius=float(d["radius"]),
            fov_y=float(d["fov_y"]),
            width=int(d["width"]),
            height=int(d["height"]),
            descriptor=descriptor,
        )


@dataclass(frozen=True)
class ViewPlan:
    cameras: tuple
    symmetric_pairs: tuple = ()

    def __post_init__(self):
        seen = set()
        for i, j in self.symmetric_pairs:
            if i in seen or j in seen:
                raise ValueError("a camera may belong to at most one symmetric pair")
            seen.update((i, j))
            a, b = self.cameras[i], self.cameras[j]
            if (a.elevation, a.radius, a.fov_y, a.width, a.height) != (
                b.elevation, b.radius, b.fov_y, b.width, b.height
            ):
                raise ValueError(f"paired cameras {i} and {j} differ in pose class or image size")

    def __len__(self):
        return len(self.cameras)

    def subset(self, n):
        """First ``n`` cameras, keeping only pairs whose members both survive."""
        pairs = tuple((i, j) for i, j in self.symmetric_pairs if i < n and j < n)
        return ViewPlan(tuple(self.cameras[:n]), pairs)


def make_view_plan(image_size=DEFAULT_IMAGE_SIZE, radius=DEFAULT_RADIUS, fov_y=DEFAULT_FOV_Y):
    """Eight orbit views around the equator plus top and bottom."""
    if isinstance(image_size, int):
        width = height = image_size
    else:
        width, height = image_size
    cams = [
        Camera(k * math.pi / 4, 0.0, radius, fov_y, width, height, name)
        for k, name in enumerate(ORBIT_DESCRIPTORS)
    ]
    cams.append(Camera(0.0, math.pi / 2, radius, fov_y, width, height, "top"))
    cams.append(Camera(0.0, -math.pi / 2, radius, fov_y, width, height, "bottom"))
    return ViewPlan(tuple(cams), ((0, 4), (1, 5), (2, 6), (3, 7)))


@dataclass(frozen=True, eq=False)
class GBuffer:
    camera: Camera
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), +inf where uncovered
    normal: np.ndarray  # (H, W, 3), zero where uncovered
    uv: np.ndarray  # (H, W, 2), zero where uncovered
    tri_id: np.ndarray  # (H, W) int64, -1 where uncovered
    facing_cos: np.ndarray  # (H, W), zero where uncovered
    coverage: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.coverage.shape


def _project(points, camera):
    eye, right, up, forward = camera.frame()
    rel = points - eye
    zc = rel @ forward
    f = camera.focal_px
    sx = 0.5 * camera.width + f * (rel @ right) / zc
    sy = 0.5 * camera.height - f * (rel @ up) / zc
    return sx, sy, zc


def _chunks(counts, limit):
    start, acc = 0, 0
    for i, c in enumerate(counts):
        if acc and acc + c > limit:
            yield start, i
            start, acc = i, 0
        acc += c
    if start < len(counts):
        yield start, len(counts)


def _expand(tri_ids, x0, y0, nx, ny):
    """Enumerate the integer pixel grid of each triangle's bounding box."""
    counts = nx * ny
    total = int(counts.sum())
    rep = np.repeat(np.arange(len(tri_ids)), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(total) - starts[rep]
    return tri_ids[rep], x0[rep] + k % nx[rep], y0[rep] + k // nx[rep]


def _screen_barycentrics(px, py, x, y):
    """Edge-function barycentrics of points (px, py) in triangles with corners x, y (N, 3)."""
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    l0 = ((x[:, 1] - px) * (y[:, 2] - py) - (x[:, 2] - px) * (y[:, 1] - py)) / area2
    l1 = ((x[:, 2] - px) * (y[:, 0] - py) - (x[:, 0] - px) * (y[:, 2] - py)) / area2
    return np.stack([l0, l1, 1.0 - l0 - l1], axis=1)


def rasterize(mesh, camera, texture=None, cull_backfaces=True):
    """Z-buffered G-buffer of ``mesh`` seen from ``camera``.

    Pixel centres sit at (x + 0.5, y + 0.5). UVs, normals and world positions
    use perspective-correct barycentrics; depth is the camera-space distance
    along the viewing axis. With a texture the colour channel is its bilinear
    lookup, otherwise flat gray; the background is white.
    """
    if texture is not None and not mesh.bake_ready:
        raise ValueError("textured rasterization needs a bake-ready mesh (UVs in [0,1])")
    W, H = camera.width, camera.height
    n_pix = W * H
    depth_buf = np.full(n_pix, np.inf)
    tri_buf = np.full(n_pix, -1, dtype=np.int64)
    bary_buf = np.zeros((n_pix, 3))

    if mesh.n_faces:
        sx, sy, zc = _project(mesh.positions, camera)
        tri = mesh.triangles
        x, y, z = sx[tri], sy[tri], zc[tri]
        area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        keep = (z > NEAR).all(axis=1)
        if not keep.all():
            warn(f"{int((~keep).sum())} triangles cross the near plane and were skipped")
        # front faces (counter-clockwise in world) come out clockwise with y pointing down
        keep &= area2 < 0 if cull_backfaces else area2 != 0
        x0 = np.maximum(np.ceil(x.min(axis=1) - 0.5), 0)
        x1 = np.minimum(np.floor(x.max(axis=1) - 0.5), W - 1)
        y0 = np.maximum(np.ceil(y.min(axis=1) - 0.5), 0)
        y1 = np.minimum(np.floor(y.max(axis=1) - 0.5), H - 1)
        keep &= (x1 >= x0) & (y1 >= y0)
        ids = np.flatnonzero(keep)
        x0, y0 = x0[ids].astype(np.int64), y0[ids].astype(np.int64)
        nx = x1[ids].astype(np.int64) - x0 + 1
        ny = y1[ids].astype(np.int64) - y0 + 1

        for a, b in _chunks(nx * ny, CHUNK_CANDIDATES):
            t, px, py = _expand(ids[a:b], x0[a:b], y0[a:b], nx[a:b], ny[a:b])
            lam = _screen_barycentrics(px + 0.5, py + 0.5, x[t], y[t])
            inside = (lam >= -EDGE_EPS).all(axis=1)
            t, px, py, lam = t[inside], px[inside], py[inside], lam[inside]
            w = lam / z[t]
            inv_z = w.sum(axis=1)
            d = 1.0 / inv_z
            pix = py * W + px
            order = np.lexsort((t, d, pix))
            pix, d, t, w, inv_z = pix[order], d[order], t[order], w[order], inv_z[order]
            first = np.ones(len(pix), dtype=bool)
            first[1:] = pix[1:] != pix[:-1]
            pix, d, t, w, inv_z = pix[first], d[first], t[first], w[first], inv_z[first]
            better = (d < depth_buf[pix]) | ((d == depth_buf[pix]) & (t < tri_buf[pix]))
            pix = pix[better]
            depth_buf[pix] = d[better]
            tri_buf[pix] = t[better]
            bary_buf[pix] = w[better] / inv_z[better, None]

    coverage = tri_buf >= 0
    normal = np.zeros((n_pix, 3))
    uv = np.zeros((n_pix, 2))
    facing = np.zeros(n_pix)
    color = np.full((n_pix, 3), BACKGROUND)
    if coverage.any():
        cov = np.flatnonzero(coverage)
        t = tri_buf[cov]
        b = bary_buf[cov]
        corners = mesh.triangles[t]
        n = np.einsum("nk,nkd->nd", b, mesh.vertex_normals[corners])
        nn = np.linalg.norm(n, axis=1)
        n = np.divide(n, nn[:, None], out=np.zeros_like(n), where=nn[:, None] > 0)
        normal[cov] = n
        point = np.einsum("nk,nkd->nd", b, mesh.positions[corners])
        to_cam = camera.eye - point
        to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True)
        facing[cov] = np.clip((n * to_cam).sum(axis=1), -1.0, 1.0)
        if mesh.corner_uvs is not None:
            uv[cov] = np.clip(np.einsum("nk,nkd->nd", b, mesh.corner_uvs[t]), 0.0, 1.0)
        color[cov] = bilinear.sample(texture.data, uv[cov]) if texture is not None else FLAT_GRAY

    return GBuffer(
        camera=camera,
        color=color.reshape(H, W, 3),
        depth=depth_buf.reshape(H, W),
        normal=normal.reshape(H, W, 3),
        uv=uv.reshape(H, W, 2),
        tri_id=tri_buf.reshape(H, W),
        facing_cos=facing.reshape(H, W),
        coverage=coverage.reshape(H, W),
    )


def classify_keep_update(gbuffer, threshold=math.pi / 5, literal=False):
    """Boolean update mask; uncovered pixels are always keep.

    Default: update where the surface faces the camera within ``threshold``.
    ``literal`` inverts the comparison, making update the exact complement
    over covered pixels.
    """
    if not 0 < threshold < math.pi / 2:
        raise ValueError("threshold must lie in (0, pi/2)")
    facing = gbuffer.coverage & (gbuffer.facing_cos > math.cos(threshold))
    if literal:
        return gbuffer.coverage & ~facing
    return facing


def checkerboard_band(update, coverage, band=8):
    """Promote keep pixels within ``band`` pixels of the update region to update
    on a 2x2-cell checkerboard."""
    if not update.any():
        return update.copy()
    dist = ndimage.distance_transform_edt(~update)
    near = coverage & ~update & (dist <= band)
    yy, xx = np.indices(update.shape)
    cells = ((yy // 2 + xx // 2) % 2) == 0
    return update | (near & cells)


def depth_for_export(gbuffer):
    """Depth normalized over covered pixels to [0, 1] with near = 1, far = 0;
    uncovered pixels are 0."""
    out = np.zeros(gbuffer.shape)
    cov = gbuffer.coverage
    if cov.any():
        d = gbuffer.depth[cov]
        lo, hi = d.min(), d.max()
        out[cov] = (hi - d) / (hi - lo) if hi > lo else 1.0
    return out


# --------------------------------------------------------------------- UV space


def texel_centers_uv(width, height):
    """(H, W, 2) uv coordinates of texel centres."""
    u = (np.arange(width) + 0.5) / width
    v = 1.0 - (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def _uv_texel_xy(mesh, resolution):
    uv = mesh.corner_uvs
    return uv[..., 0] * resolution, (1.0 - uv[..., 1]) * resolution


def _uv_candidates(x, y, resolution, pad):
    x0 = np.maximum(np.ceil(x.min(axis=1) - pad - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(x.max(axis=1) + pad - 0.5), resolution - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(y.min(axis=1) - pad - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(y.max(axis=1) + pad - 0.5), resolution - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    ids = np.arange(len(x))
    for a, b in _chunks(nx * ny, CHUNK_CANDIDATES):
        yield _expand(ids[a:b], x0[a:b], y0[a:b], nx[a:b], ny[a:b])


def _segment_closest(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    len2 = dx * dx + dy * dy
    s = np.divide((px - ax) * dx + (py - ay) * dy, len2, out=np.zeros_like(px), where=len2 > 0)
    s = np.clip(s, 0.0, 1.0)
    return np.hypot(px - (ax + s * dx), py - (ay + s * dy)), s


def _closest_in_triangle(px, py, x, y):
    """Distance from points to triangles (0 inside) and barycentrics of the closest point."""
    lam = _screen_barycentrics(px, py, x, y)
    inside = (lam >= -EDGE_EPS).all(axis=1)
    dist = np.full(len(px), np.inf)
    bary = lam.copy()
    for k in range(3):
        a, b = k, (k + 1) % 3
        dk, s = _segment_closest(px, py, x[:, a], y[:, a], x[:, b], y[:, b])
        closer = ~inside & (dk < dist)
        dist[closer] = dk[closer]
        e = np.zeros((int(closer.sum()), 3))
        e[:, a] = 1.0 - s[closer]
        e[:, b] = s[closer]
        bary[closer] = e
    dist[inside] = 0.0
    return dist, np.clip(bary, 0.0, 1.0)


def rasterize_uv_coverage(mesh, resolution):
    """Texel mask M_V: texel centres inside, or within half a texel of, any UV triangle."""
    mask = np.zeros(resolution * resolution, dtype=bool)
    if mesh.n_faces == 0:
        return mask.reshape(resolution, resolution)
    if mesh.corner_uvs is None:
        raise ValueError("UV coverage needs corner UVs")
    x, y = _uv_texel_xy(mesh, resolution)
    for t, px, py in _uv_candidates(x, y, resolution, 0.5):
        dist, _ = _closest_in_triangle(px + 0.5, py + 0.5, x[t], y[t])
        hit = dist <= 0.5
        mask[py[hit] * resolution + px[hit]] = True
    return mask.reshape(resolution, resolution)


def uv_texel_claims(mesh, resolution):
    """Number of UV triangles strictly containing each texel centre."""
    claims = np.zeros(resolution * resolution, dtype=np.int64)
    x, y = _uv_texel_xy(mesh, resolution)
    for t, px, py in _uv_candidates(x, y, resolution, 0.0):
        lam = _screen_barycentrics(px + 0.5, py + 0.5, x[t], y[t])
        hit = (lam > 0).all(axis=1)
        np.add.at(claims, py[hit] * resolution + px[hit], 1)
    return claims.reshape(resolution, resolution)


def texel_surface_map(mesh, resolution, reach=2.0):
    """Closest UV triangle and barycentrics for texels within ``reach`` texels
    of a chart; the rest are filled from the nearest assigned texel."""
    n = resolution * resolution
    best = np.full(n, np.inf)
    tri = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    x, y = _uv_texel_xy(mesh, resolution)
    for t, px, py in _uv_candidates(x, y, resolution, reach):
        dist, b = _closest_in_triangle(px + 0.5, py + 0.5, x[t], y[t])
        pix = py * resolution + px
        order = np.lexsort((t, dist, pix))
        pix, dist, t, b = pix[order], dist[order], t[order], b[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, dist, t, b = pix[first], dist[first], t[first], b[first]
        better = (dist < best[pix]) | ((dist == best[pix]) & (t < tri[pix]))
        best[pix[better]] = dist[better]
        tri[pix[better]] = t[better]
        bary[pix[better]] = b[better]
    tri = tri.reshape(resolution, resolution)
    bary = bary.reshape(resolution, resolution, 3)
    missing = tri < 0
    if missing.any() and not missing.all():
        _, (iy, ix) = ndimage.distance_transform_edt(missing, return_indices=True)
        tri, bary = tri[iy, ix], bary[iy, ix]
    return tri, bary
