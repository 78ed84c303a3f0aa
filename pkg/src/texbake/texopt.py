"""Incremental multi-view texture optimization.

A high-resolution texture T and a low-resolution texture t are fitted to
each view's target image through bilinear lookups at fixed UVs. A texel
of T that no rendered pixel's bilinear footprint reaches gets no gradient
from the view loss (a point gap). The self-supervision term compares the
box-downsampled T with t over the UV coverage mask and pushes the block
average into every texel of a block, so gaps inside covered blocks move
with their neighbours.
"""

from dataclasses import dataclass, field, asdict
import math
import time

import numpy as np

from texbake import bilinear
from texbake.diagnostics import warn
from texbake.geometry import MeshError, generate_fallback_atlas
from texbake.raster import (
    classify_keep_update,
    checkerboard_band,
    depth_for_export,
    rasterize,
    rasterize_uv_coverage,
    texel_centers_uv,
)
from texbake.imagesource import (
    GenerationParams,
    ImageSourceError,
    ViewRequest,
    blend_keep_update,
    pair_symmetric_views,
)

BACKGROUND = 1.0


@dataclass(eq=False)
class Texture:
    data: np.ndarray  # (H, W, 3) in [0, 1]
    update_magnitude: np.ndarray = None  # (H, W), accumulated |applied update|

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("texture data must have shape (H, W, 3)")
        if self.update_magnitude is None:
            self.update_magnitude = np.zeros(self.data.shape[:2])

    @classmethod
    def filled(cls, width, height, value=1.0):
        return cls(np.full((height, width, 3), float(value)))

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    def copy(self):
        return Texture(self.data.copy(), self.update_magnitude.copy())


@dataclass
class BakeConfig:
    hi_resolution: int = 1024
    lo_resolution: int = None  # defaults to hi_resolution // 4
    steps_per_view: int = 200
    learning_rate: float = 0.01
    uv_loss_weight: float = 1.0
    keep_update_threshold: float = math.pi / 5
    literal_angle: bool = False
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkerboard_keep_blend: bool = False
    checkerboard_band: int = 8
    init_texture: str = "white"
    seed: int = 0
    prompt: str = ""
    negative_prompt: str = ""
    denoise_steps: int = 100
    noise_strength: float = None  # 0.6 with a rough init texture, 1.0 from white
    gap_epsilon: float = 1e-9

    def __post_init__(self):
        if self.lo_resolution is None:
            self.lo_resolution = self.hi_resolution // 4
        if self.hi_resolution < 1 or self.lo_resolution < 1:
            raise ValueError("resolutions must be positive")
        if self.hi_resolution % self.lo_resolution:
            raise ValueError("lo_resolution must divide hi_resolution")
        if self.steps_per_view < 1:
            raise ValueError("steps_per_view must be at least 1")
        if not self.learning_rate > 0 or self.uv_loss_weight < 0:
            raise ValueError("learning_rate must be positive and uv_loss_weight non-negative")
        if not 0 < self.keep_update_threshold < math.pi / 2:
            raise ValueError("keep_update_threshold must lie in (0, pi/2)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.noise_strength is None:
            self.noise_strength = 1.0 if self.init_texture == "white" else 0.6

    @property
    def factor(self):
        return self.hi_resolution // self.lo_resolution

    def to_dict(self):
        return asdict(self)


def _array(tex):
    return tex.data if isinstance(tex, Texture) else np.asarray(tex, dtype=np.float64)


# ----------------------------------------------------------------- primitives


def sample_bilinear(texture, uv):
    """Colour at one uv point plus its footprint as ((row, col), weight) pairs.

    Zero weights are dropped and clamped duplicates merged, so the footprint
    lists exactly the texels that receive gradient.
    """
    data = _array(texture)
    h, w, _ = data.shape
    idx, wt = bilinear.footprint(np.asarray(uv, dtype=np.float64)[None], w, h)
    merged = {}
    for i, x in zip(idx[0].tolist(), wt[0].tolist()):
        if x > 0:
            merged[i] = merged.get(i, 0.0) + x
    color = sum(x * data.reshape(-1, 3)[i] for i, x in merged.items())
    return np.asarray(color), [((i // w, i % w), x) for i, x in sorted(merged.items())]


def render_view(texture, gbuffer):
    """Image of the texture through the G-buffer's fixed UVs; background is white."""
    h, w = gbuffer.shape
    out = np.full((h * w, 3), BACKGROUND)
    cov = gbuffer.coverage.ravel()
    if cov.any():
        out[cov] = bilinear.sample(_array(texture), gbuffer.uv.reshape(-1, 2)[cov])
    return out.reshape(h, w, 3)


def view_loss_and_grad(texture, gbuffer, target, pixel_mask):
    """Mean over masked pixels of the squared RGB error and its texel gradient."""
    data = _array(texture)
    h, w, _ = data.shape
    pix = np.flatnonzero(pixel_mask & gbuffer.coverage)
    grad = np.zeros_like(data)
    if len(pix) == 0:
        warn("empty pixel mask: view loss is zero")
        return 0.0, grad
    A = bilinear.footprint_matrix(gbuffer.uv.reshape(-1, 2)[pix], w, h)
    resid = A @ data.reshape(-1, 3) - target.reshape(-1, 3)[pix]
    n = len(pix)
    loss = float((resid ** 2).sum() / n)
    grad = (A.T @ (2.0 * resid / n)).reshape(data.shape)
    return loss, grad


def _blocks(data, factor):
    """(H/f * W/f, f*f, C) view of factor x factor blocks in row-major block order."""
    h, w, c = data.shape
    b = data.reshape(h // factor, factor, w // factor, factor, c).transpose(0, 2, 1, 3, 4)
    return b.reshape(-1, factor * factor, c)


def _block_texel_index(hi_width, factor, blocks):
    """Flat hi-resolution texel indices (nB, f*f) of the given flat block ids."""
    lo_width = hi_width // factor
    by, bx = np.divmod(np.asarray(blocks), lo_width)
    dy, dx = np.divmod(np.arange(factor * factor), factor)
    return (by[:, None] * factor + dy) * hi_width + bx[:, None] * factor + dx


def downsample_box(texture, factor):
    """Unweighted mean over factor x factor blocks."""
    data = _array(texture)
    h, w, c = data.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide texture size {w}x{h}")
    return _blocks(data, factor).mean(axis=1).reshape(h // factor, w // factor, c)


def downsample_adjoint(grad_lo, factor):
    """Adjoint of downsample_box: each block texel gets the block gradient / factor**2."""
    up = np.repeat(np.repeat(grad_lo, factor, axis=0), factor, axis=1)
    return up / (factor * factor)


def uv_self_supervision(T, t, coverage_lo):
    """MSE between downsampled T and t over the lo-resolution coverage mask.

    The gradient flows into T only; t is a fixed reference here.
    """
    hi, lo = _array(T), _array(t)
    if hi.shape[0] % lo.shape[0] or hi.shape[1] % lo.shape[1]:
        raise ValueError("lo resolution must divide hi resolution")
    factor = hi.shape[0] // lo.shape[0]
    n = int(coverage_lo.sum())
    if n == 0:
        raise ValueError("coverage mask is empty")
    diff = (downsample_box(hi, factor) - lo) * coverage_lo[..., None]
    loss = float((diff ** 2).sum() / n)
    return loss, downsample_adjoint(2.0 * diff / n, factor)


def upsample_nearest(t, factor):
    return np.repeat(np.repeat(_array(t), factor, axis=0), factor, axis=1)


def resample_texture(data, resolution):
    """Bilinear resample onto a square texture with the same uv addressing."""
    uv = texel_centers_uv(resolution, resolution).reshape(-1, 2)
    return np.clip(bilinear.sample(data, uv).reshape(resolution, resolution, 3), 0.0, 1.0)


# ------------------------------------------------------------------ optimizer


class _Adam:
    def __init__(self, shape, lr, beta1, beta2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.k = 0

    def step(self, x, g):
        self.k += 1
        self.m *= self.b1
        self.m += (1.0 - self.b1) * g
        self.v *= self.b2
        self.v += (1.0 - self.b2) * (g * g)
        step = np.sqrt(self.v / (1.0 - self.b2 ** self.k))
        step += self.eps
        np.divide(self.m, step, out=step)
        step *= self.lr / (1.0 - self.b1 ** self.k)
        return x - step


class _SGD:
    def __init__(self, shape, lr, *_):
        self.lr = lr

    def step(self, x, g):
        return x - self.lr * g


def _make_optimizer(config, shape):
    cls = _Adam if config.optimizer == "adam" else _SGD
    return cls(shape, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)


@dataclass
class ViewLog:
    loss_hi: list = field(default_factory=list)
    loss_lo: list = field(default_factory=list)
    loss_uv: list = field(default_factory=list)
    n_pixels: int = 0
    n_active_texels: int = 0


def optimize_view(T, t, gbuffer, target, update_mask, config, coverage_lo=None):
    """Fit T and t to one view's target on the update mask.

    Every step takes (a) the view loss gradient for T, (b) the view loss
    gradient for t on the same pixels and (c) the weighted self-supervision
    gradient for T, then applies one optimizer step to each texture and
    clamps to [0, 1].

    Only texels that can receive a nonzero gradient during this view are
    carried through the loop: the footprints of T and t, plus every T texel
    in a covered block that the footprints touch or where the block average
    already differs from t. Any other texel has zero gradient at every step
    and would not move. Optimizer state starts fresh for each view.

    Returns new (T, t) textures and a ViewLog of per-step losses.
    """
    Th, Tw = T.height, T.width
    th, tw = t.height, t.width
    factor = Tw // tw
    lam = config.uv_loss_weight
    use_uv = lam > 0
    if use_uv and coverage_lo is None:
        coverage_lo = np.ones((th, tw), dtype=bool)

    pix = np.flatnonzero(update_mask & gbuffer.coverage)
    n_pix = len(pix)
    if n_pix == 0:
        warn(f"view '{gbuffer.camera.descriptor}': empty update mask, view loss is zero")
    uv = gbuffer.uv.reshape(-1, 2)[pix]
    Y = target.reshape(-1, 3)[pix]
    A_hi = bilinear.footprint_matrix(uv, Tw, Th)
    A_lo = bilinear.footprint_matrix(uv, tw, th)
    hi_cols = np.unique(A_hi.indices[A_hi.data != 0])
    lo_cols = np.unique(A_lo.indices[A_lo.data != 0])

    T_flat = T.data.reshape(-1, 3)
    t_flat = t.data.reshape(-1, 3)

    if use_uv:
        n_uv = int(coverage_lo.sum())
        if n_uv == 0:
            raise ValueError("UV coverage mask is empty")
        cov = coverage_lo.ravel()
        differ = (downsample_box(T.data, factor).reshape(-1, 3) != t_flat).any(axis=1)
        touched = np.zeros(th * tw, dtype=bool)
        touched[lo_cols] = True
        hy, hx = np.divmod(hi_cols, Tw)
        touched[(hy // factor) * tw + hx // factor] = True
        blocks = np.flatnonzero(cov & (differ | touched))
        block_texels = _block_texel_index(Tw, factor, blocks)
        active_T = np.union1d(hi_cols, block_texels.ravel())
        block_pos = np.searchsorted(active_T, block_texels)
        # the reference t for a block moves only if t's own footprint covers it
        t_ref_fixed = t_flat[blocks].copy()
        t_ref_pos = np.searchsorted(lo_cols, blocks)
        t_ref_live = np.isin(blocks, lo_cols)
    else:
        active_T = hi_cols
    active_t = lo_cols

    A_T = A_hi[:, active_T].tocsr()
    A_t = A_lo[:, active_t].tocsr()
    A_T_t = A_T.T.tocsr()
    A_t_t = A_t.T.tocsr()
    xT = T_flat[active_T].copy()
    xt = t_flat[active_t].copy()
    moved_T = np.zeros(len(active_T))
    moved_t = np.zeros(len(active_t))
    opt_T = _make_optimizer(config, xT.shape)
    opt_t = _make_optimizer(config, xt.shape)
    log = ViewLog(n_pixels=n_pix, n_active_texels=len(active_T))
    scale = 2.0 / n_pix if n_pix else 0.0

    for _ in range(config.steps_per_view):
        if n_pix:
            rT = A_T @ xT - Y
            rt = A_t @ xt - Y
            log.loss_hi.append(float((rT * rT).sum() / n_pix))
            log.loss_lo.append(float((rt * rt).sum() / n_pix))
            gT = A_T_t @ (scale * rT)
            gt = A_t_t @ (scale * rt)
        else:
            log.loss_hi.append(0.0)
            log.loss_lo.append(0.0)
            gT = np.zeros_like(xT)
            gt = np.zeros_like(xt)
        if use_uv:
            t_ref = t_ref_fixed.copy()
            t_ref[t_ref_live] = xt[t_ref_pos[t_ref_live]]
            d = xT[block_pos].mean(axis=1) - t_ref
            log.loss_uv.append(float((d * d).sum() / n_uv))
            gT[block_pos] += (lam * 2.0 / (n_uv * factor * factor)) * d[:, None, :]
        else:
            log.loss_uv.append(0.0)

        newT = np.clip(opt_T.step(xT, gT), 0.0, 1.0)
        newt = np.clip(opt_t.step(xt, gt), 0.0, 1.0)
        moved_T += np.abs(newT - xT).sum(axis=1)
        moved_t += np.abs(newt - xt).sum(axis=1)
        xT, xt = newT, newt

    T_out, t_out = T.copy(), t.copy()
    T_out.data.reshape(-1, 3)[active_T] = xT
    T_out.update_magnitude.reshape(-1)[active_T] += moved_T
    t_out.data.reshape(-1, 3)[active_t] = xt
    t_out.update_magnitude.reshape(-1)[active_t] += moved_t
    return T_out, t_out, log


def scan_point_gaps(T, coverage_hi, epsilon=1e-9):
    """Covered texels whose accumulated update never exceeded ``epsilon``."""
    gaps = coverage_hi & (T.update_magnitude <= epsilon)
    return int(gaps.sum()), gaps


# ----------------------------------------------------------------------- bake


class BakeAborted(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def initial_texture(config):
    if config.init_texture == "white":
        return Texture.filled(config.hi_resolution, config.hi_resolution, 1.0)
    if isinstance(config.init_texture, np.ndarray):
        rough = config.init_texture
    else:
        from texbake.imageio import read_rgb

        rough = read_rgb(config.init_texture)
    return Texture(resample_texture(rough, config.hi_resolution))


def atlas_for_bake(mesh, config):
    """Fallback atlas at the hi resolution whose gutters span two lo texels,
    so no lo-resolution bilinear footprint or box block reaches two charts.
    Falls back to the minimum gutter when the charts would get too small."""
    try:
        return generate_fallback_atlas(mesh, config.hi_resolution, gutter=max(2.0, 2.0 * config.factor))
    except MeshError:
        warn("too many triangles for two lo-texel gutters; using the minimum gutter")
        return generate_fallback_atlas(mesh, config.hi_resolution)


def bake(mesh, view_plan, image_source, config, on_view=None):
    """Run the incremental bake over every view group of the plan.

    Returns the final high-resolution texture, a JSON-ready report and the
    final low-resolution texture. If the
    image source fails, raises BakeAborted carrying the partial report; the
    texture is never touched by a view whose targets did not arrive.
    """
    if not mesh.bake_ready:
        raise ValueError("mesh is not bake-ready: corner UVs missing, outside [0,1] or degenerate")
    started = time.perf_counter()
    timings = {"rasterize": 0.0, "generate": 0.0, "optimize": 0.0, "coverage": 0.0}

    T = initial_texture(config)
    t = Texture(downsample_box(T, config.factor))
    tic = time.perf_counter()
    coverage_lo = rasterize_uv_coverage(mesh, config.lo_resolution)
    timings["coverage"] += time.perf_counter() - tic
    if not coverage_lo.any():
        raise ValueError("mesh UVs cover no texel at the low resolution")

    groups = pair_symmetric_views(view_plan)
    params = GenerationParams(
        prompt=config.prompt,
        negative_prompt=config.negative_prompt,
        denoise_steps=config.denoise_steps,
        noise_strength=config.noise_strength,
        seed=config.seed,
    )
    report = {
        "config": {k: (v if not isinstance(v, np.ndarray) else "<array>") for k, v in config.to_dict().items()},
        "mesh": {"n_vertices": mesh.n_vertices, "n_faces": mesh.n_faces},
        "groups": [list(g) for g in groups],
        "n_gbuffers": 0,
        "views": [],
        "timings": timings,
    }

    for g_index, group in enumerate(groups):
        tic = time.perf_counter()
        gbuffers = [rasterize(mesh, view_plan.cameras[i]) for i in group]
        report["n_gbuffers"] += len(gbuffers)
        requests = []
        for i, gb in zip(group, gbuffers):
            update = classify_keep_update(gb, config.keep_update_threshold, config.literal_angle)
            if config.checkerboard_keep_blend:
                update = checkerboard_band(update, gb.coverage, config.checkerboard_band)
            requests.append(
                ViewRequest(
                    index=i,
                    camera=gb.camera,
                    depth=depth_for_export(gb),
                    init=render_view(T, gb),
                    update_mask=update,
                )
            )
        timings["rasterize"] += time.perf_counter() - tic

        tic = time.perf_counter()
        try:
            images = image_source.generate(requests, params._replace(seed=config.seed + g_index))
        except ImageSourceError as exc:
            report["aborted"] = f"{type(exc).__name__}: {exc}"
            timings["total"] = time.perf_counter() - started
            raise BakeAborted(str(exc), report) from exc
        timings["generate"] += time.perf_counter() - tic

        for req, gb, image in zip(requests, gbuffers, images):
            target = blend_keep_update(image, req.init, req.update_mask)
            tic = time.perf_counter()
            T, t, log = optimize_view(T, t, gb, target, req.update_mask, config, coverage_lo)
            timings["optimize"] += time.perf_counter() - tic
            entry = {
                "index": req.index,
                "descriptor": req.camera.descriptor,
                "camera": req.camera.to_dict(),
                "group": g_index,
                "n_covered": int(gb.coverage.sum()),
                "n_update": int(req.update_mask.sum()),
                "n_active_texels": log.n_active_texels,
                "loss_hi": log.loss_hi,
                "loss_lo": log.loss_lo,
                "loss_uv": log.loss_uv,
            }
            report["views"].append(entry)
            if on_view is not None:
                on_view(entry, T, t, target, gb)

    tic = time.perf_counter()
    coverage_hi = rasterize_uv_coverage(mesh, config.hi_resolution)
    timings["coverage"] += time.perf_counter() - tic
    count, _ = scan_point_gaps(T, coverage_hi, config.gap_epsilon)
    n_cov = int(coverage_hi.sum())
    report["gaps"] = {
        "epsilon": config.gap_epsilon,
        "count": count,
        "coverage_texels": n_cov,
        "fraction": count / n_cov if n_cov else 0.0,
    }
    timings["total"] = time.perf_counter() - started
    return T, report, t


def strip_volatile(report):
    """Report without wall-clock fields, for reproducibility comparisons."""
    return {k: v for k, v in report.items() if k not in ("timings", "created", "paths")}
