import math

import numpy as np
import pytest

from texbake import bilinear, shapes
from texbake.geometry import generate_fallback_atlas
from texbake.imagesource import ImageSourceError, OracleSource
from texbake.metrics import finite_diff_check
from texbake.raster import Camera, classify_keep_update, make_view_plan, rasterize, rasterize_uv_coverage
from texbake.texopt import (
    BakeAborted,
    BakeConfig,
    Texture,
    bake,
    downsample_adjoint,
    downsample_box,
    initial_texture,
    optimize_view,
    render_view,
    sample_bilinear,
    scan_point_gaps,
    strip_volatile,
    upsample_nearest,
    uv_self_supervision,
    view_loss_and_grad,
)


# ------------------------------------------------------------------ primitives


def test_sample_exact_centre_and_midpoint():
    tex = np.arange(12, dtype=float).reshape(2, 2, 3) / 12
    color, fp = sample_bilinear(tex, (0.5, 0.5))
    np.testing.assert_allclose(color, tex.reshape(4, 3).mean(axis=0))
    assert [w for _, w in fp] == [0.25] * 4
    color, fp = sample_bilinear(tex, (0.25, 0.75))
    np.testing.assert_allclose(color, tex[0, 0])
    assert fp == [((0, 0), 1.0)]


def test_sample_edge_clamps_and_weights_sum(rng):
    tex = rng.random((5, 7, 3))
    for uv in rng.random((50, 2)):
        color, fp = sample_bilinear(tex, uv)
        assert sum(w for _, w in fp) == pytest.approx(1.0)
        np.testing.assert_allclose(color, sum(w * tex[r, c] for (r, c), w in fp))
    color, _ = sample_bilinear(tex, (0.0, 1.0))
    np.testing.assert_allclose(color, tex[0, 0])


def test_sample_gradient_finite_differences(rng):
    worst = 0.0
    for _ in range(20):
        tex = rng.random((6, 6, 3))
        uv = rng.random((10, 2))
        wts = rng.normal(size=(10, 3))
        A = bilinear.footprint_matrix(uv, 6, 6)
        grad = (A.T @ wts).reshape(tex.shape)
        f = lambda x: float((bilinear.sample(x, uv) * wts).sum())
        worst = max(worst, finite_diff_check(f, tex, grad, samples=30, h=1e-4, rng=rng))
    assert worst < 1e-4


@pytest.fixture(scope="module")
def quad_view():
    mesh = shapes.grid_plane(2, size=0.8)
    cam = Camera(0.0, 0.0, width=40, height=40)
    return mesh, rasterize(mesh, cam)


def test_render_matches_textured_rasterization(small_sphere):
    mesh, tex = small_sphere
    cam = Camera(1.0, 0.4, width=96, height=96)
    gb_tex = rasterize(mesh, cam, Texture(tex))
    gb = rasterize(mesh, cam)
    np.testing.assert_allclose(render_view(Texture(tex), gb), gb_tex.color, atol=1e-6)
    np.testing.assert_allclose(render_view(Texture.filled(8, 8, 0.3), gb)[gb.coverage], 0.3)
    empty = rasterize(mesh, Camera(0.0, 0.0, radius=2.0, fov_y=0.01, width=8, height=8))
    if not empty.coverage.any():
        np.testing.assert_array_equal(render_view(Texture(tex), empty), 1.0)


def test_view_loss_closed_forms(quad_view, capsys):
    mesh, gb = quad_view
    tex = Texture(np.full((16, 16, 3), 0.4))
    target = render_view(tex, gb)
    loss, grad = view_loss_and_grad(tex, gb, target, gb.coverage)
    assert loss < 1e-28 and np.abs(grad).max() < 1e-14
    loss, grad = view_loss_and_grad(tex, gb, target, np.zeros_like(gb.coverage))
    assert loss == 0.0 and not grad.any()
    assert "WARN:" in capsys.readouterr().err


def test_view_loss_single_pixel_closed_form():
    tex = np.zeros((4, 4, 3))
    tex[1, 2] = [0.2, 0.4, 0.6]

    class OnePixel:
        uv = np.array([[[(2 + 0.5) / 4, 1 - (1 + 0.5) / 4]]])
        coverage = np.array([[True]])

    target = np.array([[[0.0, 0.0, 1.0]]])
    loss, grad = view_loss_and_grad(tex, OnePixel, target, OnePixel.coverage)
    assert loss == pytest.approx(0.04 + 0.16 + 0.16)
    np.testing.assert_allclose(grad[1, 2], 2 * (tex[1, 2] - target[0, 0]))
    grad[1, 2] = 0
    assert not grad.any()


def test_view_loss_gradient_finite_differences(small_sphere, rng):
    mesh, _ = small_sphere
    gb = rasterize(mesh, Camera(0.4, 0.2, width=48, height=48))
    mask = gb.coverage & (rng.random(gb.shape) < 0.5)
    worst = 0.0
    for _ in range(5):
        tex = rng.random((32, 32, 3))
        target = rng.random((48, 48, 3))
        _, grad = view_loss_and_grad(tex, gb, target, mask)
        f = lambda x: view_loss_and_grad(x, gb, target, mask)[0]
        support = np.flatnonzero(np.abs(grad).sum(axis=2).ravel() > 0)
        picks = rng.choice(support, 20, replace=False)
        for k in picks:
            one = np.zeros_like(tex)
            r, c = divmod(k, 32)
            one[r, c] = 1
            worst = max(worst, finite_diff_check(lambda x: f(tex + (x - tex) * one), tex, grad * one, samples=3, rng=rng))
    assert worst < 1e-4


def test_downsample_examples(rng):
    block = np.array([[[0, 0, 0], [1, 1, 1]], [[1, 1, 1], [0, 0, 0]]], dtype=float)
    np.testing.assert_allclose(downsample_box(block, 2), [[[0.5, 0.5, 0.5]]])
    np.testing.assert_allclose(downsample_box(np.full((8, 8, 3), 0.7), 4), np.full((2, 2, 3), 0.7))
    with pytest.raises(ValueError):
        downsample_box(np.zeros((6, 6, 3)), 4)
    T, Y = rng.random((16, 16, 3)), rng.random((4, 4, 3))
    lhs = (downsample_box(T, 4) * Y).sum()
    rhs = (T * downsample_adjoint(Y, 4)).sum()
    assert abs(lhs - rhs) < 1e-10


def test_uv_self_supervision_closed_forms(rng):
    t = rng.random((4, 4, 3))
    T = upsample_nearest(t, 4)
    cov = np.ones((4, 4), dtype=bool)
    loss, grad = uv_self_supervision(T, t, cov)
    assert loss < 1e-28 and np.abs(grad).max() < 1e-15
    t2 = t.copy()
    t2[1, 2, 0] -= 0.1
    loss, grad = uv_self_supervision(T, t2, cov)
    n = 16
    np.testing.assert_allclose(grad[4:8, 8:12, 0], 2 * 0.1 / (n * 16))
    grad[4:8, 8:12, 0] = 0
    assert np.abs(grad).max() < 1e-15
    with pytest.raises(ValueError):
        uv_self_supervision(T, t, np.zeros((4, 4), dtype=bool))


def test_uv_self_supervision_finite_differences(rng):
    worst = 0.0
    for _ in range(10):
        T, t = rng.random((16, 16, 3)), rng.random((4, 4, 3))
        cov = rng.random((4, 4)) < 0.6
        cov[0, 0] = True
        _, grad = uv_self_supervision(T, t, cov)
        f = lambda x: uv_self_supervision(x, t, cov)[0]
        worst = max(worst, finite_diff_check(f, T, grad, samples=40, rng=rng))
    assert worst < 1e-4


# ----------------------------------------------------------------- optimizer


class DenseAdam:
    def __init__(self, shape, cfg):
        self.m, self.v, self.k, self.cfg = np.zeros(shape), np.zeros(shape), 0, cfg

    def step(self, x, g):
        c = self.cfg
        self.k += 1
        self.m = c.adam_beta1 * self.m + (1 - c.adam_beta1) * g
        self.v = c.adam_beta2 * self.v + (1 - c.adam_beta2) * g * g
        mh = self.m / (1 - c.adam_beta1 ** self.k)
        vh = self.v / (1 - c.adam_beta2 ** self.k)
        return x - c.learning_rate * mh / (np.sqrt(vh) + c.adam_eps)


def dense_optimize(T, t, gb, target, mask, cfg, cov_lo):
    """Whole-texture reference written directly from the per-step recipe."""
    T, t = T.copy(), t.copy()
    oT, ot = DenseAdam(T.data.shape, cfg), DenseAdam(t.data.shape, cfg)
    for _ in range(cfg.steps_per_view):
        _, gT = view_loss_and_grad(T, gb, target, mask)
        _, gt = view_loss_and_grad(t, gb, target, mask)
        if cfg.uv_loss_weight > 0:
            gT = gT + cfg.uv_loss_weight * uv_self_supervision(T, t, cov_lo)[1]
        nT = np.clip(oT.step(T.data, gT), 0, 1)
        nt = np.clip(ot.step(t.data, gt), 0, 1)
        T.update_magnitude += np.abs(nT - T.data).sum(axis=2)
        t.update_magnitude += np.abs(nt - t.data).sum(axis=2)
        T.data, t.data = nT, nt
    return T, t


@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_active_set_matches_dense_reference(small_sphere, lam, rng):
    mesh, tex = small_sphere
    cam = Camera(0.5, 0.3, width=64, height=64)
    gb = rasterize(mesh, cam)
    target = rasterize(mesh, cam, Texture(tex)).color
    mask = classify_keep_update(gb)
    cfg = BakeConfig(hi_resolution=128, lo_resolution=32, steps_per_view=25, uv_loss_weight=lam)
    cov_lo = rasterize_uv_coverage(mesh, 32)
    T0 = Texture(rng.random((128, 128, 3)))
    t0 = Texture(downsample_box(T0, 4) + 0.01 * rng.random((32, 32, 3)))
    T1, t1, log = optimize_view(T0, t0, gb, target, mask, cfg, cov_lo)
    T2, t2 = dense_optimize(T0, t0, gb, target, mask, cfg, cov_lo)
    np.testing.assert_allclose(T1.data, T2.data, atol=1e-10)
    np.testing.assert_allclose(t1.data, t2.data, atol=1e-10)
    np.testing.assert_allclose(T1.update_magnitude, T2.update_magnitude, atol=1e-9)
    np.testing.assert_array_equal(T1.update_magnitude > 0, T2.update_magnitude > 0)
    assert len(log.loss_hi) == 25


def test_fixed_point_without_self_supervision(small_sphere):
    mesh, tex = small_sphere
    gb = rasterize(mesh, Camera(0.2, 0.1, width=64, height=64))
    T = Texture(tex.copy())
    target = render_view(T, gb)
    cfg = BakeConfig(hi_resolution=128, steps_per_view=50, uv_loss_weight=0.0)
    T1, _, _ = optimize_view(T, Texture(downsample_box(T, 4)), gb, target, classify_keep_update(gb), cfg)
    assert np.abs(T1.data - T.data).max() < 1e-6


def test_solid_red_fit_is_monotone():
    mesh = generate_fallback_atlas(shapes.grid_plane(2, size=0.9), 64)
    gb = rasterize(mesh, Camera(0.0, 0.0, width=64, height=64))
    target = np.tile([1.0, 0.0, 0.0], (64, 64, 1))
    cfg = BakeConfig(hi_resolution=64, lo_resolution=16, steps_per_view=200)
    T, t = initial_texture(cfg), Texture.filled(16, 16)
    T1, _, log = optimize_view(T, t, gb, target, gb.coverage, cfg, rasterize_uv_coverage(mesh, 16))
    loss = np.array(log.loss_hi)
    assert np.mean(np.diff(loss) <= 0) >= 0.95
    assert np.mean((render_view(T1, gb) - target)[gb.coverage] ** 2) < 1e-3


def test_self_supervision_reaches_every_covered_block():
    mesh = generate_fallback_atlas(shapes.grid_plane(1, size=0.9), 256, gutter=8)
    # enough pixels that the lo-resolution footprints tile the charts
    gb = rasterize(mesh, Camera(0.0, 0.0, width=128, height=128))
    target = np.full((128, 128, 3), 0.25)
    cfg = BakeConfig(hi_resolution=256, lo_resolution=64, steps_per_view=20)
    cov_lo = rasterize_uv_coverage(mesh, 64)
    T1, t1, log = optimize_view(initial_texture(cfg), Texture.filled(64, 64), gb, target, gb.coverage, cfg, cov_lo)
    assert max(log.loss_uv) > 0
    moved_blocks = downsample_box(np.repeat(T1.update_magnitude[..., None], 3, axis=2), 4)[..., 0] > 0
    assert moved_blocks[cov_lo].mean() > 0.99
    # the rest are rim blocks that neither footprint reaches: T' = t there from
    # the start, so their self-supervision gradient is exactly zero
    still = cov_lo & ~moved_blocks
    assert np.all(t1.update_magnitude[still] == 0)
    np.testing.assert_array_equal(downsample_box(T1, 4)[still], t1.data[still])
    cfg0 = BakeConfig(hi_resolution=256, lo_resolution=64, steps_per_view=20, uv_loss_weight=0.0)
    T0, _, _ = optimize_view(initial_texture(cfg0), Texture.filled(64, 64), gb, target, gb.coverage, cfg0, cov_lo)
    cov_hi = rasterize_uv_coverage(mesh, 256)
    assert scan_point_gaps(T0, cov_hi)[0] > scan_point_gaps(T1, cov_hi)[0]


def test_config_validation():
    assert BakeConfig().lo_resolution == 256
    assert BakeConfig().keep_update_threshold == math.radians(36)
    with pytest.raises(ValueError):
        BakeConfig(hi_resolution=1024, lo_resolution=300)
    with pytest.raises(ValueError):
        BakeConfig(steps_per_view=0)
    with pytest.raises(ValueError):
        BakeConfig(optimizer="lbfgs")
    assert BakeConfig(init_texture="rough.png").noise_strength == 0.6


def test_scan_point_gaps_limits():
    T = Texture.filled(8, 8)
    T.update_magnitude[:4] = 1.0
    cov = np.ones((8, 8), dtype=bool)
    assert scan_point_gaps(T, cov)[0] == 32
    assert scan_point_gaps(T, cov, epsilon=np.inf)[0] == 64


# ----------------------------------------------------------------------- bake


def test_init_texture_file_renders_identically(tmp_path, small_sphere):
    from texbake import imageio

    mesh, tex = small_sphere
    path = str(tmp_path / "rough.png")
    imageio.write_rgb(path, tex)
    cfg = BakeConfig(hi_resolution=128, init_texture=path)
    T = initial_texture(cfg)
    gb = rasterize(mesh, Camera(0.3, 0.0, width=64, height=64))
    np.testing.assert_allclose(render_view(T, gb), render_view(Texture(imageio.read_rgb(path)), gb), atol=1e-6)


def test_bake_small_end_to_end(small_sphere):
    mesh, tex = small_sphere
    plan = make_view_plan(64)
    cfg = BakeConfig(hi_resolution=128, lo_resolution=32, steps_per_view=40)
    T, report, t = bake(mesh, plan, OracleSource(mesh, Texture(tex)), cfg)
    assert report["n_gbuffers"] == 10
    assert [v["index"] for v in report["views"]] == [0, 4, 1, 5, 2, 6, 3, 7, 8, 9]
    assert np.all(np.diff([v["index"] for v in report["views"][8:]]) > 0)
    assert 0.0 <= report["gaps"]["fraction"] <= 1.0
    assert T.data.min() >= 0 and T.data.max() <= 1
    assert t.width == 32
    T2, report2, _ = bake(mesh, plan, OracleSource(mesh, Texture(tex)), cfg)
    np.testing.assert_array_equal(T.data, T2.data)
    assert strip_volatile(report) == strip_volatile(report2)


def test_bake_aborts_with_partial_report(small_sphere):
    mesh, tex = small_sphere

    class Flaky:
        calls = 0

        def generate(self, requests, params=None):
            Flaky.calls += 1
            if Flaky.calls == 2:
                raise ImageSourceError("boom")
            return OracleSource(mesh, Texture(tex)).generate(requests)

    cfg = BakeConfig(hi_resolution=128, steps_per_view=2)
    with pytest.raises(BakeAborted) as info:
        bake(mesh, make_view_plan(32), Flaky(), cfg)
    assert len(info.value.report["views"]) == 2
    assert "boom" in info.value.report["aborted"]


def test_bake_rejects_unready_mesh():
    with pytest.raises(ValueError, match="bake-ready"):
        bake(shapes.icosphere(1), make_view_plan(32), None, BakeConfig(hi_resolution=64))
