"""Image fidelity, texel coverage statistics and a finite-difference gradient
checker."""

import numpy as np


def image_mse(a, b, mask=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = (a - b) ** 2
    if mask is None:
        return float(d.mean())
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ValueError("mask must match the image height and width")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    return float(d[mask].mean())


def psnr(a, b, mask=None):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; inf when equal."""
    mse = image_mse(a, b, mask)
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


def coverage_fraction(mask):
    mask = np.asarray(mask, dtype=bool)
    return float(mask.mean()) if mask.size else 0.0


def gap_fraction(update_magnitude, coverage, epsilon=1e-9):
    """Share of covered texels whose accumulated update stayed <= epsilon."""
    coverage = np.asarray(coverage, dtype=bool)
    n = int(coverage.sum())
    if n == 0:
        return 0.0
    return float((coverage & (np.asarray(update_magnitude) <= epsilon)).sum() / n)


def finite_diff_check(f, x, analytic_grad, samples=100, h=1e-4, rng=None):
    """Max relative error between ``analytic_grad`` and central differences of
    ``f`` at ``samples`` random entries of ``x``.

    The denominator is max(|analytic|, 1e-8). ``x`` is not modified.
    """
    rng = np.random.default_rng(rng)
    x = np.array(x, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64)
    if g.shape != x.shape:
        raise ValueError("gradient shape must match x")
    flat = x.reshape(-1)
    picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
    worst = 0.0
    for k in picks:
        keep = flat[k]
        flat[k] = keep + h
        up = f(x)
        flat[k] = keep - h
        down = f(x)
        flat[k] = keep
        numeric = (up - down) / (2.0 * h)
        a = g.reshape(-1)[k]
        worst = max(worst, abs(numeric - a) / max(abs(a), 1e-8))
    return float(worst)
