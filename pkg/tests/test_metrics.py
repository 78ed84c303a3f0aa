import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from texbake.metrics import coverage_fraction, finite_diff_check, gap_fraction, image_mse, psnr


def brute_mse(a, b, mask=None):
    total, n = 0.0, 0
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            if mask is not None and not mask[y, x]:
                continue
            for c in range(a.shape[2]):
                total += (a[y, x, c] - b[y, x, c]) ** 2
                n += 1
    return total / n


def test_mse_examples(rng):
    assert image_mse(np.zeros((4, 4, 3)), np.zeros((4, 4, 3))) == 0.0
    assert image_mse(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 1.0
    a, b = rng.random((9, 7, 3)), rng.random((9, 7, 3))
    m = rng.random((9, 7)) < 0.5
    assert image_mse(a, b) == pytest.approx(brute_mse(a, b), abs=1e-12)
    assert image_mse(a, b, m) == pytest.approx(brute_mse(a, b, m), abs=1e-12)
    with pytest.raises(ValueError):
        image_mse(a, b[:-1])
    with pytest.raises(ValueError):
        image_mse(a, b, np.zeros((9, 7), bool))


def test_psnr_examples(rng):
    a = np.zeros((10, 10, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a) == math.inf
    for _ in range(10):
        x, y = rng.random((5, 5, 3)), rng.random((5, 5, 3))
        assert psnr(x, y) == pytest.approx(-10 * math.log10(image_mse(x, y)), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5, 3), elements=st.floats(0, 1)), arrays(np.float64, (4, 5, 3), elements=st.floats(0, 1)))
def test_mse_symmetric(a, b):
    assert image_mse(a, b) == image_mse(b, a)
    assert image_mse(a, b) >= 0


def test_finite_diff_checker(rng):
    x = rng.random((6, 6, 3))
    assert finite_diff_check(lambda z: float(z.sum()), x, np.ones_like(x), samples=50, rng=rng) < 1e-10
    f = lambda z: float((z ** 2).sum())
    assert finite_diff_check(f, x, 2 * x, samples=50, rng=rng) < 1e-6
    wrong = 2 * (2 * x)
    # relative to the analytic value a doubled gradient is off by one half of itself
    assert finite_diff_check(f, x, wrong, samples=5, rng=rng) == pytest.approx(0.5, abs=1e-6)
    assert finite_diff_check(f, x, 0.5 * (2 * x), samples=5, rng=rng) == pytest.approx(1.0, abs=1e-6)


def test_coverage_and_gap_fraction():
    cov = np.zeros((4, 4), bool)
    cov[:2] = True
    mag = np.zeros((4, 4))
    mag[0] = 1.0
    assert coverage_fraction(cov) == 0.5
    assert gap_fraction(mag, cov) == 0.5
    assert gap_fraction(mag, np.zeros_like(cov)) == 0.0
