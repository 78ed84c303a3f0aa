import sys

import numpy as np
import pytest

from texbake import shapes
from texbake.geometry import generate_fallback_atlas, make_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sphere():
    """Atlased 320-face sphere with its field texture at 128 texels."""
    mesh = generate_fallback_atlas(shapes.icosphere(2), 128)
    return mesh, shapes.bake_field_texture(mesh, 128)


def unit_quad(z=0.0, uv=True):
    """Square [-0.5, 0.5]^2 at height z facing +z, split into two triangles."""
    pos = [[-0.5, -0.5, z], [0.5, -0.5, z], [0.5, 0.5, z], [-0.5, 0.5, z]]
    tris = [[0, 1, 2], [0, 2, 3]]
    corner_uvs = None
    if uv:
        corner_uvs = np.array([[[0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]], dtype=float)
    return make_mesh(pos, tris, corner_uvs)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.LINES):
        terminalreporter.write_line(line)
