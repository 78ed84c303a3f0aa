"""Bilinear texture lookups and their adjoint.

Texel (row, col) has its centre at uv = ((col + 0.5) / W, 1 - (row + 0.5) / H):
u runs along columns, v runs bottom-to-top so saved PNGs follow the OBJ
convention. Lookups clamp at the texture edges.
"""

import numpy as np
import scipy.sparse as sp


def footprint(uv, width, height):
    """Flat texel indices (N, 4) and weights (N, 4) for each uv sample."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    x = uv[:, 0] * width - 0.5
    y = (1.0 - uv[:, 1]) * height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa = np.clip(x0, 0, width - 1)
    xb = np.clip(x0 + 1, 0, width - 1)
    ya = np.clip(y0, 0, height - 1)
    yb = np.clip(y0 + 1, 0, height - 1)
    idx = np.stack([ya * width + xa, ya * width + xb, yb * width + xa, yb * width + xb], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def sample(data, uv):
    """Bilinear lookup of an (H, W, C) array at (N, 2) uv points -> (N, C)."""
    h, w, c = data.shape
    idx, wt = footprint(uv, w, h)
    flat = data.reshape(-1, c)
    return np.einsum("nk,nkc->nc", wt, flat[idx])


def footprint_matrix(uv, width, height):
    """Sparse (N, H*W) operator whose product with a flattened texture renders the samples.

    Its transpose scatters per-sample gradients back onto texels; duplicate
    entries from edge clamping are summed.
    """
    idx, w = footprint(uv, width, height)
    n = len(idx)
    rows = np.repeat(np.arange(n), 4)
    mat = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, width * height))
    mat.sum_duplicates()
    return mat
