"""Normalized cross-correlation, image pyramids and translation search.

A translation estimate ``t`` is a *correction* offset: ``fixed(x) ~ moving(x + t)``,
i.e. the constant backward field that maps ``moving`` onto ``fixed``.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionMismatch, FlatImage

MIN_LEVEL_SIZE = 16


def downsample(img):
    """2x2 block mean; odd trailing rows/columns are dropped."""
    img = np.asarray(img, np.float64)
    ny, nx = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    a = img[:ny, :nx]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def usable_levels(shape, levels):
    levels = max(1, int(levels))
    while levels > 1 and min(shape) / 2 ** (levels - 1) < MIN_LEVEL_SIZE:
        levels -= 1
    return levels


def pyramid(img, levels):
    """``[full, half, quarter, ...]`` with ``levels`` entries."""
    out = [np.asarray(img, np.float64)]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return out


def ncc(a, b, mask=None):
    """Pearson correlation of two images (optionally over a mask); NaN if either is flat."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if mask is not None:
        a = a[mask]
        b = b[mask]
    if a.size == 0 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    if den == 0.0:
        return float("nan")
    return float(np.sum(a * b) / den)


def check_not_flat(*images):
    for img in images:
        if np.ptp(np.asarray(img)) == 0:
            raise FlatImage("image has zero variance; NCC is undefined")


def ncc_surface(fixed, moving, margin, center, radius):
    """NCC of the central template of ``fixed`` against shifted windows of ``moving``.

    Returns an array indexed ``[dy + radius, dx + radius]`` for shifts
    ``center + (dx, dy)``; flat windows score ``-inf``.
    """
    ny, nx = fixed.shape
    cx, cy = int(center[0]), int(center[1])
    tmpl = fixed[margin:ny - margin, margin:nx - margin]
    th, tw = tmpl.shape
    t = tmpl - tmpl.mean()
    tnorm = math.sqrt(float(np.sum(t * t)))
    y0 = margin + cy - radius
    x0 = margin + cx - radius
    region = moving[y0:y0 + th + 2 * radius, x0:x0 + tw + 2 * radius]
    wins = sliding_window_view(region, (th, tw))
    n = th * tw
    num = np.einsum("ijkl,kl->ij", wins, t)
    s1 = wins.sum(axis=(2, 3))
    s2 = np.einsum("ijkl,ijkl->ij", wins, wins)
    var = s2 - s1 * s1 / n
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / (np.sqrt(np.maximum(var, 0.0)) * tnorm)
    out[~(var > 1e-12 * n)] = -np.inf
    if tnorm == 0.0:
        out[:] = -np.inf
    return out


def quadratic_peak(patch):
    """Sub-pixel offset and value of the maximum of a 3x3 patch (least-squares quadric)."""
    patch = np.asarray(patch, np.float64)
    if not np.all(np.isfinite(patch)):
        return 0.0, 0.0, float(patch[1, 1])
    dy, dx = np.mgrid[-1:2, -1:2]
    A = np.stack([np.ones(9), dx.ravel(), dy.ravel(), dx.ravel() ** 2, dy.ravel() ** 2,
                  (dx * dy).ravel()], axis=1)
    c = np.linalg.lstsq(A, patch.ravel(), rcond=None)[0]
    H = np.array([[2 * c[3], c[5]], [c[5], 2 * c[4]]])
    g = np.array([c[1], c[2]])
    if H[0, 0] < 0 and np.linalg.det(H) > 0:
        off = -np.linalg.solve(H, g)
        if np.all(np.abs(off) <= 1.0):
            val = c[0] + g @ off + 0.5 * off @ H @ off
            return float(off[0]), float(off[1]), float(val)
    # fall back to separable parabolas through the centre row/column
    off = []
    for l, m, r in ((patch[1, 0], patch[1, 1], patch[1, 2]), (patch[0, 1], patch[1, 1], patch[2, 1])):
        den = l - 2 * m + r
        off.append(float(np.clip(0.5 * (l - r) / den, -0.5, 0.5)) if den < 0 else 0.0)
    return off[0], off[1], float(patch[1, 1])


def search_translation(fixed, moving, margin, center=(0, 0), radius=1, subpixel=False):
    """Best correction offset within ``center +- radius``.

    Returns ``(tx, ty, score)``.  With ``subpixel`` the integer peak is
    refined by a quadratic fit over its 3x3 neighbourhood.
    """
    ny, nx = fixed.shape
    margin = int(min(margin, (min(nx, ny) - 4) // 2))
    cx = int(np.clip(center[0], -(margin - radius), margin - radius))
    cy = int(np.clip(center[1], -(margin - radius), margin - radius))
    surf = ncc_surface(fixed, moving, margin, (cx, cy), radius)
    k = int(np.argmax(surf))
    iy, ix = divmod(k, surf.shape[1])
    best = float(surf[iy, ix])
    tx, ty = cx + ix - radius, cy + iy - radius
    if not subpixel:
        return float(tx), float(ty), best
    if 1 <= iy < surf.shape[0] - 1 and 1 <= ix < surf.shape[1] - 1:
        patch = surf[iy - 1:iy + 2, ix - 1:ix + 2]
    elif max(abs(tx), abs(ty)) + 1 <= margin:
        patch = ncc_surface(fixed, moving, margin, (tx, ty), 1)
    else:
        return float(tx), float(ty), best
    ox, oy, val = quadratic_peak(patch)
    return tx + ox, ty + oy, max(val, best)


def default_radius(shape):
    return max(1, min(shape) // 4)


def pyramid_translation(fixed_pyr, moving_pyr, radius, subpixel=True):
    """Coarse-to-fine translation estimate over prepared pyramids."""
    levels = len(fixed_pyr)
    tx = ty = 0.0
    score = -np.inf
    for lvl in range(levels - 1, -1, -1):
        f, m = fixed_pyr[lvl], moving_pyr[lvl]
        r_l = int(math.ceil(radius / 2 ** lvl))
        if lvl == levels - 1:
            tx, ty, score = search_translation(f, m, r_l, (0, 0), r_l, subpixel and lvl == 0)
        else:
            tx, ty, score = search_translation(f, m, r_l + 4, (round(2 * tx), round(2 * ty)), 2,
                                               subpixel and lvl == 0)
    return tx, ty, score


def register_translation(fixed, moving, pyramid_levels=3, radius=None):
    """Correction offset ``(tx, ty)`` aligning ``moving`` to ``fixed`` by NCC search."""
    fixed = np.asarray(fixed, np.float64)
    moving = np.asarray(moving, np.float64)
    if fixed.shape != moving.shape:
        raise DimensionMismatch(f"slice shapes differ: {fixed.shape} vs {moving.shape}")
    if min(fixed.shape) < 16:
        raise ValueError("translation registration needs slices of at least 16x16")
    check_not_flat(fixed, moving)
    radius = default_radius(fixed.shape) if radius is None else int(radius)
    levels = usable_levels(fixed.shape, pyramid_levels)
    tx, ty, _ = pyramid_translation(pyramid(fixed, levels), pyramid(moving, levels), radius)
    return tx, ty
