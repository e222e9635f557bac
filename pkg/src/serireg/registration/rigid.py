"""Multi-resolution rotation + translation search."""

import math
from typing import NamedTuple

import numpy as np

from ..errors import DimensionMismatch
from ..geometry import RigidTransform2D, image_center, rigid_to_field, warp_slice
from .ncc import (
    check_not_flat,
    default_radius,
    pyramid,
    search_translation,
    usable_levels,
)

LOW_NCC = 0.5
MARGIN_PAD = 4
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class RigidFit(NamedTuple):
    transform: RigidTransform2D
    ncc: float
    evaluations: int

    @property
    def converged(self):
        return self.ncc >= LOW_NCC


def _margin(centre):
    # the template only has to leave room for the local search window
    return int(max(abs(centre[0]), abs(centre[1]))) + 2 + MARGIN_PAD


def _rotated(img, theta):
    ny, nx = img.shape
    field = rigid_to_field(RigidTransform2D(theta, 0.0, 0.0, *image_center((nx, ny))), (nx, ny))
    return warp_slice(img, field, "bilinear").astype(np.float64)


def rigid_search(fixed, moving, pyramid_levels=3, theta_max_deg=15.0, theta_samples=33,
                 radius=None, golden_tol_deg=0.01):
    """Full search returning the correction transform and its NCC.

    For each candidate angle the moving slice is rotated about the image
    centre and the best translation is found by NCC; the angle grid is
    narrowed by half per pyramid level and polished by golden-section search.
    """
    fixed = np.asarray(fixed, np.float64)
    moving = np.asarray(moving, np.float64)
    if fixed.shape != moving.shape:
        raise DimensionMismatch(f"slice shapes differ: {fixed.shape} vs {moving.shape}")
    check_not_flat(fixed, moving)
    ny, nx = fixed.shape
    radius = default_radius(fixed.shape) if radius is None else int(radius)
    levels = usable_levels(fixed.shape, pyramid_levels)
    fpyr = pyramid(fixed, levels)
    mpyr = pyramid(moving, levels)
    evals = 0

    limit = math.radians(theta_max_deg)
    half = limit
    best_theta, best_t = 0.0, (0.0, 0.0)
    for lvl in range(levels - 1, -1, -1):
        f, m = fpyr[lvl], mpyr[lvl]
        r_l = int(math.ceil(radius / 2 ** lvl))
        coarsest = lvl == levels - 1
        centre = (0, 0) if coarsest else (round(2 * best_t[0]), round(2 * best_t[1]))
        # the narrowed window never leaves the allowed range
        thetas = np.unique(np.clip(best_theta + np.linspace(-half, half, theta_samples),
                                   -limit, limit))
        scored = []
        for th in thetas:
            mr = _rotated(m, th)
            if coarsest:
                t = search_translation(f, mr, r_l, centre, r_l)
            else:
                t = search_translation(f, mr, _margin(centre), centre, 2)
            scored.append((t[2], th, t[:2]))
            evals += 1
        score, best_theta, best_t = max(scored, key=lambda s: s[0])
        if lvl > 0:
            half /= 2.0
    step = 2 * half / max(theta_samples - 1, 1)

    f = fpyr[0]
    centre = (round(best_t[0]), round(best_t[1]))
    r0 = _margin(centre)

    def objective(th):
        t = search_translation(f, _rotated(mpyr[0], th), r0, centre, 2, subpixel=True)
        return t[2], t[:2]

    a, b = max(best_theta - step, -limit), min(best_theta + step, limit)
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = objective(x1), objective(x2)
    evals += 2
    tol = math.radians(golden_tol_deg)
    while b - a > tol:
        if f1[0] >= f2[0]:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = objective(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = objective(x2)
        evals += 1
    fb = objective(best_theta)
    evals += 1
    candidates = [(f1[0], x1, f1[1]), (f2[0], x2, f2[1]), (fb[0], best_theta, fb[1])]
    score, theta, (tx, ty) = max(candidates, key=lambda s: s[0])
    T = RigidTransform2D(theta, -tx, -ty, *image_center((nx, ny)))
    return RigidFit(T, float(score), evals)


def register_rigid(fixed, moving, pyramid_levels=3, theta_max_deg=15.0, theta_samples=33, radius=None):
    """Correction transform mapping ``moving`` onto ``fixed``.

    ``warp_slice(moving, rigid_to_field(T, dims))`` approximates ``fixed``.
    """
    return rigid_search(fixed, moving, pyramid_levels, theta_max_deg, theta_samples, radius).transform
