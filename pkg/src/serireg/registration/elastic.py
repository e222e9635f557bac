"""Free-form deformation registration on a Catmull-Rom control lattice.

The lattice uses the same node layout and kernel as the elastic distortion
model, so the dense field is ``By @ nodes @ Bx.T`` per component.  Node
values are always kept in full-resolution pixels; each pyramid level
evaluates the basis at the full-resolution positions of its own pixels.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionMismatch, NonFinite
from ..geometry import (
    image_gradient_at,
    interior_mask,
    lattice_basis,
    lattice_positions,
    upsample_lattice,
)
from .ncc import check_not_flat, pyramid, usable_levels
from .rigid import rigid_search

SIMILARITIES = ("ncc", "ssd")
MAX_HALVINGS = 10


@dataclass
class ElasticFit:
    field: np.ndarray
    nodes: np.ndarray
    energies: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    similarity: float = float("nan")


def laplacian_energy(nodes):
    """``sum ||discrete Laplacian||^2`` over interior nodes, and its gradient."""
    c = np.asarray(nodes, np.float64)
    grad = np.zeros_like(c)
    if c.shape[0] < 3 or c.shape[1] < 3:
        return 0.0, grad
    lap = (c[:-2, 1:-1] + c[2:, 1:-1] + c[1:-1, :-2] + c[1:-1, 2:] - 4 * c[1:-1, 1:-1])
    grad[:-2, 1:-1] += 2 * lap
    grad[2:, 1:-1] += 2 * lap
    grad[1:-1, :-2] += 2 * lap
    grad[1:-1, 2:] += 2 * lap
    grad[1:-1, 1:-1] -= 8 * lap
    return float(np.sum(lap * lap)), grad


def roughness(nodes):
    return laplacian_energy(nodes)[0]


def _similarity(kind, f, w):
    """Energy term and its derivative with respect to the warped values."""
    if kind == "ssd":
        d = w - f
        return float(np.mean(d * d)), 2.0 * d / d.size
    fc = f - f.mean()
    wc = w - w.mean()
    nf = math.sqrt(float(fc @ fc))
    nw = math.sqrt(float(wc @ wc))
    if nw == 0.0 or nf == 0.0:
        return math.inf, np.zeros_like(w)
    r = float(fc @ wc) / (nf * nw)
    return 1.0 - r, -(fc / (nf * nw) - r * wc / (nw * nw))


class _Level:
    def __init__(self, fixed, moving, scale, spacing, n_nodes, similarity):
        ny, nx = fixed.shape
        self.fixed = fixed
        self.moving = moving
        self.scale = scale
        off = (scale - 1) / 2.0
        self.By = lattice_basis(np.arange(ny) * scale + off, spacing, n_nodes[0])
        self.Bx = lattice_basis(np.arange(nx) * scale + off, spacing, n_nodes[1])
        ys, xs = np.mgrid[0:ny, 0:nx].astype(np.float64)
        self.xs, self.ys = xs, ys
        self.mask = interior_mask((nx, ny), max(1, int(math.ceil(4 / scale))))
        self.f = fixed[self.mask]
        self.similarity = similarity

    def field(self, nodes):
        return np.stack([self.By @ nodes[..., c] @ self.Bx.T for c in range(2)], axis=-1) / self.scale

    def energy(self, nodes, lam):
        u = self.field(nodes)
        val, gx, gy, _ = image_gradient_at(self.moving, self.xs + u[..., 0], self.ys + u[..., 1])
        sim, dsim = _similarity(self.similarity, self.f, val[self.mask])
        dw = np.zeros_like(val)
        dw[self.mask] = dsim
        grad = np.stack([self.By.T @ (dw * gx) @ self.Bx, self.By.T @ (dw * gy) @ self.Bx],
                        axis=-1) / self.scale
        reg, dreg = laplacian_energy(nodes)
        return sim + lam * reg, grad + lam * dreg, sim


def register_elastic(fixed, moving, pyramid_levels=3, similarity="ncc", grid_px=32.0, lam=1e-6,
                     step=0.5, max_iter=200, grad_tol=1e-9, theta_max_deg=15.0, init_nodes=None):
    """Backward correction field aligning ``moving`` to ``fixed``.

    The lattice is initialised from a rigid fit and refined by normalized
    gradient descent on ``similarity + lam * sum ||Laplacian(nodes)||^2``,
    coarse to fine.  ``step`` is the largest node move per iteration in
    pixels of the current level; it halves whenever the energy fails to drop.
    """
    fixed = np.asarray(fixed, np.float64)
    moving = np.asarray(moving, np.float64)
    if fixed.shape != moving.shape:
        raise DimensionMismatch(f"slice shapes differ: {fixed.shape} vs {moving.shape}")
    if similarity not in SIMILARITIES:
        raise ValueError(f"similarity must be one of {SIMILARITIES}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    check_not_flat(fixed, moving)
    ny, nx = fixed.shape
    py = lattice_positions(ny, grid_px)
    px = lattice_positions(nx, grid_px)

    if init_nodes is None:
        T = rigid_search(fixed, moving, pyramid_levels, theta_max_deg).transform
        gx, gy = np.meshgrid(px, py)
        sx, sy = T.inverse_points(gx, gy)
        nodes = np.stack([sx - gx, sy - gy], axis=-1)
    else:
        nodes = np.array(init_nodes, np.float64)
        if nodes.shape != (py.size, px.size, 2):
            raise DimensionMismatch(f"initial lattice must have shape {(py.size, px.size, 2)}")

    levels = usable_levels(fixed.shape, pyramid_levels)
    fpyr = pyramid(fixed, levels)
    mpyr = pyramid(moving, levels)
    fit = ElasticFit(field=None, nodes=None)
    converged = False
    for lvl in range(levels - 1, -1, -1):
        scale = 2 ** lvl
        level = _Level(fpyr[lvl], mpyr[lvl], scale, grid_px, nodes.shape[:2], similarity)
        E, G, S = level.energy(nodes, lam)
        if not (np.isfinite(E) and np.all(np.isfinite(G))):
            raise NonFinite(f"non-finite energy at pyramid level {lvl}")
        trace = [E]
        step_px = step * scale
        halvings = 0
        converged = False
        for _ in range(max_iter):
            gmax = float(np.abs(G).max())
            if gmax < grad_tol:
                converged = True
                break
            trial = nodes - step_px * G / gmax
            En, Gn, Sn = level.energy(trial, lam)
            if math.isnan(En) or (math.isfinite(En) and not np.all(np.isfinite(Gn))):
                raise NonFinite(f"non-finite energy or gradient at pyramid level {lvl}")
            fit.iterations += 1
            if En < E:
                nodes, E, G, S = trial, En, Gn, Sn
                trace.append(E)
                halvings = 0
            else:
                step_px /= 2.0
                halvings += 1
                if halvings >= MAX_HALVINGS:
                    converged = True
                    break
        fit.energies.append(trace)

    fit.nodes = nodes
    fit.field = upsample_lattice(nodes, (nx, ny), grid_px)
    fit.converged = converged
    fit.similarity = 1.0 - S if similarity == "ncc" else S
    return fit
