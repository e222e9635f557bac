"""Displacement-field algebra.

Conventions used throughout the package:

* Images are ``(ny, nx)`` arrays; pixel centres sit at integer coordinates
  and the domain is ``[0, nx-1] x [0, ny-1]``.
* A displacement field ``u`` has shape ``(ny, nx, 2)`` holding ``(ux, uy)``
  in pixels and is a *backward* map: ``warped(x) = source(x + u(x))``.
* Images are padded with a constant when sampled outside the domain;
  fields are sampled with edge-clamped coordinates.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, NotConverged
from .parallel import pmap
from .volume_io import FieldStack, Volume

INTERIOR_MARGIN = 4
INTERPOLATIONS = ("nearest", "bilinear", "bicubic")


def _wrap_angle(theta):
    t = math.remainder(float(theta), 2 * math.pi)
    return math.pi if t == -math.pi else t


@dataclass(frozen=True)
class RigidTransform2D:
    """Rotation by ``theta`` about ``(cx, cy)`` followed by translation ``(tx, ty)``.

    The forward map is ``y = R(theta) (x - c) + c + t``.
    """

    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        vals = (self.theta, self.tx, self.ty, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite rigid transform parameters {vals}")
        object.__setattr__(self, "theta", _wrap_angle(self.theta))
        for name in ("tx", "ty", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def t(self):
        return (self.tx, self.ty)

    @property
    def center(self):
        return (self.cx, self.cy)

    def inverse(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        # T^-1(y) = R(-theta)(y - c) + c - R(-theta) t
        tx = -(c * self.tx + s * self.ty)
        ty = -(-s * self.tx + c * self.ty)
        return RigidTransform2D(-self.theta, tx, ty, self.cx, self.cy)

    def inverse_points(self, xs, ys):
        """Apply ``T^-1`` to point arrays."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = np.asarray(xs, np.float64) - self.cx - self.tx
        dy = np.asarray(ys, np.float64) - self.cy - self.ty
        return c * dx + s * dy + self.cx, -s * dx + c * dy + self.cy

    def to_dict(self):
        return {"theta_rad": self.theta, "tx_px": self.tx, "ty_px": self.ty,
                "cx_px": self.cx, "cy_px": self.cy}

    @classmethod
    def from_dict(cls, d):
        return cls(d["theta_rad"], d["tx_px"], d["ty_px"], d.get("cx_px", 0.0), d.get("cy_px", 0.0))


def image_center(dims):
    nx, ny = dims[0], dims[1]
    return ((nx - 1) / 2.0, (ny - 1) / 2.0)


def pixel_grid(dims):
    nx, ny = dims[0], dims[1]
    ys, xs = np.mgrid[0:ny, 0:nx].astype(np.float64)
    return xs, ys


def interior_mask(dims, margin=INTERIOR_MARGIN):
    nx, ny = dims[0], dims[1]
    mask = np.zeros((ny, nx), bool)
    if nx > 2 * margin and ny > 2 * margin:
        mask[margin:ny - margin, margin:nx - margin] = True
    else:
        mask[:] = True
    return mask


def rigid_to_field(T, dims):
    """Backward field ``u(y) = T^-1(y) - y`` rendering content moved by ``T``."""
    xs, ys = pixel_grid(dims)
    sx, sy = T.inverse_points(xs, ys)
    return np.stack([sx - xs, sy - ys], axis=-1).astype(np.float32)


# ---------------------------------------------------------------------------
# sampling


def catmull_rom_weights(t):
    t = np.asarray(t, np.float64)
    t2 = t * t
    t3 = t2 * t
    return (
        (-t3 + 2 * t2 - t) / 2,
        (3 * t3 - 5 * t2 + 2) / 2,
        (-3 * t3 + 4 * t2 + t) / 2,
        (t3 - t2) / 2,
    )


def _bilinear_parts(shape, xs, ys):
    ny, nx = shape
    xc = np.clip(xs, 0, nx - 1)
    yc = np.clip(ys, 0, ny - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    return x0, x1, y0, y1, fx, fy


def _lerp2(a, x0, x1, y0, y1, fx, fy):
    # a + f * (b - a) form: reproduces constants exactly
    top = a[y0, x0] + fx * (a[y0, x1] - a[y0, x0])
    bot = a[y1, x0] + fx * (a[y1, x1] - a[y1, x0])
    return top + fy * (bot - top)


def _inside(shape, xs, ys):
    ny, nx = shape
    return (xs >= 0) & (xs <= nx - 1) & (ys >= 0) & (ys <= ny - 1)


def sample_image(img, xs, ys, interp="bilinear", pad_value=0.0):
    """Interpolate ``img`` at real coordinates; float64 result.

    Points outside the pixel-centre domain return ``pad_value``.
    """
    if interp not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {interp!r}")
    img = np.asarray(img, np.float64)
    xs = np.asarray(xs, np.float64)
    ys = np.asarray(ys, np.float64)
    inside = _inside(img.shape, xs, ys)
    ny, nx = img.shape
    if interp == "nearest":
        xi = np.clip(np.floor(xs + 0.5), 0, nx - 1).astype(np.intp)
        yi = np.clip(np.floor(ys + 0.5), 0, ny - 1).astype(np.intp)
        out = img[yi, xi]
    elif interp == "bilinear":
        x0, x1, y0, y1, fx, fy = _bilinear_parts(img.shape, xs, ys)
        out = _lerp2(img, x0, x1, y0, y1, fx, fy)
    else:
        xc = np.clip(xs, 0, nx - 1)
        yc = np.clip(ys, 0, ny - 1)
        x0 = np.floor(xc).astype(np.intp)
        y0 = np.floor(yc).astype(np.intp)
        wx = catmull_rom_weights(xc - x0)
        wy = catmull_rom_weights(yc - y0)
        out = np.zeros(xs.shape, np.float64)
        for j in range(4):
            yj = np.clip(y0 + j - 1, 0, ny - 1)
            row = np.zeros(xs.shape, np.float64)
            for i in range(4):
                row += wx[i] * img[yj, np.clip(x0 + i - 1, 0, nx - 1)]
            out += wy[j] * row
        out = np.clip(out, 0.0, 1.0)
    return np.where(inside, out, pad_value)


def sample_field(u, xs, ys):
    """Bilinear sampling of a field with edge-clamped coordinates; float64 ``(..., 2)``."""
    u = np.asarray(u, np.float64)
    x0, x1, y0, y1, fx, fy = _bilinear_parts(u.shape[:2], np.asarray(xs, np.float64),
                                             np.asarray(ys, np.float64))
    return _lerp2(u, x0, x1, y0, y1, fx[..., None], fy[..., None])


def image_gradient_at(img, xs, ys):
    """Value and spatial gradient of the bilinear interpolant of ``img``.

    Returns ``(value, d/dx, d/dy, inside)``; gradient is zero outside the domain.
    """
    img = np.asarray(img, np.float64)
    inside = _inside(img.shape, xs, ys)
    x0, x1, y0, y1, fx, fy = _bilinear_parts(img.shape, xs, ys)
    a = img[y0, x0]
    b = img[y0, x1]
    c = img[y1, x0]
    d = img[y1, x1]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    val = np.where(inside, top * (1 - fy) + bot * fy, 0.0)
    gx = np.where(inside, (b - a) * (1 - fy) + (d - c) * fy, 0.0)
    gy = np.where(inside, bot - top, 0.0)
    return val, gx, gy, inside


# ---------------------------------------------------------------------------
# warping and field algebra


def _check_field(u, shape):
    u = np.asarray(u)
    if u.shape != tuple(shape) + (2,):
        raise DimensionMismatch(f"field shape {u.shape} does not match image shape {tuple(shape)}")
    return u


def warp_slice(s, u, interp="bilinear", pad_value=0.0):
    """``out(x) = s(x + u(x))`` as float32."""
    s = np.asarray(s)
    if s.ndim != 2:
        raise DimensionMismatch(f"slice must be 2D, got shape {s.shape}")
    u = _check_field(u, s.shape)
    if not 0.0 <= pad_value <= 1.0:
        raise ValueError("pad_value must lie in [0, 1]")
    xs, ys = pixel_grid((s.shape[1], s.shape[0]))
    u = u.astype(np.float64)
    out = sample_image(s, xs + u[..., 0], ys + u[..., 1], interp, pad_value)
    return out.astype(np.float32)


def warp_volume(v, f, interp="bilinear", pad_value=0.0):
    """Warp every slice of ``v`` by the matching field of ``f``."""
    if tuple(f.z) != tuple(v.slice_indices):
        raise DimensionMismatch(
            f"field stack covers slices {list(f.z)[:5]}... but volume has {list(v.slice_indices)[:5]}...")
    nx, ny, _ = v.dims
    if f.dims != (nx, ny):
        raise DimensionMismatch(f"field dims {f.dims} differ from slice dims {(nx, ny)}")
    slices = pmap(lambda k: warp_slice(v.voxels[k], f.fields[k], interp, pad_value), range(v.nz))
    return Volume(np.stack(slices), v.spacing, v.provenance)


def compose_fields(u, v):
    """``w(x) = u(x) + v(x + u(x))`` so that warping by ``w`` equals warping by ``v`` then by ``u``."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape or u.ndim != 3 or u.shape[-1] != 2:
        raise DimensionMismatch(f"cannot compose fields of shapes {u.shape} and {v.shape}")
    u64 = u.astype(np.float64)
    xs, ys = pixel_grid((u.shape[1], u.shape[0]))
    w = u64 + sample_field(v, xs + u64[..., 0], ys + u64[..., 1])
    return w.astype(np.float32)


class FieldInverse(NamedTuple):
    field: np.ndarray
    residual: float
    iterations: int


def inversion_residual(u, v, margin=INTERIOR_MARGIN):
    """Max interior ``|u(x + v(x)) + v(x)|``."""
    xs, ys = pixel_grid((u.shape[1], u.shape[0]))
    v64 = np.asarray(v, np.float64)
    r = sample_field(u, xs + v64[..., 0], ys + v64[..., 1]) + v64
    mag = np.hypot(r[..., 0], r[..., 1])
    return float(mag[interior_mask((u.shape[1], u.shape[0]), margin)].max())


def _newton_step(grad, xs, ys, v, r):
    """``(I + grad u)^-1 r`` at ``x + v``; plain ``r`` where that is near singular."""
    g = sample_field(grad, xs + v[..., 0], ys + v[..., 1])
    a, b = 1.0 + g[..., 0], g[..., 2]
    c, d = g[..., 1], 1.0 + g[..., 3]
    det = a * d - b * c
    ok = det > 0.1
    det = np.where(ok, det, 1.0)
    sx = np.where(ok, (d * r[..., 0] - b * r[..., 1]) / det, r[..., 0])
    sy = np.where(ok, (a * r[..., 1] - c * r[..., 0]) / det, r[..., 1])
    return np.stack([sx, sy], axis=-1)


def invert_field(u, tol=0.01, max_iter=50, margin=INTERIOR_MARGIN):
    """Inverse of ``u``: the fixed point of ``v(x) = -u(x + v(x))``, starting from zero.

    Every pixel solves its own equation, so each iteration keeps, per
    pixel, whichever of the plain update ``-u(x + v)``, a Newton update and
    a half Newton update leaves the smallest residual.  For locally
    constant ``u`` all three coincide with the plain update.  Stops once the
    interior residual drops below ``tol``; raises :class:`NotConverged`
    (carrying the best residual) otherwise.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    u = np.asarray(u)
    if u.ndim != 3 or u.shape[-1] != 2:
        raise DimensionMismatch(f"not a displacement field: shape {u.shape}")
    u64 = u.astype(np.float64)
    xs, ys = pixel_grid((u.shape[1], u.shape[0]))
    # last axis: d/dx (ux, uy) then d/dy (ux, uy)
    grad = np.concatenate([np.gradient(u64, axis=1), np.gradient(u64, axis=0)], axis=-1)

    def residual(v):
        return sample_field(u64, xs + v[..., 0], ys + v[..., 1]) + v

    v = np.zeros_like(u64)
    r = residual(v)
    best = math.inf
    for it in range(1, max_iter + 1):
        step = _newton_step(grad, xs, ys, v, r)
        cands = [0.0 - (r - v), v - step, v - 0.5 * step]
        res = [residual(c) for c in cands]
        norms = np.stack([np.hypot(q[..., 0], q[..., 1]) for q in res])
        pick = np.argmin(norms, axis=0)[..., None]
        v = np.choose(pick, cands)
        r = np.choose(pick, res)
        v32 = v.astype(np.float32)
        achieved = inversion_residual(u64, v32, margin)
        best = min(best, achieved)
        if achieved < tol:
            return FieldInverse(v32, achieved, it)
    raise NotConverged(f"field inversion reached residual {best:.4g} px after {max_iter} "
                       f"iterations (tol {tol})", residual=best)


# ---------------------------------------------------------------------------
# control lattices (Catmull-Rom upsampling)


def lattice_size(n, spacing):
    """Nodes along an axis of ``n`` pixels: cover ``[0, n-1]`` plus one margin node per side."""
    return int(math.ceil((n - 1) / spacing)) + 3 if n > 1 else 3


def lattice_positions(n, spacing):
    return (np.arange(lattice_size(n, spacing)) - 1) * float(spacing)


def lattice_basis(coords, spacing, n_nodes):
    """Dense ``(len(coords), n_nodes)`` Catmull-Rom interpolation matrix.

    Node ``i`` sits at pixel coordinate ``(i - 1) * spacing``.
    """
    coords = np.asarray(coords, np.float64)
    s = coords / spacing + 1.0
    k = np.floor(s).astype(np.intp)
    w = catmull_rom_weights(s - k)
    B = np.zeros((coords.size, n_nodes), np.float64)
    rows = np.arange(coords.size)
    for j in range(4):
        np.add.at(B, (rows, np.clip(k + j - 1, 0, n_nodes - 1)), w[j])
    return B


def upsample_lattice(nodes, dims, spacing):
    """Dense float32 field from a ``(Ny, Nx, 2)`` node lattice."""
    nx, ny = dims[0], dims[1]
    nodes = np.asarray(nodes, np.float64)
    By = lattice_basis(np.arange(ny), spacing, nodes.shape[0])
    Bx = lattice_basis(np.arange(nx), spacing, nodes.shape[1])
    out = np.empty((ny, nx, 2), np.float64)
    for c in range(2):
        out[..., c] = By @ nodes[..., c] @ Bx.T
    return out.astype(np.float32)


def catmull_rom_overshoot(samples=10001):
    """Max of the 2D tensor kernel's Lebesgue function, by dense sampling."""
    w = catmull_rom_weights(np.linspace(0.0, 1.0, samples))
    one_d = sum(np.abs(wi) for wi in w).max()
    return float(one_d * one_d)


def as_field_stack(fields, z):
    return FieldStack(np.stack(fields) if len(fields) else np.zeros((0, 1, 1, 2), np.float32), z)
