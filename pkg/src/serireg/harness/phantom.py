"""Synthetic, innately registered test volumes."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .. import rng
from ..errors import InvalidSpec
from ..volume_io import Volume

KINDS = ("bent_tube", "spheres", "checker_noise")

DEFAULTS = {
    "bent_tube": {"radius": 16.0, "amplitude": 10.0, "period": 64.0, "level": 0.6,
                  "texture_std": 0.1, "background": 0.0},
    "spheres": {"count": 8, "radius_min": 6.0, "radius_max": 14.0, "level": 0.8},
    "checker_noise": {"cell": 16, "noise": 0.05},
}


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "bent_tube"
    dims: tuple = (128, 128, 64)
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown phantom kind {self.kind!r}; expected one of {KINDS}")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidSpec(f"phantom dims must be three positive integers, got {self.dims}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise InvalidSpec(f"unknown {self.kind} parameters: {sorted(unknown)}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "params", {**DEFAULTS[self.kind], **self.params})

    def to_dict(self):
        return {"kind": self.kind, "dims": list(self.dims), "seed": self.seed, **self.params}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            return cls(d.pop("kind", "bent_tube"), tuple(d.pop("dims", (128, 128, 64))),
                       int(d.pop("seed", 0)), d)
        except (TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad phantom spec: {exc}") from exc


def tube_center(spec, z):
    nx, ny, _ = spec.dims
    p = spec.params
    cx = (nx - 1) / 2.0 + p["amplitude"] * math.sin(2 * math.pi * z / p["period"])
    return cx, (ny - 1) / 2.0


def _texture(shape, seed, std):
    # octaves at 1, 2 and 4 px so coarse pyramid levels still see structure
    g = rng.substream(seed, 0, "texture")
    tex = np.zeros(shape)
    for sigma in (1.0, 2.0, 4.0):
        layer = gaussian_filter(g.standard_normal(shape), sigma, mode="wrap")
        tex += layer / layer.std()
    return tex * (std / tex.std())


def _bent_tube(spec):
    nx, ny, nz = spec.dims
    p = spec.params
    if min(spec.dims) < 32:
        raise InvalidSpec("bent_tube needs at least 32 voxels per axis")
    if p["radius"] <= 0 or p["period"] <= 0:
        raise InvalidSpec("tube radius and bend period must be positive")
    if not 0 <= p["background"] < 1:
        raise InvalidSpec("background level must lie in [0, 1)")
    reach = abs(p["amplitude"]) + p["radius"] + 1.5
    if reach > (nx - 1) / 2.0 or p["radius"] + 1.5 > (ny - 1) / 2.0:
        raise InvalidSpec("tube leaves the domain: reduce radius or bend amplitude")
    ys, xs = np.mgrid[0:ny, 0:nx].astype(np.float64)
    # texture is anchored to the specimen, not to the tube axis
    tex = _texture((ny, nx), spec.seed, p["texture_std"])
    tissue = np.clip(p["level"] + tex, 0.0, 1.0)
    medium = np.clip(p["background"] + tex, 0.0, 1.0) if p["background"] > 0 else 0.0
    vox = np.empty((nz, ny, nx))
    for z in range(nz):
        cx, cy = tube_center(spec, z)
        coverage = np.clip(p["radius"] + 0.5 - np.hypot(xs - cx, ys - cy), 0.0, 1.0)
        vox[z] = coverage * tissue + (1.0 - coverage) * medium
    return vox


def _spheres(spec):
    nx, ny, nz = spec.dims
    p = spec.params
    g = rng.substream(spec.seed, 0, "phantom")
    rmin, rmax = float(p["radius_min"]), float(p["radius_max"])
    if not 0 < rmin <= rmax or 2 * rmax + 2 > min(spec.dims):
        raise InvalidSpec("sphere radii must satisfy 0 < min <= max and fit in the volume")
    spheres = []
    for _ in range(int(p["count"])):
        for _attempt in range(1000):
            r = g.uniform(rmin, rmax)
            c = np.array([g.uniform(r + 1, n - r - 2) for n in (nx, ny, nz)])
            if all(np.linalg.norm(c - c2) > r + r2 + 2 for c2, r2 in spheres):
                spheres.append((c, r))
                break
        else:
            raise InvalidSpec("could not place non-overlapping spheres; lower the count")
    zz, yy, xx = np.mgrid[0:nz, 0:ny, 0:nx].astype(np.float64)
    vox = np.zeros((nz, ny, nx))
    for c, r in spheres:
        d = np.sqrt((xx - c[0]) ** 2 + (yy - c[1]) ** 2 + (zz - c[2]) ** 2)
        vox = np.maximum(vox, p["level"] * np.clip(r + 0.5 - d, 0.0, 1.0))
    return vox, spheres


def _checker_noise(spec):
    nx, ny, nz = spec.dims
    cell = int(spec.params["cell"])
    if cell < 1:
        raise InvalidSpec("checker cell size must be >= 1")
    g = rng.substream(spec.seed, 0, "phantom")
    cells = g.uniform(0.2, 0.8, size=(nz // cell + 1, ny // cell + 1, nx // cell + 1))
    zz, yy, xx = np.mgrid[0:nz, 0:ny, 0:nx]
    vox = cells[zz // cell, yy // cell, xx // cell]
    noise = rng.substream(spec.seed, 0, "texture").standard_normal(vox.shape)
    return np.clip(vox + spec.params["noise"] * noise, 0.0, 1.0)


def generate_phantom(spec):
    """Deterministic phantom volume for ``spec``."""
    if spec.kind == "bent_tube":
        vox = _bent_tube(spec)
    elif spec.kind == "spheres":
        vox, _ = _spheres(spec)
    else:
        vox = _checker_noise(spec)
    return Volume(vox.astype(np.float32), provenance={"step": "phantom", "phantom": spec.to_dict()})


def sphere_layout(spec):
    """Centres and radii of a spheres phantom, for analytic checks."""
    return _spheres(spec)[1]
