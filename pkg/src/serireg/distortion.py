"""Seeded per-slice cutting distortions with exact ground truth.

Every surviving slice ``z`` of the input volume is warped by the backward
field ``w_z = compose(elastic_z, rigid_to_field(rigid_z))`` and then
gamma-jittered.  The fields are recorded so any registration can later be
scored against them.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import InvalidSpec, NotConverged
from .geometry import (
    RigidTransform2D,
    compose_fields,
    image_center,
    invert_field,
    lattice_size,
    rigid_to_field,
    upsample_lattice,
    warp_slice,
)
from .parallel import pmap
from .volume_io import (
    FieldStack,
    Volume,
    _read_json,
    _write_json,
    load_field_stack,
    save_field_stack,
)

RECORD_FILE = "record.json"


@dataclass(frozen=True)
class DistortionSpec:
    seed: int = 0
    sigma_theta: float = 0.0
    sigma_t: float = 0.0
    grid_px: float = 64.0
    sigma_e: float = 0.0
    sigma_gamma: float = 0.0
    p_drop: float = 0.0
    clamp_k: float = 3.0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InvalidSpec(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        for name in ("sigma_theta", "sigma_t", "sigma_e", "sigma_gamma"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise InvalidSpec(f"{name} must be finite and >= 0, got {val}")
        if not self.grid_px >= 4:
            raise InvalidSpec(f"elastic grid spacing must be >= 4 px, got {self.grid_px}")
        if not 0 <= self.p_drop <= 0.5:
            raise InvalidSpec(f"p_drop must lie in [0, 0.5], got {self.p_drop}")
        if not self.clamp_k > 0:
            raise InvalidSpec(f"clamp_k must be positive, got {self.clamp_k}")
        object.__setattr__(self, "seed", int(self.seed))

    def to_config(self):
        return {
            "seed": self.seed,
            "sigma_theta_rad": self.sigma_theta,
            "sigma_t_px": self.sigma_t,
            "elastic": {"grid_px": self.grid_px, "sigma_px": self.sigma_e},
            "intensity": {"sigma_gamma": self.sigma_gamma},
            "p_drop": self.p_drop,
            "clamp_k": self.clamp_k,
        }

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg)
        known = {"seed", "sigma_theta_rad", "sigma_t_px", "elastic", "intensity", "p_drop",
                 "clamp_k", "preset"}
        unknown = set(cfg) - known
        if unknown:
            raise InvalidSpec(f"unknown distortion keys: {sorted(unknown)}")
        preset = cfg.pop("preset", None)
        if preset is not None and preset not in PRESETS:
            raise InvalidSpec(f"unknown distortion preset {preset!r}; expected one of {sorted(PRESETS)}")
        base = PRESETS[preset] if preset is not None else cls()
        elastic = cfg.get("elastic", {})
        intensity = cfg.get("intensity", {})
        if set(elastic) - {"grid_px", "sigma_px"} or set(intensity) - {"sigma_gamma"}:
            raise InvalidSpec("unknown keys in distortion.elastic or distortion.intensity")
        try:
            return cls(
                seed=int(cfg.get("seed", base.seed)),
                sigma_theta=float(cfg.get("sigma_theta_rad", base.sigma_theta)),
                sigma_t=float(cfg.get("sigma_t_px", base.sigma_t)),
                grid_px=float(elastic.get("grid_px", base.grid_px)),
                sigma_e=float(elastic.get("sigma_px", base.sigma_e)),
                sigma_gamma=float(intensity.get("sigma_gamma", base.sigma_gamma)),
                p_drop=float(cfg.get("p_drop", base.p_drop)),
                clamp_k=float(cfg.get("clamp_k", base.clamp_k)),
            )
        except (TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad distortion value: {exc}") from exc


# Implementer-chosen magnitudes; none of these come from published experiments.
PRESETS = {
    "none": DistortionSpec(),
    "default": DistortionSpec(sigma_theta=math.radians(2.0), sigma_t=5.0, grid_px=64.0,
                              sigma_e=3.0, sigma_gamma=0.05, p_drop=0.02),
    "rigid_only": DistortionSpec(sigma_theta=math.radians(2.0), sigma_t=5.0),
    "elastic_only": DistortionSpec(grid_px=32.0, sigma_e=3.0),
}


@dataclass
class DistortionRecord:
    """Everything sampled while distorting a volume."""

    spec: DistortionSpec
    dims: tuple
    slice_indices: tuple
    rigid: list
    gamma: list
    elastic: FieldStack
    composed: FieldStack
    dropped_slices: list = field(default_factory=list)
    algorithm: str = rng.ALGORITHM

    @property
    def surviving(self):
        dropped = set(self.dropped_slices)
        return [z for z in self.slice_indices if z not in dropped]

    def rigid_for(self, z):
        return self.rigid[self.slice_indices.index(z)]

    def to_json(self):
        slices = []
        dropped = set(self.dropped_slices)
        for z, T, g in zip(self.slice_indices, self.rigid, self.gamma):
            entry = {"z": z, "gamma": g, "dropped": z in dropped}
            entry.update(T.to_dict())
            slices.append(entry)
        return {
            "spec": self.spec.to_config(),
            "rng_algorithm": self.algorithm,
            "dims": list(self.dims),
            "dropped_slices": list(self.dropped_slices),
            "slices": slices,
        }

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        _write_json(os.path.join(directory, RECORD_FILE), self.to_json())
        save_field_stack(self.composed, os.path.join(directory, "ground_truth"))
        save_field_stack(self.elastic, os.path.join(directory, "elastic"))

    @classmethod
    def load(cls, directory):
        meta = _read_json(os.path.join(directory, RECORD_FILE))
        slices = meta["slices"]
        return cls(
            spec=DistortionSpec.from_config(meta["spec"]),
            dims=tuple(meta["dims"]),
            slice_indices=tuple(s["z"] for s in slices),
            rigid=[RigidTransform2D.from_dict(s) for s in slices],
            gamma=[float(s["gamma"]) for s in slices],
            elastic=load_field_stack(os.path.join(directory, "elastic")),
            composed=load_field_stack(os.path.join(directory, "ground_truth")),
            dropped_slices=list(meta["dropped_slices"]),
            algorithm=meta.get("rng_algorithm", rng.ALGORITHM),
        )


def sample_rigid(spec, z, dims):
    """Rigid jitter for slice ``z``, rotating about the image centre."""
    g = rng.substream(spec.seed, z, "rigid")
    theta = spec.sigma_theta * g.standard_normal() + 0.0
    tx, ty = spec.sigma_t * g.standard_normal(2) + 0.0
    cx, cy = image_center(dims)
    return RigidTransform2D(theta, tx, ty, cx, cy)


def elastic_nodes(spec, z, dims):
    """Clamped Gaussian node displacements, shape ``(Ny, Nx, 2)``."""
    nx, ny = dims[0], dims[1]
    shape = (lattice_size(ny, spec.grid_px), lattice_size(nx, spec.grid_px), 2)
    if spec.sigma_e == 0:
        return np.zeros(shape)
    g = rng.substream(spec.seed, z, "elastic")
    lim = spec.clamp_k * spec.sigma_e
    return np.clip(spec.sigma_e * g.standard_normal(shape), -lim, lim)


def sample_elastic(spec, z, dims):
    nx, ny = dims[0], dims[1]
    if spec.sigma_e == 0:
        return np.zeros((ny, nx, 2), np.float32)
    return upsample_lattice(elastic_nodes(spec, z, dims), dims, spec.grid_px)


def sample_gamma(spec, z):
    if spec.sigma_gamma == 0:
        return 1.0
    return float(math.exp(spec.sigma_gamma * rng.substream(spec.seed, z, "intensity").standard_normal()))


def sample_drops(spec, indices):
    """Independent drops, suppressing the second of any adjacent pair."""
    dropped = []
    for z in indices:
        if spec.p_drop == 0:
            continue
        if rng.substream(spec.seed, z, "drop").random() < spec.p_drop:
            if dropped and dropped[-1] == z - 1:
                continue
            dropped.append(z)
    return dropped


def gamma_adjust(img, gamma):
    if gamma == 1.0:
        return np.asarray(img, np.float32)
    return np.power(np.asarray(img, np.float64), gamma).astype(np.float32)


def distort_volume(v, spec):
    """Distort every slice of ``v``; returns ``(distorted, record)``.

    Dropped slices are absent from the distorted volume; its provenance
    lists the original index of each remaining slice.
    """
    nx, ny, _ = v.dims
    indices = list(v.slice_indices)

    def one(k):
        z = indices[k]
        T = sample_rigid(spec, z, (nx, ny))
        e = sample_elastic(spec, z, (nx, ny))
        w = compose_fields(e, rigid_to_field(T, (nx, ny)))
        gamma = sample_gamma(spec, z)
        out = gamma_adjust(warp_slice(v.voxels[k], w, "bilinear"), gamma)
        return T, e, w, gamma, out

    parts = pmap(one, range(len(indices)))
    dropped = sample_drops(spec, indices)
    keep = [k for k, z in enumerate(indices) if z not in set(dropped)]
    record = DistortionRecord(
        spec=spec,
        dims=(nx, ny, len(indices)),
        slice_indices=tuple(indices),
        rigid=[p[0] for p in parts],
        gamma=[p[3] for p in parts],
        elastic=FieldStack(np.stack([p[1] for p in parts]), indices),
        composed=FieldStack(np.stack([p[2] for p in parts]), indices),
        dropped_slices=dropped,
    )
    provenance = dict(v.provenance)
    provenance.update({
        "step": "distort",
        "slice_indices": [indices[k] for k in keep],
        "distortion": spec.to_config(),
        "rng_algorithm": rng.ALGORITHM,
    })
    provenance.pop("source_files", None)
    distorted = Volume(np.stack([parts[k][4] for k in keep]), v.spacing, provenance)
    return distorted, record


def oracle_recovery(record, tol=0.01, max_iter=100):
    """Exact inverse of each surviving slice's ground-truth field."""
    zs = record.surviving

    def one(z):
        try:
            return invert_field(record.composed.by_index(z), tol, max_iter).field
        except NotConverged as exc:
            raise NotConverged(f"slice {z}: {exc}", residual=exc.residual, slice_index=z) from exc

    fields = pmap(one, zs)
    nx, ny = record.dims[0], record.dims[1]
    if not fields:
        return FieldStack(np.zeros((0, ny, nx, 2), np.float32), [])
    return FieldStack(np.stack(fields), zs)
