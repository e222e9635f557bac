"""Method descriptions and stack-level registration strategies."""

import math
from dataclasses import dataclass, field, fields

import numpy as np

from ..errors import ConfigError, SeriregError
from ..geometry import interior_mask, rigid_to_field, warp_slice
from ..parallel import pmap
from ..volume_io import FieldStack
from .elastic import register_elastic
from .ncc import check_not_flat, default_radius, ncc, pyramid, pyramid_translation, usable_levels
from .rigid import rigid_search

METHOD_KINDS = ("identity", "translation", "rigid", "elastic")
STRATEGIES = ("chain_to_previous", "fixed_reference")
_STRATEGY_ALIASES = {"chain": "chain_to_previous", "fixed": "fixed_reference",
                     "reference": "fixed_reference"}


@dataclass(frozen=True)
class RegistrationMethod:
    kind: str = "rigid"
    pyramid_levels: int = 3
    similarity: str = "ncc"
    grid_px: float = 32.0
    lam: float = 1e-6
    step: float = 0.5
    max_iter: int = 200
    grad_tol: float = 1e-9
    theta_max_deg: float = 15.0
    name: str = None

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method {self.kind!r}; expected one of {METHOD_KINDS}")
        if int(self.pyramid_levels) < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if self.lam < 0:
            raise ConfigError("elastic lambda must be >= 0")
        if self.similarity not in ("ssd", "ncc"):
            raise ConfigError(f"similarity must be 'ssd' or 'ncc', got {self.similarity!r}")
        if self.name is None:
            object.__setattr__(self, "name", self.kind)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        elastic = d.pop("elastic", {})
        for key, target in (("grid_px", "grid_px"), ("lambda", "lam"), ("step", "step"),
                            ("max_iter", "max_iter"), ("grad_tol", "grad_tol")):
            if key in elastic:
                d[target] = elastic[key]
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown method options: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class StackStrategy:
    kind: str = "chain_to_previous"
    reference: int = None

    def __post_init__(self):
        kind = _STRATEGY_ALIASES.get(self.kind, self.kind)
        if kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        object.__setattr__(self, "kind", kind)


@dataclass
class RegistrationResult:
    """Correction fields for every registered slice plus per-slice diagnostics."""

    fields: FieldStack
    diagnostics: list = field(default_factory=list)
    method: str = "identity"
    strategy: str = ""

    @property
    def z(self):
        return self.fields.z


@dataclass
class PairResult:
    field: np.ndarray
    similarity: float
    iterations: int
    converged: bool


def _final_ncc(fixed, moving, u):
    ny, nx = fixed.shape
    return ncc(fixed, warp_slice(moving, u), interior_mask((nx, ny)))


def register_pair(method, fixed, moving):
    """Correction field mapping ``moving`` onto ``fixed`` with one method."""
    ny, nx = np.shape(fixed)
    if method.kind == "identity":
        u = np.zeros((ny, nx, 2), np.float32)
        return PairResult(u, _final_ncc(fixed, moving, u), 0, True)
    if method.kind == "translation":
        fixed64 = np.asarray(fixed, np.float64)
        moving64 = np.asarray(moving, np.float64)
        check_not_flat(fixed64, moving64)
        levels = usable_levels(fixed64.shape, method.pyramid_levels)
        tx, ty, score = pyramid_translation(pyramid(fixed64, levels), pyramid(moving64, levels),
                                            default_radius(fixed64.shape))
        u = np.empty((ny, nx, 2), np.float32)
        u[..., 0] = tx
        u[..., 1] = ty
        return PairResult(u, float(score), 1, bool(score >= 0.5))
    if method.kind == "rigid":
        fit = rigid_search(fixed, moving, method.pyramid_levels, method.theta_max_deg)
        return PairResult(rigid_to_field(fit.transform, (nx, ny)), fit.ncc, fit.evaluations,
                          fit.converged)
    fit = register_elastic(fixed, moving, method.pyramid_levels, method.similarity, method.grid_px,
                           method.lam, method.step, method.max_iter, method.grad_tol,
                           method.theta_max_deg)
    return PairResult(fit.field, _final_ncc(fixed, moving, fit.field), fit.iterations, fit.converged)


def _with_slice(exc, z):
    exc.args = (f"slice {z}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
    exc.slice_index = z
    return exc


def register_stack(v, method, strategy=None):
    """Register every slice of ``v``; fails fast on the first slice error."""
    strategy = strategy or StackStrategy()
    if v.nz < 2:
        raise ConfigError("stack registration needs at least two slices")
    zs = list(v.slice_indices)
    nx, ny, _ = v.dims
    out = [None] * v.nz

    def run(k, fixed):
        try:
            return register_pair(method, fixed, v.voxels[k])
        except SeriregError as exc:
            raise _with_slice(exc, zs[k])

    if strategy.kind == "chain_to_previous":
        out[0] = PairResult(np.zeros((ny, nx, 2), np.float32), math.nan, 0, True)
        corrected_prev = v.voxels[0]
        for k in range(1, v.nz):
            out[k] = run(k, corrected_prev)
            corrected_prev = warp_slice(v.voxels[k], out[k].field)
    else:
        if strategy.reference is None:
            ref = v.nz // 2
        elif strategy.reference in zs:
            ref = zs.index(strategy.reference)
        else:
            raise ConfigError(f"reference slice {strategy.reference} is not in the stack")
        fixed = v.voxels[ref]

        def one(k):
            if k == ref:
                return PairResult(np.zeros((ny, nx, 2), np.float32), math.nan, 0, True)
            return run(k, fixed)

        out = pmap(one, range(v.nz))

    diagnostics = [{"z": z, "similarity_final": r.similarity, "iterations": r.iterations,
                    "converged": bool(r.converged)} for z, r in zip(zs, out)]
    return RegistrationResult(FieldStack(np.stack([r.field for r in out]), zs), diagnostics,
                              method.name, strategy.kind)
