"""Exchange of registration results with external tools.

A result directory holds a field stack (``fields.json`` + ``field_*.f32``)
and ``diagnostics.csv``.  Rigid-only tools may instead provide
``transforms.json``: either an array of
``{z, theta_rad, tx_px, ty_px, cx_px, cy_px}`` objects or an object with a
``transforms`` array and optional ``convention``, ``origin`` and ``dims`` keys.
Each transform is the correction applied to the distorted slice, i.e. the
field is ``rigid_to_field(transform)``.
"""

import csv
import json
import math
import os

import numpy as np

from ..errors import ConfigError, ConventionMismatch, DataError, IoFailure, MissingSlice
from ..geometry import RigidTransform2D, rigid_to_field
from ..volume_io import FieldStack, load_field_stack, read_fields_sidecar, save_field_stack
from .stack import RegistrationResult

DIAGNOSTICS_FILE = "diagnostics.csv"
DIAGNOSTIC_COLUMNS = ("z", "similarity_final", "iterations", "converged")
TRANSFORMS_FILE = "transforms.json"


def _check_convention(meta, source):
    convention = meta.get("convention", "backward")
    origin = meta.get("origin", "pixel_center")
    if convention != "backward":
        raise ConventionMismatch(f"{source}: convention {convention!r}, expected 'backward'")
    if origin != "pixel_center":
        raise ConventionMismatch(f"{source}: origin {origin!r}, expected 'pixel_center'")


def _fmt(x):
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_diagnostics(path, diagnostics):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTIC_COLUMNS)
        for d in diagnostics:
            w.writerow([_fmt(d[c]) for c in DIAGNOSTIC_COLUMNS])


def read_diagnostics(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append({"z": int(row["z"]), "similarity_final": float(row["similarity_final"]),
                         "iterations": int(row["iterations"]),
                         "converged": row["converged"].strip().lower() in ("1", "true")})
    return rows


def export_result(result, directory):
    """Write ``result`` in the exchange format read by :func:`import_external`."""
    try:
        save_field_stack(result.fields, directory,
                         extra={"method": result.method, "strategy": result.strategy})
        write_diagnostics(os.path.join(directory, DIAGNOSTICS_FILE), result.diagnostics)
    except OSError as exc:
        raise IoFailure(f"cannot write result to {directory}: {exc}") from exc


def _select(stack, expected_z, source):
    if expected_z is None:
        return stack
    have = set(stack.z)
    for z in expected_z:
        if z not in have:
            raise MissingSlice(f"{source}: no result for slice {z}", index=z)
    return stack.subset(expected_z)


def _load_transforms(directory, dims):
    path = os.path.join(directory, TRANSFORMS_FILE)
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    meta = {}
    if isinstance(payload, dict):
        meta = payload
        entries = payload.get("transforms", [])
    else:
        entries = payload
    sidecar = os.path.join(directory, "result.json")
    if os.path.exists(sidecar):
        with open(sidecar, encoding="utf-8") as fh:
            meta = {**json.load(fh), **meta}
    _check_convention(meta, path)
    dims = dims or meta.get("dims")
    if dims is None:
        raise ConfigError("rigid_params import needs slice dims (argument or 'dims' key)")
    nx, ny = int(dims[0]), int(dims[1])
    by_z = {}
    for e in entries:
        try:
            z = int(e["z"])
            T = RigidTransform2D(float(e["theta_rad"]), float(e["tx_px"]), float(e["ty_px"]),
                                 float(e.get("cx_px", (nx - 1) / 2.0)),
                                 float(e.get("cy_px", (ny - 1) / 2.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed transform entry {e!r}") from exc
        if z in by_z:
            raise DataError(f"{path}: duplicate entry for slice {z}")
        by_z[z] = T
    zs = sorted(by_z)
    fields = [rigid_to_field(by_z[z], (nx, ny)) for z in zs]
    stack = FieldStack(np.stack(fields) if fields else np.zeros((0, ny, nx, 2), np.float32), zs)
    return stack, meta


def import_external(directory, kind="fields", dims=None, expected_z=None, name=None):
    """Load an externally produced result as a :class:`RegistrationResult`.

    ``expected_z`` lists the slices that must be present; extra slices are
    ignored, missing ones raise :class:`MissingSlice`.
    """
    if kind == "fields":
        meta = read_fields_sidecar(directory)
        _check_convention(meta, os.path.join(directory, "fields.json"))
        stack = load_field_stack(directory)
    elif kind == "rigid_params":
        stack, meta = _load_transforms(directory, dims)
    else:
        raise ConfigError(f"unknown external result kind {kind!r}")
    stack = _select(stack, expected_z, directory)

    diag_path = os.path.join(directory, DIAGNOSTICS_FILE)
    diag = {}
    if os.path.exists(diag_path):
        diag = {d["z"]: d for d in read_diagnostics(diag_path)}
    diagnostics = [diag.get(z, {"z": z, "similarity_final": math.nan, "iterations": 0,
                                "converged": True}) for z in stack.z]
    return RegistrationResult(stack, diagnostics, name or meta.get("method", "external"),
                              meta.get("strategy", "external"))
