"""Slice-stack volumes and displacement-field stacks on disk.

Volumes are held in memory as ``(nz, ny, nx)`` float32 arrays with
intensities in [0, 1].  On disk a volume is a directory of single-channel
PNG (or uncompressed TIFF) slices plus a ``stack.json`` sidecar.

Displacement fields are ``(ny, nx, 2)`` float32 arrays holding ``(ux, uy)``
per pixel.  A field stack is written as one raw little-endian float32 file
per slice (row-major, channels interleaved) plus a ``fields.json`` sidecar.
"""

import glob
import json
import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatch,
    HeaderMismatch,
    IoFailure,
    MissingSlice,
    TruncatedFile,
    UnsupportedFormat,
)
from .parallel import pmap

STACK_SIDECAR = "stack.json"
FIELDS_SIDECAR = "fields.json"
RASTER_EXTENSIONS = (".png", ".tif", ".tiff")

_INDEX_RE = re.compile(r"(\d+)(?!.*\d)")


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image.

    Parameters
    ----------
    voxels : ndarray, shape (nz, ny, nx)
        Intensities in [0, 1]; converted to float32 and frozen.
    spacing : tuple of float
        Physical voxel size ``(sx, sy, sz)`` in micrometres.
    provenance : dict
        Free-form metadata (source files, seed, pipeline step, ...).
    """

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=np.float32, copy=True)
        if vox.ndim == 2:
            vox = vox[None]
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise DimensionMismatch(f"volume must be 3D and non-empty, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)) or vox.min() < 0.0 or vox.max() > 1.0:
            raise ValueError("volume intensities must lie in [0, 1]")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def dims(self):
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    @property
    def nz(self):
        return self.voxels.shape[0]

    @property
    def slice_indices(self):
        """Original slice index of each stored slice (gaps mark dropped slices)."""
        idx = self.provenance.get("slice_indices")
        if idx is None:
            return tuple(range(self.nz))
        return tuple(int(i) for i in idx)

    def slice(self, k):
        return self.voxels[k]


@dataclass(frozen=True)
class FieldStack:
    """Per-slice backward displacement fields in pixel units.

    ``fields[k]`` belongs to original slice index ``z[k]``.
    """

    fields: np.ndarray
    z: tuple = None

    def __post_init__(self):
        f = np.array(self.fields, dtype=np.float32, copy=True)
        if f.ndim == 3:
            f = f[None]
        if f.ndim != 4 or f.shape[-1] != 2:
            raise DimensionMismatch(f"field stack must have shape (n, ny, nx, 2), got {f.shape}")
        z = tuple(range(f.shape[0])) if self.z is None else tuple(int(i) for i in self.z)
        if len(z) != f.shape[0]:
            raise DimensionMismatch(f"{len(z)} slice indices for {f.shape[0]} fields")
        if list(z) != sorted(set(z)):
            raise ValueError("slice indices must be strictly increasing")
        f.flags.writeable = False
        object.__setattr__(self, "fields", f)
        object.__setattr__(self, "z", z)

    @property
    def dims(self):
        return (self.fields.shape[2], self.fields.shape[1])

    def __len__(self):
        return self.fields.shape[0]

    def __getitem__(self, k):
        return self.fields[k]

    def by_index(self, z):
        return self.fields[self.z.index(z)]

    def subset(self, zs):
        zs = list(zs)
        return FieldStack(np.stack([self.by_index(z) for z in zs]) if zs else
                          np.zeros((0,) + self.fields.shape[1:], np.float32), zs)

    @classmethod
    def zeros(cls, nx, ny, z):
        z = list(z)
        return cls(np.zeros((len(z), ny, nx, 2), np.float32), z)


# ---------------------------------------------------------------------------
# raster stacks


def _slice_files(path_pattern):
    if os.path.isdir(path_pattern):
        files = [os.path.join(path_pattern, f) for f in os.listdir(path_pattern)
                 if f.lower().endswith(RASTER_EXTENSIONS)]
    else:
        files = glob.glob(path_pattern)
    indexed = []
    for f in files:
        stem = os.path.splitext(os.path.basename(f))[0]
        m = _INDEX_RE.search(stem)
        if m is None:
            raise UnsupportedFormat(f"no numeric slice index in file name {f!r}")
        indexed.append((int(m.group(1)), len(m.group(1)), f))
    return sorted(indexed)


def _read_raster(path):
    ext = os.path.splitext(path)[1].lower()
    if ext not in RASTER_EXTENSIONS:
        raise UnsupportedFormat(f"unsupported raster extension: {path}")
    try:
        with Image.open(path) as im:
            if im.format == "TIFF":
                comp = im.info.get("compression", "raw")
                if comp not in ("raw", None):
                    raise UnsupportedFormat(f"compressed TIFF ({comp}) not supported: {path}")
            mode = im.mode
            arr = np.array(im)
    except UnsupportedFormat:
        raise
    except OSError as exc:
        raise UnsupportedFormat(f"cannot read {path}: {exc}") from exc
    if mode == "L":
        bits = 8
    elif mode.startswith("I;16"):
        bits = 16
    elif mode == "I" and arr.size and arr.min() >= 0 and arr.max() <= 65535:
        bits = 16
    else:
        raise UnsupportedFormat(f"{path}: mode {mode!r} is not single-channel 8/16-bit")
    return arr, bits


def load_stack(path_pattern, bit_depth_hint=None):
    """Load a slice stack from a directory or glob pattern.

    Slices are ordered by the numeric index in their file names and
    intensities are divided by ``2**bits - 1``.  If the directory holds a
    ``stack.json`` sidecar, its spacing and provenance are used.
    """
    indexed = _slice_files(path_pattern)
    if not indexed:
        raise IoFailure(f"no slice files match {path_pattern!r}")
    indices = [i for i, _, _ in indexed]
    if len(set(indices)) != len(indices):
        raise UnsupportedFormat("duplicate slice indices in stack")
    width = indexed[0][1]
    for expected, actual in zip(range(indices[0], indices[-1] + 1), indices):
        if expected != actual:
            raise MissingSlice(f"missing slice index {expected:0{width}d}", index=expected)

    rasters = pmap(lambda item: _read_raster(item[2]), indexed)
    shape = rasters[0][0].shape
    bits = {b for _, b in rasters}
    for (_, _, path), (arr, _) in zip(indexed, rasters):
        if arr.ndim != 2:
            raise UnsupportedFormat(f"{path}: not a single-channel image")
        if arr.shape != shape:
            raise DimensionMismatch(f"{path}: shape {arr.shape[::-1]} differs from {shape[::-1]}")
    if bit_depth_hint is not None:
        depth = int(bit_depth_hint)
        if depth not in (8, 16):
            raise UnsupportedFormat(f"bit depth must be 8 or 16, got {depth}")
    elif len(bits) > 1:
        raise UnsupportedFormat("stack mixes 8- and 16-bit slices")
    else:
        depth = bits.pop()
    maxval = float(2 ** depth - 1)
    vox = np.stack([np.asarray(a, np.float64) for a, _ in rasters]) / maxval
    if vox.max() > 1.0:
        raise UnsupportedFormat(f"pixel values exceed the {depth}-bit range")

    spacing = (1.0, 1.0, 1.0)
    provenance = {}
    directory = path_pattern if os.path.isdir(path_pattern) else os.path.dirname(indexed[0][2])
    sidecar = os.path.join(directory, STACK_SIDECAR)
    if os.path.exists(sidecar):
        meta = _read_json(sidecar)
        if list(meta.get("dims", [])) not in ([], [shape[1], shape[0], len(indexed)]):
            raise HeaderMismatch(f"{sidecar}: dims {meta['dims']} do not match the slices")
        spacing = tuple(meta.get("spacing_um", spacing))
        provenance.update(meta.get("provenance", {}))
    provenance["source_files"] = [os.path.basename(p) for _, _, p in indexed]
    provenance["bit_depth"] = depth
    return Volume(vox.astype(np.float32), spacing, provenance)


def quantize(values, bit_depth):
    maxval = 2 ** bit_depth - 1
    q = np.floor(np.asarray(values, np.float64) * maxval + 0.5)
    return np.clip(q, 0, maxval).astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_stack(v, directory, bit_depth=16, prefix="slice_"):
    """Write one PNG per slice plus ``stack.json``; round-to-nearest quantization."""
    if bit_depth not in (8, 16):
        raise UnsupportedFormat(f"bit depth must be 8 or 16, got {bit_depth}")
    width = max(4, len(str(v.nz - 1)))
    try:
        os.makedirs(directory, exist_ok=True)
        # stale slices from an earlier, longer stack would otherwise be picked up
        for old in _slice_files(directory):
            os.remove(old[2])

        def write(k):
            path = os.path.join(directory, f"{prefix}{k:0{width}d}.png")
            Image.fromarray(quantize(v.voxels[k], bit_depth)).save(path)

        pmap(write, range(v.nz))
        meta = {
            "dims": list(v.dims),
            "spacing_um": list(v.spacing),
            "bit_depth": bit_depth,
            "provenance": _jsonable(v.provenance),
        }
        _write_json(os.path.join(directory, STACK_SIDECAR), meta)
    except OSError as exc:
        raise IoFailure(f"cannot write stack to {directory}: {exc}") from exc


# ---------------------------------------------------------------------------
# displacement fields


def field_to_bytes(u):
    return np.ascontiguousarray(u, dtype="<f4").tobytes()


def save_field_stack(f, directory, extra=None):
    try:
        os.makedirs(directory, exist_ok=True)
        for name in os.listdir(directory):
            if name.startswith("field_") and name.endswith(".f32"):
                os.remove(os.path.join(directory, name))
        for z, u in zip(f.z, f.fields):
            with open(os.path.join(directory, f"field_{z:04d}.f32"), "wb") as fh:
                fh.write(field_to_bytes(u))
        meta = {
            "dims": list(f.dims),
            "nz": len(f),
            "convention": "backward",
            "origin": "pixel_center",
            "units": "px",
            "dtype": "f32le",
            "layout": "row_major_xy_interleaved",
            "slice_indices": list(f.z),
        }
        if extra:
            meta.update(extra)
        _write_json(os.path.join(directory, FIELDS_SIDECAR), meta)
    except OSError as exc:
        raise IoFailure(f"cannot write fields to {directory}: {exc}") from exc


def read_fields_sidecar(directory):
    path = os.path.join(directory, FIELDS_SIDECAR)
    if not os.path.exists(path):
        raise IoFailure(f"missing {FIELDS_SIDECAR} in {directory}")
    return _read_json(path)


def load_field_stack(directory):
    meta = read_fields_sidecar(directory)
    try:
        nx, ny = (int(d) for d in meta["dims"])
        nz = int(meta["nz"])
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderMismatch(f"malformed {FIELDS_SIDECAR}: {exc}") from exc
    if meta.get("dtype", "f32le") != "f32le":
        raise HeaderMismatch(f"unsupported dtype {meta['dtype']!r}")
    if meta.get("layout", "row_major_xy_interleaved") != "row_major_xy_interleaved":
        raise HeaderMismatch(f"unsupported layout {meta['layout']!r}")
    zs = [int(z) for z in meta.get("slice_indices", range(nz))]
    if len(zs) != nz:
        raise HeaderMismatch(f"nz={nz} but {len(zs)} slice indices listed")
    expected = nx * ny * 2 * 4
    out = np.empty((nz, ny, nx, 2), np.float32)
    for k, z in enumerate(zs):
        path = os.path.join(directory, f"field_{z:04d}.f32")
        if not os.path.exists(path):
            raise MissingSlice(f"missing field file for slice {z}", index=z)
        with open(path, "rb") as fh:
            payload = fh.read()
        if len(payload) % 8:
            raise TruncatedFile(f"{path}: {len(payload)} bytes is not a whole number of pixels")
        if len(payload) != expected:
            raise HeaderMismatch(
                f"{path}: {len(payload)} bytes, sidecar dims {nx}x{ny} need {expected}")
        out[k] = np.frombuffer(payload, dtype="<f4").reshape(ny, nx, 2)
    return FieldStack(out, zs)


# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
