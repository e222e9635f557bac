"""Scoring registration results against distortion ground truth.

The residual of a correction ``r`` applied after a distortion ``d`` is the
backward field ``e = compose(r, d)``; a perfect registration gives ``e = 0``.
All aggregate statistics are computed over the pooled masked pixels of
every slice, gathered in slice order.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import binary_erosion

from .errors import DimensionMismatch, EmptyMask, FlatImage, SliceSetMismatch
from .geometry import INTERIOR_MARGIN, compose_fields, interior_mask, warp_slice
from .parallel import pmap

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
STATS = ("mean", "rms", "median", "p95", "max")
SIMILARITY_KEYS = ("mse", "psnr_db", "ncc", "ssim")
CSV_COLUMNS = ("z", "mean_px", "rms_px", "median_px", "p95_px", "max_px", "mse", "psnr_db",
               "ncc", "ssim", "m_x_px", "m_y_px", "cum_drift_px")


@dataclass(frozen=True)
class EvalOptions:
    mask_threshold: float = 0.1
    margin: int = INTERIOR_MARGIN
    drift_window: int = 9

    def __post_init__(self):
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError("mask threshold must lie in [0, 1]")
        if self.margin < 0:
            raise ValueError("mask margin must be >= 0")
        if self.drift_window < 1 or self.drift_window % 2 == 0:
            raise ValueError("drift window must be a positive odd integer")


def error_field(d, r):
    """Residual backward field of correction ``r`` applied after distortion ``d``."""
    if np.shape(d) != np.shape(r):
        raise DimensionMismatch(f"field shapes differ: {np.shape(d)} vs {np.shape(r)}")
    return compose_fields(r, d)


def magnitude(e):
    e = np.asarray(e, np.float64)
    return np.hypot(e[..., 0], e[..., 1])


def make_mask(original, threshold=0.1, margin=INTERIOR_MARGIN):
    """Foreground mask eroded by ``margin`` px; returns ``(mask, fell_back)``.

    An empty result falls back to the full interior and sets the flag.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    img = np.asarray(original)
    mask = img >= threshold
    if margin > 0:
        mask = binary_erosion(mask, structure=np.ones((2 * margin + 1, 2 * margin + 1), bool),
                              border_value=0)
    if mask.any():
        return mask, False
    return interior_mask((img.shape[1], img.shape[0]), margin), True


def error_stats(values):
    v = np.asarray(values, np.float64)
    if v.size == 0:
        raise EmptyMask("no pixels to summarize")
    return {
        "mean": float(np.mean(v)),
        "rms": float(np.sqrt(np.mean(v * v))),
        "median": float(np.median(v)),
        "p95": float(np.percentile(v, 95)),
        "max": float(np.max(v)),
    }


def ssim(a, b, mask):
    """Mean SSIM over 8x8 windows lying entirely inside ``mask``."""
    a = np.where(mask, np.asarray(a, np.float64), 0.0)
    b = np.where(mask, np.asarray(b, np.float64), 0.0)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    w = SSIM_WINDOW
    if a.shape[0] >= w and a.shape[1] >= w:
        full = sliding_window_view(mask, (w, w)).all(axis=(2, 3))
    else:
        full = np.zeros((0, 0), bool)
    if full.any():
        wa = sliding_window_view(a, (w, w))[full]
        wb = sliding_window_view(b, (w, w))[full]
    else:
        # no complete window fits: treat the whole masked region as one window
        wa = a[mask][None]
        wb = b[mask][None]
    wa = wa.reshape(wa.shape[0], -1)
    wb = wb.reshape(wb.shape[0], -1)
    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    da = wa - mu_a[:, None]
    db = wb - mu_b[:, None]
    var_a = np.mean(da * da, axis=1)
    var_b = np.mean(db * db, axis=1)
    cov = np.mean(da * db, axis=1)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.mean(s))


def _mse_psnr(va, vb):
    d = np.asarray(va, np.float64) - np.asarray(vb, np.float64)
    mse = float(np.mean(d * d))
    psnr = PSNR_CAP_DB if mse == 0 else min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))
    return {"mse": mse, "psnr_db": psnr}


def similarity_suite(a, b, mask):
    """``{mse, psnr_db, ncc, ssim}`` over the masked pixels of two slices."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    mask = np.asarray(mask, bool)
    if a.shape != b.shape or mask.shape != a.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape}, {b.shape}, mask {mask.shape}")
    if not mask.any():
        raise EmptyMask("similarity mask is empty")
    va, vb = a[mask], b[mask]
    # test flatness exactly: the centred sum of a constant can round to a tiny nonzero
    if np.ptp(va) == 0 or np.ptp(vb) == 0:
        raise FlatImage("NCC undefined: a masked input has zero variance")
    ca, cb = va - va.mean(), vb - vb.mean()
    den = math.sqrt(float(ca @ ca) * float(cb @ cb))
    if den == 0.0:
        raise FlatImage("NCC undefined: masked variance underflows")
    return {**_mse_psnr(va, vb), "ncc": float(ca @ cb) / den, "ssim": ssim(a, b, mask)}


@dataclass
class DriftProfile:
    mean_residual: np.ndarray
    cumulative: np.ndarray
    smoothed: np.ndarray
    window: int
    score: float

    def to_json(self):
        return {"window": self.window, "score_px": self.score,
                "mean_residual_px": self.mean_residual.tolist(),
                "cumulative_px": self.cumulative.tolist(),
                "smoothed_px": self.smoothed.tolist()}


def drift_profile(mean_residuals, window=9):
    """Cumulative and smoothed curves of per-slice mean residual vectors.

    The score is the largest norm of the centred moving average (window
    truncated at the stack ends).
    """
    m = np.asarray(mean_residuals, np.float64).reshape(-1, 2)
    if m.shape[0] == 0:
        raise ValueError("drift profile needs at least one slice")
    if window < 1 or window % 2 == 0:
        raise ValueError("drift window must be a positive odd integer")
    n = m.shape[0]
    h = window // 2
    smoothed = np.empty_like(m)
    for z in range(n):
        smoothed[z] = m[max(0, z - h):min(n, z + h + 1)].mean(axis=0)
    score = float(np.max(np.hypot(smoothed[:, 0], smoothed[:, 1])))
    return DriftProfile(m, np.cumsum(m, axis=0), smoothed, window, score)


@dataclass
class MetricsRecord:
    method: str
    strategy: str
    slices: list
    aggregate: dict
    similarity: dict
    drift: DriftProfile
    distortion: dict = field(default_factory=dict)
    mask_fallback_slices: list = field(default_factory=list)

    def to_json(self):
        return _clean({
            "method": self.method,
            "strategy": self.strategy,
            "distortion": self.distortion,
            "aggregate_px": self.aggregate,
            "similarity_mean": self.similarity,
            "drift": self.drift.to_json(),
            "mask_fallback_slices": self.mask_fallback_slices,
            "slices": self.slices,
        })

    def csv_rows(self):
        rows = []
        cum = self.drift.cumulative
        for k, s in enumerate(self.slices):
            rows.append({
                "z": s["z"],
                **{f"{st}_px": s["error_px"][st] for st in STATS},
                **{key: s["similarity"][key] for key in SIMILARITY_KEYS},
                "m_x_px": s["mean_residual_px"][0],
                "m_y_px": s["mean_residual_px"][1],
                "cum_drift_px": float(math.hypot(cum[k, 0], cum[k, 1])),
            })
        return rows

    def save(self, json_path, csv_path):
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_metrics_csv(csv_path, self.csv_rows())

    @classmethod
    def from_json(cls, d):
        drift = d["drift"]
        return cls(
            method=d["method"], strategy=d["strategy"], slices=d["slices"],
            aggregate=d["aggregate_px"], similarity=d["similarity_mean"],
            drift=DriftProfile(np.array(drift["mean_residual_px"], float).reshape(-1, 2),
                               np.array(drift["cumulative_px"], float).reshape(-1, 2),
                               np.array(drift["smoothed_px"], float).reshape(-1, 2),
                               drift["window"], drift["score_px"]),
            distortion=d.get("distortion", {}),
            mask_fallback_slices=d.get("mask_fallback_slices", []),
        )

    @classmethod
    def load(cls, json_path):
        with open(json_path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def fmt_number(x):
    """Canonical text form shared by CSV files and plot metadata."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".9g")


def write_metrics_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([fmt_number(r[c]) for c in CSV_COLUMNS])


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def evaluate(result, record, original, distorted, opts=None):
    """Score ``result`` against ``record`` for the surviving slices.

    ``original`` is the undistorted volume (all slices); ``distorted`` the
    distorted stack the result was computed from.
    """
    opts = opts or EvalOptions()
    surviving = record.surviving
    if sorted(result.fields.z) != sorted(surviving):
        raise SliceSetMismatch(
            f"result covers slices {list(result.fields.z)} but the record keeps {surviving}")
    nx, ny, nz = record.dims
    if original.dims != (nx, ny, nz):
        raise DimensionMismatch(f"original dims {original.dims} differ from record dims {record.dims}")
    if result.fields.dims != (nx, ny) or distorted.dims[:2] != (nx, ny):
        raise DimensionMismatch("result or distorted stack dims differ from the record")
    if list(distorted.slice_indices) != surviving:
        raise SliceSetMismatch("distorted stack slices differ from the record's surviving slices")
    orig_pos = {z: k for k, z in enumerate(original.slice_indices)}

    def one(k):
        z = surviving[k]
        d = record.composed.by_index(z)
        r = result.fields.by_index(z)
        e = error_field(d, r).astype(np.float64)
        mag = magnitude(e)
        ref = original.voxels[orig_pos[z]]
        mask, fell_back = make_mask(ref, opts.mask_threshold, opts.margin)
        corrected = warp_slice(distorted.voxels[k], r)
        try:
            sim = similarity_suite(ref, corrected, mask)
        except FlatImage:
            # a corrected slice can be blank if a method shifted it out of view
            sim = {**_mse_psnr(ref[mask], corrected[mask]), "ncc": 0.0,
                   "ssim": ssim(ref, corrected, mask)}
        vals = mag[mask]
        m = e[mask].mean(axis=0)
        return z, vals, m, sim, fell_back

    parts = pmap(one, range(len(surviving)))
    pooled = np.concatenate([p[1] for p in parts])
    slices = []
    for z, vals, m, sim, fell_back in parts:
        slices.append({"z": z, "mask_pixels": int(vals.size), "error_px": error_stats(vals),
                       "similarity": sim, "mean_residual_px": [float(m[0]), float(m[1])],
                       "mask_fallback": fell_back})
    drift = drift_profile(np.array([p[2] for p in parts]), opts.drift_window)
    sim_mean = {key: float(np.mean([p[3][key] for p in parts])) for key in SIMILARITY_KEYS}
    return MetricsRecord(
        method=result.method,
        strategy=result.strategy,
        slices=slices,
        aggregate=error_stats(pooled),
        similarity=sim_mean,
        drift=drift,
        distortion=record.spec.to_config(),
        mask_fallback_slices=[p[0] for p in parts if p[4]],
    )

