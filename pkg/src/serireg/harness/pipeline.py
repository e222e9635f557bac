"""Stage functions and the one-shot pipeline.

Every stage reads its inputs from disk and writes its outputs to disk, so
running the CLI subcommands one by one produces the same files as
:func:`run_pipeline`.

Pipeline output layout::

    OUT/original/                 phantom stack (phantom input only)
    OUT/distorted/                distorted stack, record.json, ground_truth/, elastic/
    OUT/methods/<name>/result/    fields.json, field_*.f32, diagnostics.csv
    OUT/methods/<name>/metrics.json, metrics.csv
    OUT/comparison.csv, mean_error.svg, drift.svg
"""

import csv
import logging
import math
import os
from contextlib import contextmanager

from ..distortion import DistortionRecord, distort_volume, oracle_recovery
from ..errors import ConfigError, DataError, SeriregError
from ..metrics import MetricsRecord, evaluate, fmt_number
from ..registration import RegistrationResult, export_result, import_external, register_stack
from ..volume_io import load_stack, save_stack
from .phantom import generate_phantom
from .plots import emit_plots

log = logging.getLogger(__name__)

METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"
COMPARISON_CSV = "comparison.csv"
COMPARISON_STATS = ("mean_px", "rms_px", "median_px", "p95_px", "max_px", "drift_score_px",
                    "mse", "psnr_db", "ncc", "ssim")
ERROR_STATS = COMPARISON_STATS[:6]


@contextmanager
def stage(name):
    """Prefix any toolkit error raised inside with the stage name."""
    try:
        yield
    except SeriregError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
            msg = exc.args[0] if exc.args else type(exc).__name__
            exc.args = (f"[{name}] {msg}",) + exc.args[1:]
        raise


def phantom_stage(spec, out_dir, bit_depth=16):
    """Generate a phantom, write it, and return the stack as read back."""
    with stage("phantom"):
        save_stack(generate_phantom(spec), out_dir, bit_depth)
        return load_stack(out_dir)


def distort_stage(in_dir, spec, out_dir, bit_depth=16):
    """Distort the stack in ``in_dir``; ``out_dir`` gets the stack and the record."""
    with stage("distort"):
        if os.path.abspath(in_dir) == os.path.abspath(out_dir):
            raise ConfigError("distort output directory must differ from its input")
        original = load_stack(in_dir)
        distorted, record = distort_volume(original, spec)
        save_stack(distorted, out_dir, bit_depth)
        record.save(out_dir)
        return load_stack(out_dir), record


def oracle_result(record, tol=0.01):
    fields = oracle_recovery(record, tol=tol)
    diagnostics = [{"z": z, "similarity_final": math.nan, "iterations": 0, "converged": True}
                   for z in fields.z]
    return RegistrationResult(fields, diagnostics, "oracle", "ground_truth")


def register_stage(in_dir, entry, strategy, out_dir):
    """Run one method on the distorted stack in ``in_dir`` and export its result.

    ``entry`` is a :class:`~serireg.harness.config.MethodEntry`.  The oracle
    reads the record stored next to the stack; external results are
    imported and re-exported so that every method leaves the same files.
    """
    with stage(f"register:{entry.name}"):
        if entry.kind == "oracle":
            result = oracle_result(DistortionRecord.load(in_dir), entry.oracle_tol)
        elif entry.kind == "external":
            record = DistortionRecord.load(in_dir)
            result = import_external(entry.path, entry.format, dims=record.dims[:2],
                                     expected_z=record.surviving, name=entry.name)
        else:
            result = register_stack(load_stack(in_dir), entry.method, strategy)
        result.method = entry.name
        export_result(result, out_dir)
        return result


def evaluate_stage(result_dir, record_dir, original_dir, out_dir, opts=None, name=None):
    """Score the result in ``result_dir``; writes ``metrics.json`` and ``metrics.csv``."""
    with stage("evaluate"):
        record = DistortionRecord.load(record_dir)
        result = import_external(result_dir, "fields", expected_z=record.surviving, name=name)
        metrics = evaluate(result, record, load_stack(original_dir), load_stack(record_dir), opts)
        os.makedirs(out_dir, exist_ok=True)
        metrics.save(os.path.join(out_dir, METRICS_JSON), os.path.join(out_dir, METRICS_CSV))
        return metrics


def comparison_rows(records):
    rows = []
    for rec in records:
        values = {f"{k}_px": v for k, v in rec.aggregate.items()}
        values["drift_score_px"] = rec.drift.score
        values.update(rec.similarity)
        for key in COMPARISON_STATS:
            rows.append({"method": rec.method, "strategy": rec.strategy, "statistic": key,
                         "value": values[key]})
    return rows


def write_comparison(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "strategy", "statistic", "value"))
        for r in comparison_rows(records):
            w.writerow((r["method"], r["strategy"], r["statistic"], fmt_number(r["value"])))


def read_comparison(path):
    """``{method: {statistic: value}}`` from a ``comparison.csv``."""
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            table.setdefault(row["method"], {})[row["statistic"]] = float(row["value"])
    return table


def _metrics_path(p):
    return os.path.join(p, METRICS_JSON) if os.path.isdir(p) else p


def report_stage(metrics_paths, out_dir):
    """Combine metrics into ``comparison.csv`` plus the two SVG plots."""
    with stage("report"):
        if not metrics_paths:
            raise ConfigError("report needs at least one metrics directory")
        records = []
        for p in metrics_paths:
            path = _metrics_path(p)
            if not os.path.exists(path):
                raise DataError(f"no {METRICS_JSON} at {p}")
            records.append(MetricsRecord.load(path))
        os.makedirs(out_dir, exist_ok=True)
        write_comparison(os.path.join(out_dir, COMPARISON_CSV), records)
        emit_plots(records, out_dir)
        return records


def run_pipeline(cfg):
    """Distort, register with every method, evaluate and report.

    Returns a summary ``{"output": dir, "methods": [...]}``.
    """
    out = cfg.output
    os.makedirs(out, exist_ok=True)
    if cfg.phantom is not None:
        original_dir = os.path.join(out, "original")
        phantom_stage(cfg.phantom, original_dir, cfg.bit_depth)
    else:
        original_dir = cfg.input_path
    distorted_dir = os.path.join(out, "distorted")
    log.info("distorting %s", original_dir)
    distort_stage(original_dir, cfg.distortion, distorted_dir, cfg.bit_depth)

    metrics_dirs = []
    for entry in cfg.methods:
        method_dir = os.path.join(out, "methods", entry.name)
        result_dir = os.path.join(method_dir, "result")
        log.info("method %s: registering", entry.name)
        register_stage(distorted_dir, entry, cfg.strategy, result_dir)
        log.info("method %s: evaluating", entry.name)
        evaluate_stage(result_dir, distorted_dir, original_dir, method_dir, cfg.evaluation,
                       entry.name)
        metrics_dirs.append(method_dir)
    records = report_stage(metrics_dirs, out)
    return {
        "output": out,
        "methods": [{"name": r.method, "strategy": r.strategy, "aggregate_px": r.aggregate,
                     "drift_score_px": r.drift.score} for r in records],
    }
