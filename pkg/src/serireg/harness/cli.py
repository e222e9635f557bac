"""``serireg`` command line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything unexpected.
"""

import argparse
import json
import logging
import sys

from ..distortion import DistortionSpec
from ..errors import ConfigError, SeriregError
from ..metrics import EvalOptions
from ..parallel import set_threads
from ..registration import StackStrategy
from .config import MethodEntry, load_config, read_config_file
from .phantom import KINDS, PhantomSpec
from .pipeline import (distort_stage, evaluate_stage, phantom_stage, register_stage,
                       report_stage, run_pipeline)

log = logging.getLogger("serireg")

PIPELINE_SECTIONS = {"input", "distortion", "methods", "strategy", "evaluation", "output"}


def _dims(text):
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 128x128x64, got {text!r}")
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"dims must have three parts, got {text!r}")
    return dims


def _param(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _section(path, name):
    """Table ``name`` of a config file, or the whole file if it has no such table."""
    if path is None:
        return {}
    cfg = read_config_file(path)
    if name in cfg:
        return cfg[name]
    return {} if PIPELINE_SECTIONS & set(cfg) else cfg


def build_parser():
    p = argparse.ArgumentParser(prog="serireg", description=(
        "Generate serial-section registration test cases with known ground truth "
        "and evaluate registration results against them."))
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for per-slice work (default: $SERIREG_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def threads_opt(sp):
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    sp = sub.add_parser("pipeline", help="run distort, register, evaluate and report in one go")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="output directory (overrides the config)")
    threads_opt(sp)

    sp = sub.add_parser("phantom", help="write a synthetic, innately registered stack")
    sp.add_argument("--kind", choices=KINDS, default="bent_tube")
    sp.add_argument("--dims", type=_dims, default=(128, 128, 64))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--param", type=_param, action="append", default=[],
                    help="kind parameter as KEY=VALUE, e.g. amplitude=10")
    sp.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    sp.add_argument("--out", required=True)
    threads_opt(sp)

    sp = sub.add_parser("distort", help="distort a stack and record the ground truth")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--config", help="TOML/JSON file with a [distortion] table")
    sp.add_argument("--preset", help="start from a named preset")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    sp.add_argument("--out", required=True)
    threads_opt(sp)

    sp = sub.add_parser("register", help="register a distorted stack with a built-in method")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--method", required=True,
                    choices=("identity", "translation", "rigid", "elastic", "oracle"))
    sp.add_argument("--strategy", default="chain")
    sp.add_argument("--reference", type=int, help="reference slice for the fixed strategy")
    sp.add_argument("--config", help="TOML/JSON file whose [method] table sets options")
    sp.add_argument("--name", help="method label used in metrics and reports")
    sp.add_argument("--pyramid-levels", type=int)
    sp.add_argument("--similarity", choices=("ncc", "ssd"))
    sp.add_argument("--grid-px", type=float)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--max-iter", type=int)
    sp.add_argument("--out", required=True)
    threads_opt(sp)

    sp = sub.add_parser("evaluate", help="score a result against the recorded ground truth")
    sp.add_argument("--result", required=True)
    sp.add_argument("--record", required=True, help="distort output directory")
    sp.add_argument("--original", required=True)
    sp.add_argument("--config", help="TOML/JSON file with an [evaluation] table")
    sp.add_argument("--mask-threshold", type=float)
    sp.add_argument("--margin", type=int)
    sp.add_argument("--drift-window", type=int)
    sp.add_argument("--name", help="override the method label")
    sp.add_argument("--out", required=True)
    threads_opt(sp)

    sp = sub.add_parser("report", help="combine metrics into comparison.csv and SVG plots")
    sp.add_argument("--metrics", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    threads_opt(sp)
    return p


def _overrides(args, mapping):
    return {key: getattr(args, attr) for attr, key in mapping if getattr(args, attr) is not None}


def cmd_pipeline(args):
    cfg = load_config(args.config, out=args.out)
    summary = run_pipeline(cfg)
    for m in summary["methods"]:
        agg = m["aggregate_px"]
        print(f"{m['name']:<16} mean {agg['mean']:.4f} px  p95 {agg['p95']:.4f} px  "
              f"drift {m['drift_score_px']:.4f} px")
    print(f"wrote {summary['output']}")


def cmd_phantom(args):
    spec = PhantomSpec(args.kind, args.dims, args.seed, dict(args.param))
    v = phantom_stage(spec, args.out, args.bit_depth)
    print(f"wrote {v.nz} slices to {args.out}")


def cmd_distort(args):
    d = dict(_section(args.config, "distortion"))
    d.update(_overrides(args, [("preset", "preset"), ("seed", "seed")]))
    v, record = distort_stage(args.inp, DistortionSpec.from_config(d), args.out, args.bit_depth)
    print(f"wrote {v.nz} slices to {args.out} (dropped {record.dropped_slices or 'none'})")


def cmd_register(args):
    strategy = StackStrategy(args.strategy, args.reference)
    if args.method == "oracle":
        entry = MethodEntry.from_dict({"kind": "oracle", "name": args.name or "oracle"})
    else:
        opts = dict(_section(args.config, "method"))
        opts.update(_overrides(args, [("pyramid_levels", "pyramid_levels"),
                                      ("similarity", "similarity"), ("grid_px", "grid_px"),
                                      ("lam", "lam"), ("max_iter", "max_iter"),
                                      ("name", "name")]))
        opts["kind"] = args.method
        entry = MethodEntry.from_dict(opts)
    result = register_stage(args.inp, entry, strategy, args.out)
    bad = [d["z"] for d in result.diagnostics if not d["converged"]]
    print(f"registered {len(result.z)} slices with {entry.name} ({result.strategy})")
    if bad:
        print(f"low-similarity slices: {bad}", file=sys.stderr)


def cmd_evaluate(args):
    d = dict(_section(args.config, "evaluation"))
    d.update(_overrides(args, [("mask_threshold", "mask_threshold"), ("margin", "margin"),
                               ("drift_window", "drift_window")]))
    try:
        opts = EvalOptions(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad evaluation options: {exc}") from exc
    m = evaluate_stage(args.result, args.record, args.original, args.out, opts, args.name)
    print(f"{m.method}: mean {m.aggregate['mean']:.4f} px, drift {m.drift.score:.4f} px")


def cmd_report(args):
    records = report_stage(args.metrics, args.out)
    print(f"wrote comparison of {len(records)} method(s) to {args.out}")


COMMANDS = {"pipeline": cmd_pipeline, "phantom": cmd_phantom, "distort": cmd_distort,
            "register": cmd_register, "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors are configuration errors (argparse exits with 2); --help exits 0
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
    except ValueError as exc:
        print(f"serireg: error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except SeriregError as exc:
        print(f"serireg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"serireg: internal error: {exc}", file=sys.stderr)
        return 1
    finally:
        set_threads(None)
    return 0


if __name__ == "__main__":
    sys.exit(main())
