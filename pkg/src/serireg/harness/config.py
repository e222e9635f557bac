"""Pipeline configuration (TOML or JSON).

Example::

    [input.phantom]
    kind = "bent_tube"
    dims = [128, 128, 64]
    seed = 7

    [distortion]
    seed = 1
    sigma_theta_rad = 0.0349
    sigma_t_px = 5.0
    p_drop = 0.0
    clamp_k = 3
    [distortion.elastic]
    grid_px = 64
    sigma_px = 3.0
    [distortion.intensity]
    sigma_gamma = 0.05

    [[methods]]
    kind = "oracle"
    [[methods]]
    kind = "rigid"
    pyramid_levels = 3

    [strategy]
    kind = "chain_to_previous"

    [evaluation]
    mask_threshold = 0.1
    margin = 4
    drift_window = 9

    [output]
    dir = "runs/demo"
"""

import json
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..distortion import DistortionSpec
from ..errors import ConfigError
from ..metrics import EvalOptions
from ..registration import RegistrationMethod, StackStrategy
from .phantom import PhantomSpec

SPECIAL_METHODS = ("oracle", "external")


def read_config_file(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.lower().endswith(".json"):
            return json.loads(raw.decode("utf-8"))
        return tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc


@dataclass(frozen=True)
class MethodEntry:
    """One method in a pipeline: a built-in baseline, the oracle, or an external result."""

    name: str
    kind: str
    method: RegistrationMethod = None
    path: str = None
    format: str = "fields"
    oracle_tol: float = 0.01

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.get("kind")
        if kind is None:
            raise ConfigError("every method needs a 'kind'")
        if kind == "oracle":
            return cls(d.get("name", "oracle"), "oracle", oracle_tol=float(d.get("tol", 0.01)))
        if kind == "external":
            if "path" not in d:
                raise ConfigError("external methods need a 'path'")
            fmt = d.get("format", "fields")
            if fmt not in ("fields", "rigid_params"):
                raise ConfigError(f"external format must be 'fields' or 'rigid_params', got {fmt!r}")
            return cls(d.get("name", os.path.basename(os.path.normpath(d["path"]))), "external",
                       path=d["path"], format=fmt)
        try:
            method = RegistrationMethod.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad method options: {exc}") from exc
        return cls(method.name, kind, method=method)


@dataclass
class PipelineConfig:
    input_path: str = None
    phantom: PhantomSpec = None
    distortion: DistortionSpec = field(default_factory=DistortionSpec)
    methods: list = field(default_factory=list)
    strategy: StackStrategy = field(default_factory=StackStrategy)
    evaluation: EvalOptions = field(default_factory=EvalOptions)
    output: str = None
    bit_depth: int = 16

    def validate(self):
        if (self.input_path is None) == (self.phantom is None):
            raise ConfigError("input must name exactly one of 'path' or 'phantom'")
        if not self.methods:
            raise ConfigError("at least one method is required")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError(f"method names must be unique, got {names}")
        if not self.output:
            raise ConfigError("an output directory is required")
        if self.input_path and os.path.abspath(self.input_path) == os.path.abspath(self.output):
            raise ConfigError("output directory must differ from the input directory")
        if self.bit_depth not in (8, 16):
            raise ConfigError("bit_depth must be 8 or 16")
        return self

    @classmethod
    def from_dict(cls, d, out=None):
        d = dict(d)
        unknown = set(d) - {"input", "distortion", "methods", "strategy", "evaluation", "output"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        inp = d.get("input", {})
        phantom = PhantomSpec.from_dict(inp["phantom"]) if "phantom" in inp else None
        strategy = d.get("strategy", {})
        if isinstance(strategy, str):
            strategy = {"kind": strategy}
        try:
            evaluation = EvalOptions(**d.get("evaluation", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad evaluation options: {exc}") from exc
        output = d.get("output", {})
        cfg = cls(
            input_path=inp.get("path"),
            phantom=phantom,
            distortion=DistortionSpec.from_config(d.get("distortion", {})),
            methods=[MethodEntry.from_dict(m) for m in d.get("methods", [])],
            strategy=StackStrategy(strategy.get("kind", "chain_to_previous"), strategy.get("reference")),
            evaluation=evaluation,
            output=out or output.get("dir"),
            bit_depth=int(output.get("bit_depth", 16)),
        )
        return cfg.validate()


def load_config(path, out=None):
    return PipelineConfig.from_dict(read_config_file(path), out=out)
