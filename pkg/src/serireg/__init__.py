"""Ground-truth test cases and evaluation for serial-section registration.

Typical use::

    from serireg import load_stack, DistortionSpec, distort_volume

    original = load_stack("stack/")
    distorted, record = distort_volume(original, DistortionSpec(seed=1, sigma_t=5.0))
"""

from .distortion import DistortionRecord, DistortionSpec, PRESETS, distort_volume, oracle_recovery
from .errors import ConfigError, DataError, NumericalError, SeriregError
from .geometry import (
    RigidTransform2D,
    compose_fields,
    invert_field,
    rigid_to_field,
    warp_slice,
    warp_volume,
)
from .metrics import EvalOptions, MetricsRecord, evaluate
from .volume_io import FieldStack, Volume, load_field_stack, load_stack, save_field_stack, save_stack

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DistortionRecord",
    "DistortionSpec",
    "EvalOptions",
    "FieldStack",
    "MetricsRecord",
    "NumericalError",
    "PRESETS",
    "RigidTransform2D",
    "SeriregError",
    "Volume",
    "compose_fields",
    "distort_volume",
    "evaluate",
    "invert_field",
    "load_field_stack",
    "load_stack",
    "oracle_recovery",
    "rigid_to_field",
    "save_field_stack",
    "save_stack",
    "warp_slice",
    "warp_volume",
]
