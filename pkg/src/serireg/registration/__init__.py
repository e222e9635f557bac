"""Baseline registration methods, stack strategies and result exchange."""

from .elastic import ElasticFit, register_elastic, roughness
from .external import export_result, import_external
from .ncc import ncc, register_translation
from .rigid import RigidFit, register_rigid, rigid_search
from .stack import (
    PairResult,
    RegistrationMethod,
    RegistrationResult,
    StackStrategy,
    register_pair,
    register_stack,
)

__all__ = [
    "ElasticFit",
    "PairResult",
    "RegistrationMethod",
    "RegistrationResult",
    "RigidFit",
    "StackStrategy",
    "export_result",
    "import_external",
    "ncc",
    "register_elastic",
    "register_pair",
    "register_rigid",
    "register_stack",
    "register_translation",
    "rigid_search",
    "roughness",
]
