import json
import math

import numpy as np
import pytest

from conftest import smooth_field, textured
from serireg.errors import ConventionMismatch, FlatImage, MissingSlice
from serireg.geometry import (RigidTransform2D, compose_fields, interior_mask, rigid_to_field,
                              warp_slice)
from serireg.registration import (RegistrationMethod, RegistrationResult, StackStrategy,
                                  export_result, import_external, register_elastic,
                                  register_pair, register_stack, register_translation,
                                  rigid_search, roughness)
from serireg.volume_io import FieldStack, Volume

DIMS = (96, 96)


def _shift(img, dx, dy):
    """Content moved by (dx, dy): ``out(x) = img(x - d)``."""
    u = np.empty(img.shape + (2,), np.float32)
    u[..., 0], u[..., 1] = -dx, -dy
    return warp_slice(img, u)


def _interior_error(r, d):
    e = compose_fields(r, d).astype(np.float64)
    m = interior_mask(DIMS, 12)
    return np.hypot(e[..., 0], e[..., 1])[m]


# --- translation -------------------------------------------------------------


def test_translation_of_identical_slices_is_zero():
    img = textured(0, (96, 96))
    tx, ty = register_translation(img, img)
    assert abs(tx) <= 0.1 and abs(ty) <= 0.1


@pytest.mark.parametrize("shift", [(-3.0, 2.0), (2.5, -1.25), (0.4, 0.7)])
def test_translation_recovers_subpixel_shift(shift):
    fixed = textured(1, (96, 96))
    moving = _shift(fixed, *shift)
    tx, ty = register_translation(fixed, moving)
    # correction reads from x + t, so it equals the content displacement
    assert abs(tx - shift[0]) <= 0.25 and abs(ty - shift[1]) <= 0.25


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_translation_integer_shifts(n):
    fixed = textured(2, (96, 96))
    tx, ty = register_translation(fixed, _shift(fixed, n, -n))
    assert abs(tx - n) <= 0.1 and abs(ty + n) <= 0.1


def test_translation_rejects_flat_slice():
    with pytest.raises(FlatImage):
        register_translation(np.full((32, 32), 0.5), textured(0, (32, 32)))


# --- rigid -----------------------------------------------------------------


def test_rigid_identity():
    img = textured(3, DIMS)
    fit = rigid_search(img, img)
    assert abs(math.degrees(fit.transform.theta)) <= 0.1
    assert abs(fit.transform.tx) <= 0.1 and abs(fit.transform.ty) <= 0.1
    assert fit.converged


def test_rigid_recovers_rotation_and_shift():
    fixed = textured(4, DIMS, sigma=2.5)
    d = rigid_to_field(RigidTransform2D(math.radians(7.0), 4.0, -1.0, 47.5, 47.5), DIMS)
    moving = warp_slice(fixed, d)
    fit = rigid_search(fixed, moving)
    T = fit.transform
    # the correction undoes the distortion: theta -7 deg and t mapped back
    assert abs(math.degrees(T.theta) + 7.0) <= 0.5
    assert _interior_error(rigid_to_field(T, DIMS), d).mean() <= 0.5
    assert fit.converged


def test_rigid_flags_rotation_beyond_search_range():
    fixed = textured(5, DIMS, sigma=2.0)
    moving = warp_slice(fixed, rigid_to_field(RigidTransform2D(math.radians(25.0), 0, 0, 47.5, 47.5), DIMS))
    fit = rigid_search(fixed, moving, theta_max_deg=15.0)
    assert abs(math.degrees(fit.transform.theta)) <= 15.0 + 1e-9
    assert not fit.converged


# --- elastic ---------------------------------------------------------------


def test_elastic_identity_pair_stays_near_zero():
    img = textured(6, DIMS, sigma=2.5)
    fit = register_elastic(img, img, grid_px=32, max_iter=50)
    assert np.abs(fit.field).max() <= 0.1


def test_elastic_beats_identity_on_smooth_warp():
    fixed = textured(7, DIMS, sigma=2.5)
    d = smooth_field(7, DIMS, amplitude=3.0, spacing=48.0)
    moving = warp_slice(fixed, d)
    fit = register_elastic(fixed, moving, grid_px=24, max_iter=150)
    ident = np.hypot(d[..., 0], d[..., 1])[interior_mask(DIMS, 12)].mean()
    assert _interior_error(fit.field, d).mean() <= 0.5 * ident


def test_elastic_energy_decreases_within_each_level():
    fixed = textured(8, DIMS, sigma=2.5)
    moving = warp_slice(fixed, smooth_field(8, DIMS, 2.0, 48.0))
    fit = register_elastic(fixed, moving, grid_px=24, max_iter=60)
    assert len(fit.energies) == 3
    for trace in fit.energies:
        assert all(b < a for a, b in zip(trace, trace[1:]))


def test_roughness_non_increasing_in_lambda():
    fixed = textured(9, DIMS, sigma=2.5)
    moving = warp_slice(fixed, smooth_field(9, DIMS, 2.5, 32.0))
    rough = []
    for lam in (0.0, 1.0, 10.0, 100.0):
        fit = register_elastic(fixed, moving, grid_px=16, lam=lam, max_iter=80)
        rough.append(roughness(fit.nodes))
    assert all(b <= a * (1 + 1e-6) + 1e-12 for a, b in zip(rough, rough[1:])), rough


# --- stack -----------------------------------------------------------------


def _stack(n=5, seed=0):
    return Volume(np.stack([textured(seed, (64, 64), 2.5)] * n))


@pytest.mark.parametrize("kind", ["translation", "rigid", "elastic"])
@pytest.mark.parametrize("strategy", ["chain", "fixed"])
def test_aligned_stack_needs_no_correction(kind, strategy):
    res = register_stack(_stack(4), RegistrationMethod(kind, max_iter=40),
                         StackStrategy(strategy))
    assert np.abs(res.fields.fields).max() <= 0.1
    assert res.z == (0, 1, 2, 3)


def test_identity_method_gives_exact_zero():
    res = register_stack(_stack(3), RegistrationMethod("identity"))
    assert not res.fields.fields.any()
    assert res.strategy == "chain_to_previous"


def test_fixed_reference_slice_gets_zero_field():
    v = Volume(np.stack([_shift(textured(1, (64, 64)), k, 0) for k in range(5)]))
    res = register_stack(v, RegistrationMethod("translation"), StackStrategy("fixed"))
    assert not res.fields.by_index(2).any()
    for k in range(5):
        np.testing.assert_allclose(res.fields.by_index(k)[32, 32, 0], k - 2, atol=0.15)


def test_chain_accumulates_corrections():
    v = Volume(np.stack([_shift(textured(1, (64, 64)), k, 0) for k in range(4)]))
    res = register_stack(v, RegistrationMethod("translation"), StackStrategy("chain"))
    for k in range(4):
        np.testing.assert_allclose(res.fields.by_index(k)[32, 32, 0], k, atol=0.2)


def test_stack_failure_names_the_slice():
    vox = np.stack([textured(0, (64, 64))] * 4)
    vox[2] = 0.5
    with pytest.raises(FlatImage) as info:
        register_stack(Volume(vox), RegistrationMethod("translation"))
    assert info.value.slice_index == 2
    assert "slice 2" in str(info.value)


def test_pair_diagnostics_for_identity():
    img = textured(0, (64, 64))
    pr = register_pair(RegistrationMethod("identity"), img, img)
    assert pr.similarity == pytest.approx(1.0) and pr.converged


# --- exchange --------------------------------------------------------------


def _result(z=(0, 1, 3)):
    f = np.stack([smooth_field(k, (40, 32), 2.0) for k in range(len(z))])
    diag = [{"z": zz, "similarity_final": 0.9, "iterations": 3, "converged": True} for zz in z]
    return RegistrationResult(FieldStack(f, list(z)), diag, "mine", "chain_to_previous")


def test_export_import_round_trip(tmp_path):
    res = _result()
    export_result(res, str(tmp_path))
    back = import_external(str(tmp_path), expected_z=[0, 1, 3])
    assert back.fields.fields.tobytes() == res.fields.fields.tobytes()
    assert back.diagnostics == res.diagnostics
    assert (back.method, back.strategy) == ("mine", "chain_to_previous")


def test_import_subset_and_missing_slice(tmp_path):
    export_result(_result(), str(tmp_path))
    assert import_external(str(tmp_path), expected_z=[1, 3]).z == (1, 3)
    with pytest.raises(MissingSlice) as info:
        import_external(str(tmp_path), expected_z=[0, 2])
    assert "2" in str(info.value)


def test_identity_transforms_give_zero_fields(tmp_path):
    entries = [{"z": z, "theta_rad": 0.0, "tx_px": 0.0, "ty_px": 0.0} for z in range(3)]
    (tmp_path / "transforms.json").write_text(json.dumps(entries))
    res = import_external(str(tmp_path), "rigid_params", dims=(40, 32))
    assert res.fields.fields.shape == (3, 32, 40, 2)
    assert not res.fields.fields.any()


def test_transforms_match_rigid_fields(tmp_path):
    T = RigidTransform2D(0.1, 2.0, -3.0, 10.0, 12.0)
    payload = {"convention": "backward", "origin": "pixel_center",
               "transforms": [{"z": 4, **T.to_dict()}]}
    (tmp_path / "transforms.json").write_text(json.dumps(payload))
    res = import_external(str(tmp_path), "rigid_params", dims=(40, 32))
    np.testing.assert_array_equal(res.fields.by_index(4), rigid_to_field(T, (40, 32)))


def test_forward_convention_is_rejected(tmp_path):
    payload = {"convention": "forward", "transforms": []}
    (tmp_path / "transforms.json").write_text(json.dumps(payload))
    with pytest.raises(ConventionMismatch):
        import_external(str(tmp_path), "rigid_params", dims=(40, 32))
    export_result(_result(), str(tmp_path / "f"))
    meta_path = tmp_path / "f" / "fields.json"
    meta = json.loads(meta_path.read_text())
    meta["convention"] = "forward"
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(ConventionMismatch):
        import_external(str(tmp_path / "f"))
