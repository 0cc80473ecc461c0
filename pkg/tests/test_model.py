import dataclasses
import math

import pytest

from elastic_biped.model import (
    ModelParseError,
    ModelValidationError,
    dumps_model,
    load_model,
    load_shipped,
    loads_model,
    shipped_model_path,
    validate_model,
)


@pytest.fixture(scope="module")
def model():
    return load_shipped()


def test_shipped_planar_model(model):
    assert model.name == "pandora_planar"
    assert model.floating_base
    assert model.actuated_joint_names == (
        "l_hip_pitch", "l_knee", "l_ankle_pitch", "r_hip_pitch", "r_knee", "r_ankle_pitch",
    )
    assert math.isclose(model.total_mass, 23.27, abs_tol=1e-9)
    assert abs(math.fsum(l.mass for l in model.links) - 23.27) < 1e-9
    assert len(model.llcs) == 6
    assert all(len(c.actuators) == 2 for c in model.llcs)


def test_shipped_elasticity_defaults(model):
    for j in model.dof_joints:
        assert j.elasticity.stiffness == 800.0
        assert j.elasticity.damping == 2.0
        assert j.elasticity.backlash == 0.005


def test_valid_model_has_no_violations(model):
    assert validate_model(model) == []


def test_load_is_deterministic():
    path = shipped_model_path()
    assert load_model(path) == load_model(path)


def test_round_trip(model):
    again = loads_model(dumps_model(model))
    assert again == model
    assert dumps_model(again) == dumps_model(model)


def test_q_limits_inverted_is_a_validation_error():
    text = shipped_model_path().read_text().replace("q_min = -0.8\nq_max = 1.4", "q_min = 1.4\nq_max = -0.8", 1)
    with pytest.raises(ModelValidationError) as exc:
        loads_model(text)
    assert any("q_min" in v.field for v in exc.value.violations)


def test_negative_backlash_names_the_field(model):
    j0 = model.joints[0]
    bad = dataclasses.replace(j0, elasticity=dataclasses.replace(j0.elasticity, backlash=-0.01))
    broken = dataclasses.replace(model, joints=(bad,) + model.joints[1:])
    violations = validate_model(broken)
    assert len(violations) == 1
    assert "backlash" in violations[0].field
    assert "ElasticitySpec.b" in violations[0].rule


def test_joint_driven_twice_is_one_violation(model):
    knee_act = model.actuator("l_knee_act")
    hip_act = model.actuator("l_hip_pitch_act")
    hijacked = dataclasses.replace(hip_act, joints=("l_knee",), geometry=knee_act.geometry)
    acts = tuple(hijacked if a.name == hip_act.name else a for a in model.actuators)
    violations = validate_model(dataclasses.replace(model, actuators=acts))
    named = [v for v in violations if v.field == "joints.l_knee"]
    assert len(named) == 1
    # hip pitch is now undriven, which is reported separately
    assert any(v.field == "joints.l_hip_pitch" for v in violations)


def test_mass_mismatch(model):
    violations = validate_model(dataclasses.replace(model, total_mass=49.0))
    assert [v.field for v in violations] == ["total_mass"]


def test_malformed_file_is_a_parse_error(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("name = [unclosed\n")
    with pytest.raises(ModelParseError):
        load_model(p)
    p.write_text('name = "x"\n')
    with pytest.raises(ModelParseError):
        load_model(p)


def test_missing_file(tmp_path):
    with pytest.raises(ModelParseError):
        load_model(tmp_path / "nope.toml")


def test_disconnected_link(model):
    joints = tuple(j for j in model.joints if j.name != "l_knee")
    acts = tuple(a for a in model.actuators if a.name != "l_knee_act")
    llcs = tuple(
        dataclasses.replace(c, actuators=tuple(a for a in c.actuators if a != "l_knee_act")) for c in model.llcs
    )
    violations = validate_model(dataclasses.replace(model, joints=joints, actuators=acts, llcs=llcs))
    assert any(v.field == "links.l_shin" for v in violations)


def test_other_shipped_models_validate():
    for name in ("pendulum_testbed", "floating_block"):
        m = load_shipped(name)
        assert validate_model(m) == []
