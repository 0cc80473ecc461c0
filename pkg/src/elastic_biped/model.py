"""Parametric robot description, model-file loading and validation.

Model files are TOML. See ``data/pandora_planar.toml`` for a commented
reference file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import tomli
import tomli_w

from .linkage import LinkageError, LinkageGeometry

MASS_TOLERANCE = 1e-9


class ModelError(Exception):
    pass


class ModelParseError(ModelError):
    pass


class ModelValidationError(ModelError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self):
        return f"{self.field}: {self.rule}"


@dataclass(frozen=True)
class ContactPoint:
    name: str
    offset: tuple[float, float]


@dataclass(frozen=True)
class LinkSpec:
    name: str
    mass: float
    com_offset: tuple[float, float]
    inertia: float
    length: float
    contact_points: tuple[ContactPoint, ...] = ()


@dataclass(frozen=True)
class ElasticitySpec:
    stiffness: float
    damping: float
    backlash: float
    gear_ratio: float


@dataclass(frozen=True)
class JointSpec:
    """A revolute pitch joint, or an out-of-plane joint held rigid (``locked``).

    ``axis`` (+1/-1) sets the rotation sense of the child relative to the
    parent; ``origin`` is the joint location in the parent frame (defaults
    to the parent's distal end, ``(0, -length)``).
    """

    name: str
    parent: str
    child: str
    q_min: float
    q_max: float
    elasticity: ElasticitySpec
    encoder_bits: int
    axis: int = 1
    origin: tuple[float, float] | None = None
    locked: bool = False


@dataclass(frozen=True)
class ActuatorSpec:
    name: str
    joints: tuple[str, ...]
    force_limit: float
    lag_time_constant: float
    screw_pitch: float
    geometry: LinkageGeometry | None = None
    coulomb_friction: float = 0.0
    viscous_friction: float = 0.0


@dataclass(frozen=True)
class LinkagePairSpec:
    name: str
    joints: tuple[str, str]
    actuators: tuple[str, str]
    geometry: LinkageGeometry


@dataclass(frozen=True)
class LlcSpec:
    name: str
    actuators: tuple[str, ...]


@dataclass(frozen=True)
class RobotModel:
    name: str
    links: tuple[LinkSpec, ...]
    joints: tuple[JointSpec, ...]
    actuators: tuple[ActuatorSpec, ...]
    pairs: tuple[LinkagePairSpec, ...]
    gravity: float
    total_mass: float
    standing_height: float
    llcs: tuple[LlcSpec, ...] = ()
    floating_base: bool = True
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        idx = {
            "link": {l.name: l for l in self.links},
            "joint": {j.name: j for j in self.joints},
            "actuator": {a.name: a for a in self.actuators},
            "pair": {p.name: p for p in self.pairs},
            "llc": {c.name: c for c in self.llcs},
        }
        object.__setattr__(self, "_index", idx)

    def link(self, name: str) -> LinkSpec:
        return self._index["link"][name]

    def joint(self, name: str) -> JointSpec:
        return self._index["joint"][name]

    def actuator(self, name: str) -> ActuatorSpec:
        return self._index["actuator"][name]

    def llc(self, name: str) -> LlcSpec:
        return self._index["llc"][name]

    @property
    def base_link(self) -> LinkSpec:
        return self.links[0]

    @property
    def dof_joints(self) -> tuple[JointSpec, ...]:
        """Joints that move in the planar simulation (not locked)."""
        return tuple(j for j in self.joints if not j.locked)

    @property
    def actuated_joint_names(self) -> tuple[str, ...]:
        return tuple(j.name for j in self.dof_joints)

    def pair_of_actuator(self, name: str) -> LinkagePairSpec | None:
        for p in self.pairs:
            if name in p.actuators:
                return p
        return None

    def with_elasticity(self, **changes) -> "RobotModel":
        """Copy with every joint's elasticity fields replaced (e.g. ``stiffness=8000``)."""
        import dataclasses

        joints = tuple(
            dataclasses.replace(j, elasticity=dataclasses.replace(j.elasticity, **changes)) for j in self.joints
        )
        return dataclasses.replace(self, joints=joints)


def validate_model(model: RobotModel) -> list[Violation]:
    """Every broken invariant as a :class:`Violation`; empty when the model is valid."""
    out: list[Violation] = []
    add = lambda f, r: out.append(Violation(f, r))

    def unique(kind, names):
        seen = set()
        for n in names:
            if n in seen:
                add(f"{kind}.{n}", "duplicate name")
            seen.add(n)

    unique("links", [l.name for l in model.links])
    unique("joints", [j.name for j in model.joints])
    unique("actuators", [a.name for a in model.actuators])

    if not model.links:
        add("links", "at least one link (the base) is required")
    if not model.gravity > 0:
        add("gravity", "must be > 0")
    for l in model.links:
        if not l.mass > 0:
            add(f"links.{l.name}.mass", "LinkSpec.mass must be > 0")
        if not l.inertia > 0:
            add(f"links.{l.name}.inertia", "LinkSpec.inertia must be > 0")
        if not l.length >= 0:
            add(f"links.{l.name}.length", "LinkSpec.length must be >= 0")

    link_names = {l.name for l in model.links}
    for j in model.joints:
        f = f"joints.{j.name}"
        if not j.q_min < j.q_max:
            add(f"{f}.q_min", "JointSpec.q_min must be < q_max")
        e = j.elasticity
        if not e.stiffness > 0:
            add(f"{f}.elasticity.stiffness", "ElasticitySpec.K must be > 0")
        if not e.damping >= 0:
            add(f"{f}.elasticity.damping", "ElasticitySpec.D must be >= 0")
        if not e.backlash >= 0:
            add(f"{f}.elasticity.backlash", "ElasticitySpec.b must be >= 0")
        if not e.gear_ratio > 0:
            add(f"{f}.elasticity.gear_ratio", "ElasticitySpec.N must be > 0")
        if j.encoder_bits <= 0:
            add(f"{f}.encoder_bits", "must be > 0")
        if j.axis not in (1, -1):
            add(f"{f}.axis", "must be +1 or -1")
        if not j.locked:
            for end in ("parent", "child"):
                if getattr(j, end) not in link_names:
                    add(f"{f}.{end}", f"unknown link {getattr(j, end)!r}")

    # tree over the moving joints, rooted at the base link
    if model.links:
        base = model.links[0].name
        parent_of = {}
        for j in model.dof_joints:
            if j.child == base:
                add(f"joints.{j.name}.child", "the base link cannot have a parent joint")
            elif j.child in parent_of:
                add(f"joints.{j.name}.child", f"link {j.child!r} has more than one parent joint")
            else:
                parent_of[j.child] = j.parent
        for l in model.links[1:]:
            if l.name not in parent_of:
                add(f"links.{l.name}", "not connected to the base by a joint")
                continue
            seen, cur = set(), l.name
            while cur != base and cur in parent_of:
                if cur in seen:
                    add(f"links.{l.name}", "joint graph contains a cycle")
                    break
                seen.add(cur)
                cur = parent_of[cur]

    joint_names = {j.name for j in model.joints}
    refs = {n: 0 for n in joint_names}
    pair_actuators = {a for p in model.pairs for a in p.actuators}
    for a in model.actuators:
        f = f"actuators.{a.name}"
        if not a.force_limit > 0:
            add(f"{f}.force_limit", "ActuatorSpec.force_limit must be > 0")
        if not a.screw_pitch > 0:
            add(f"{f}.screw_pitch", "ActuatorSpec.screw_pitch must be > 0")
        if not a.lag_time_constant >= 0:
            add(f"{f}.lag_time_constant", "must be >= 0")
        if not 1 <= len(a.joints) <= 2:
            add(f"{f}.joints", "an actuator drives 1 or 2 joints")
        for jn in a.joints:
            if jn not in joint_names:
                add(f"{f}.joints", f"unknown joint {jn!r}")
        if a.name in pair_actuators:
            continue
        if len(a.joints) != 1:
            add(f"{f}.joints", "a two-joint actuator must belong to a linkage pair")
        elif a.geometry is None or a.geometry.kind != "crank":
            add(f"{f}.geometry", "single-joint actuator needs crank geometry")
        for jn in a.joints:
            if jn in refs:
                refs[jn] += 1
    for p in model.pairs:
        f = f"pairs.{p.name}"
        if len(p.joints) != 2:
            add(f"{f}.joints", "a linkage pair has exactly two joints")
        if len(p.actuators) != 2:
            add(f"{f}.actuators", "a linkage pair has exactly two actuators")
        for an in p.actuators:
            if an not in model._index["actuator"]:
                add(f"{f}.actuators", f"unknown actuator {an!r}")
            elif set(model.actuator(an).joints) != set(p.joints):
                add(f"{f}.actuators", f"actuator {an!r} must drive exactly the pair's joints")
        if p.geometry.kind != "gimbal":
            add(f"{f}.geometry", "pair geometry must be a gimbal")
        for jn in p.joints:
            if jn in refs:
                refs[jn] += 1
            else:
                add(f"{f}.joints", f"unknown joint {jn!r}")
    for jn, n in refs.items():
        if n != 1:
            add(f"joints.{jn}", f"referenced by {n} actuators/pairs, expected exactly 1")

    owned = {}
    for c in model.llcs:
        for an in c.actuators:
            if an not in model._index["actuator"]:
                add(f"llcs.{c.name}", f"unknown actuator {an!r}")
            elif an in owned:
                add(f"llcs.{c.name}", f"actuator {an!r} already owned by LLC {owned[an]!r}")
            owned[an] = c.name

    mass = math.fsum(l.mass for l in model.links)
    if abs(mass - model.total_mass) > MASS_TOLERANCE:
        add("total_mass", f"must equal the sum of link masses ({mass!r})")
    return out


# --- file format ---------------------------------------------------------------------------


def _vec(x, n=None):
    t = tuple(float(v) for v in x)
    if n is not None and len(t) != n:
        raise ModelParseError(f"expected a {n}-vector, got {list(x)!r}")
    return t


def _geometry_from(d: dict, q_min=None, q_max=None) -> LinkageGeometry:
    try:
        return LinkageGeometry(
            kind=d.get("kind", "crank"),
            proximal=tuple(_vec(p) for p in d["proximal"]),
            distal=tuple(_vec(p) for p in d["distal"]),
            axes=tuple(d.get("axes", ())),
            q_min=q_min,
            q_max=q_max,
        )
    except LinkageError as exc:
        raise ModelValidationError([Violation("geometry", str(exc))]) from exc


def model_from_dict(data: dict) -> RobotModel:
    try:
        links = tuple(
            LinkSpec(
                name=str(l["name"]),
                mass=float(l["mass"]),
                com_offset=_vec(l.get("com_offset", (0.0, 0.0)), 2),
                inertia=float(l["inertia"]),
                length=float(l.get("length", 0.0)),
                contact_points=tuple(
                    ContactPoint(str(c["name"]), _vec(c["offset"], 2)) for c in l.get("contact_points", ())
                ),
            )
            for l in data.get("links", ())
        )
        joints = []
        for j in data.get("joints", ()):
            e = j["elasticity"]
            joints.append(
                JointSpec(
                    name=str(j["name"]),
                    parent=str(j.get("parent", "")),
                    child=str(j.get("child", "")),
                    q_min=float(j["q_min"]),
                    q_max=float(j["q_max"]),
                    elasticity=ElasticitySpec(
                        stiffness=float(e["stiffness"]),
                        damping=float(e["damping"]),
                        backlash=float(e["backlash"]),
                        gear_ratio=float(e["gear_ratio"]),
                    ),
                    encoder_bits=int(j["encoder_bits"]),
                    axis=int(j.get("axis", 1)),
                    origin=_vec(j["origin"], 2) if "origin" in j else None,
                    locked=bool(j.get("locked", False)),
                )
            )
        jmap = {j.name: j for j in joints}

        def limits(names):
            if not all(n in jmap for n in names):
                return None, None
            return tuple(jmap[n].q_min for n in names), tuple(jmap[n].q_max for n in names)

        actuators = []
        for a in data.get("actuators", ()):
            names = tuple(str(n) for n in a["joints"])
            geom = None
            if "geometry" in a:
                lo, hi = limits(names)
                if lo is not None and any(l >= h for l, h in zip(lo, hi)):
                    lo = hi = None
                geom = _geometry_from(a["geometry"], lo, hi)
            actuators.append(
                ActuatorSpec(
                    name=str(a["name"]),
                    joints=names,
                    force_limit=float(a["force_limit"]),
                    lag_time_constant=float(a["lag_time_constant"]),
                    screw_pitch=float(a["screw_pitch"]),
                    geometry=geom,
                    coulomb_friction=float(a.get("coulomb_friction", 0.0)),
                    viscous_friction=float(a.get("viscous_friction", 0.0)),
                )
            )
        pairs = []
        for p in data.get("pairs", ()):
            names = tuple(str(n) for n in p["joints"])
            lo, hi = limits(names)
            if lo is not None and any(l >= h for l, h in zip(lo, hi)):
                lo = hi = None
            g = dict(p["geometry"])
            g.setdefault("kind", "gimbal")
            pairs.append(
                LinkagePairSpec(
                    name=str(p["name"]),
                    joints=names,
                    actuators=tuple(str(n) for n in p["actuators"]),
                    geometry=_geometry_from(g, lo, hi),
                )
            )
        llcs = tuple(LlcSpec(str(c["name"]), tuple(str(n) for n in c["actuators"])) for c in data.get("llcs", ()))
        return RobotModel(
            name=str(data["name"]),
            links=links,
            joints=tuple(joints),
            actuators=tuple(actuators),
            pairs=tuple(pairs),
            gravity=float(data.get("gravity", 9.81)),
            total_mass=float(data["total_mass"]),
            standing_height=float(data.get("standing_height", 0.0)),
            llcs=llcs,
            floating_base=bool(data.get("floating_base", True)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelParseError(f"malformed model: {exc!r}") from exc


def loads_model(text: str) -> RobotModel:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ModelParseError(str(exc)) from exc
    model = model_from_dict(data)
    violations = validate_model(model)
    if violations:
        raise ModelValidationError(violations)
    return model


def load_model(path) -> RobotModel:
    """Parse and validate a model file.

    Raises :class:`ModelParseError` for malformed files and
    :class:`ModelValidationError` (carrying the violation list) otherwise.
    """
    p = Path(path)
    if not p.is_file():
        raise ModelParseError(f"model file not found: {p}")
    return loads_model(p.read_bytes().decode("utf-8"))


def shipped_model_path(name: str = "pandora_planar") -> Path:
    return Path(str(resources.files("elastic_biped") / "data" / f"{name}.toml"))


def load_shipped(name: str = "pandora_planar") -> RobotModel:
    return load_model(shipped_model_path(name))


def _geometry_dict(g: LinkageGeometry) -> dict:
    d = {"kind": g.kind, "proximal": [list(p) for p in g.proximal], "distal": [list(p) for p in g.distal]}
    if g.axes:
        d["axes"] = list(g.axes)
    return d


def model_to_dict(model: RobotModel) -> dict:
    out = {
        "name": model.name,
        "gravity": model.gravity,
        "total_mass": model.total_mass,
        "standing_height": model.standing_height,
        "floating_base": model.floating_base,
        "links": [],
        "joints": [],
        "actuators": [],
    }
    for l in model.links:
        d = {"name": l.name, "mass": l.mass, "com_offset": list(l.com_offset), "inertia": l.inertia, "length": l.length}
        if l.contact_points:
            d["contact_points"] = [{"name": c.name, "offset": list(c.offset)} for c in l.contact_points]
        out["links"].append(d)
    for j in model.joints:
        d = {
            "name": j.name,
            "q_min": j.q_min,
            "q_max": j.q_max,
            "encoder_bits": j.encoder_bits,
            "axis": j.axis,
            "locked": j.locked,
        }
        if j.parent:
            d["parent"] = j.parent
        if j.child:
            d["child"] = j.child
        if j.origin is not None:
            d["origin"] = list(j.origin)
        e = j.elasticity
        d["elasticity"] = {
            "stiffness": e.stiffness,
            "damping": e.damping,
            "backlash": e.backlash,
            "gear_ratio": e.gear_ratio,
        }
        out["joints"].append(d)
    for a in model.actuators:
        d = {
            "name": a.name,
            "joints": list(a.joints),
            "force_limit": a.force_limit,
            "lag_time_constant": a.lag_time_constant,
            "screw_pitch": a.screw_pitch,
            "coulomb_friction": a.coulomb_friction,
            "viscous_friction": a.viscous_friction,
        }
        if a.geometry is not None:
            d["geometry"] = _geometry_dict(a.geometry)
        out["actuators"].append(d)
    if model.pairs:
        out["pairs"] = [
            {
                "name": p.name,
                "joints": list(p.joints),
                "actuators": list(p.actuators),
                "geometry": _geometry_dict(p.geometry),
            }
            for p in model.pairs
        ]
    if model.llcs:
        out["llcs"] = [{"name": c.name, "actuators": list(c.actuators)} for c in model.llcs]
    return out


def dumps_model(model: RobotModel) -> str:
    return tomli_w.dumps(model_to_dict(model))


def save_model(model: RobotModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")
