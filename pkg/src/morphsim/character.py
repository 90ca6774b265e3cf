"""Searchable character design vector and model construction."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from morphsim.physics import CharacterModel, DimensionError, default_character

DESIGN_SCHEMA = "morphsim.design/1"

SCALE_BOX = (0.5, 2.0)
FRICTION_BOX = (0.0, 5.0)
GEAR_BOX = (0.2, 5.0)


class DesignValidationError(ValueError):
    def __init__(self, offending: list[str]):
        self.offending = offending
        super().__init__("design outside its box: " + ", ".join(offending))


@dataclass(frozen=True)
class CharacterDesign:
    global_scale: float
    mass_scale: float
    bone_length_scales: tuple[float, ...]
    geom_size_scales: tuple[float, ...]
    frictionloss: tuple[float, ...]
    motor_gears: tuple[float, ...]

    def __post_init__(self):
        for name in ("bone_length_scales", "geom_size_scales", "frictionloss", "motor_gears"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        object.__setattr__(self, "global_scale", float(self.global_scale))
        object.__setattr__(self, "mass_scale", float(self.mass_scale))

    @classmethod
    def identity(cls, base: CharacterModel | None = None) -> "CharacterDesign":
        base = base or default_character()
        return cls(1.0, 1.0, (1.0,) * base.n_links, (1.0,) * base.n_links,
                   tuple(j.frictionloss for j in base.joints), tuple(j.motor_gear for j in base.joints))

    @property
    def n_links(self) -> int:
        return len(self.bone_length_scales)

    @property
    def n_joints(self) -> int:
        return len(self.frictionloss)

    def violations(self) -> list[str]:
        bad = []

        def check(name, values, box):
            for i, v in enumerate(values):
                if not box[0] <= v <= box[1]:
                    bad.append(f"{name}[{i}]={v:g}" if len(values) > 1 or name.endswith("s") else f"{name}={v:g}")

        check("global_scale", [self.global_scale], SCALE_BOX)
        check("mass_scale", [self.mass_scale], SCALE_BOX)
        check("bone_length_scales", self.bone_length_scales, SCALE_BOX)
        check("geom_size_scales", self.geom_size_scales, SCALE_BOX)
        check("frictionloss", self.frictionloss, FRICTION_BOX)
        check("motor_gears", self.motor_gears, GEAR_BOX)
        return bad

    def to_dict(self) -> dict:
        return {"schema": DESIGN_SCHEMA, "global_scale": self.global_scale, "mass_scale": self.mass_scale,
                "bone_length_scales": list(self.bone_length_scales),
                "geom_size_scales": list(self.geom_size_scales),
                "frictionloss": list(self.frictionloss), "motor_gears": list(self.motor_gears)}

    @classmethod
    def from_dict(cls, d: dict) -> "CharacterDesign":
        if d.get("schema", DESIGN_SCHEMA) != DESIGN_SCHEMA:
            raise ValueError(f"unsupported design schema {d.get('schema')!r}")
        return cls(d["global_scale"], d["mass_scale"], d["bone_length_scales"], d["geom_size_scales"],
                   d["frictionloss"], d["motor_gears"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "CharacterDesign":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build(design: CharacterDesign, base: CharacterModel | None = None) -> CharacterModel:
    """Apply a design to a base model; the kinematic tree is left untouched."""
    base = base or default_character()
    if design.n_links != base.n_links or design.n_joints != base.n_joints:
        raise DimensionError("design does not match the base model topology")
    bad = design.violations()
    if bad:
        raise DesignValidationError(bad)
    links = []
    for ln, b, g in zip(base.links, design.bone_length_scales, design.geom_size_scales):
        links.append(replace(ln, length=ln.length * design.global_scale * b,
                             geom_halfwidth=ln.geom_halfwidth * g,
                             mass=ln.mass * design.mass_scale * g * g))
    joints = [replace(j, frictionloss=f, motor_gear=gear)
              for j, f, gear in zip(base.joints, design.frictionloss, design.motor_gears)]
    return replace(base, links=tuple(links), joints=tuple(joints))


def design_dim(n_links: int, n_joints: int) -> int:
    return 2 + 2 * n_links + 2 * n_joints


def encode(design: CharacterDesign) -> np.ndarray:
    """Flat layout: [global, mass, bone scales, geom scales, frictionloss, gears]."""
    return np.concatenate([[design.global_scale, design.mass_scale], design.bone_length_scales,
                           design.geom_size_scales, design.frictionloss, design.motor_gears])


def design_bounds(n_links: int, n_joints: int) -> tuple[np.ndarray, np.ndarray]:
    n_scale = 2 + 2 * n_links
    lo = np.concatenate([np.full(n_scale, SCALE_BOX[0]), np.full(n_joints, FRICTION_BOX[0]),
                         np.full(n_joints, GEAR_BOX[0])])
    hi = np.concatenate([np.full(n_scale, SCALE_BOX[1]), np.full(n_joints, FRICTION_BOX[1]),
                         np.full(n_joints, GEAR_BOX[1])])
    return lo, hi


def decode(vector, n_links: int = 9, n_joints: int = 8) -> tuple[CharacterDesign, list[str]]:
    """Inverse of :func:`encode`; values outside the box are clamped and reported."""
    v = np.asarray(vector, dtype=float)
    if v.shape != (design_dim(n_links, n_joints),):
        raise DimensionError(f"design vector must have length {design_dim(n_links, n_joints)}, got {v.shape}")
    lo, hi = design_bounds(n_links, n_joints)
    clamped = np.clip(v, lo, hi)
    names = (["global_scale", "mass_scale"] + [f"bone_length_scales[{i}]" for i in range(n_links)]
             + [f"geom_size_scales[{i}]" for i in range(n_links)]
             + [f"frictionloss[{i}]" for i in range(n_joints)] + [f"motor_gears[{i}]" for i in range(n_joints)])
    report = [f"{names[i]}: {v[i]:g} -> {clamped[i]:g}" for i in np.flatnonzero(clamped != v)]
    a = 2
    design = CharacterDesign(clamped[0], clamped[1], clamped[a:a + n_links], clamped[a + n_links:a + 2 * n_links],
                             clamped[a + 2 * n_links:a + 2 * n_links + n_joints],
                             clamped[a + 2 * n_links + n_joints:])
    return design, report
