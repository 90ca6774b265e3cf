"""Planar articulated rigid-body simulator.

Characters are trees of rigid links connected by revolute joints, moving in
the vertical x-y plane over a ground plane at ``y = 0``. Each link is a box
of length ``length`` and half-width ``geom_halfwidth`` whose collision shape is
a pair of discs (radius = half-width) at its two ends.

Units are SI throughout: metres, kilograms, seconds, radians, newtons.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from morphsim import _kernels as K

MODEL_SCHEMA = "morphsim.character/1"


class DimensionError(ValueError):
    """Array shapes do not match the character layout."""


class IntegrationError(RuntimeError):
    """Non-finite values entered or left the integrator."""


class ModelError(ValueError):
    """A character model violates its structural invariants."""


@dataclass(frozen=True)
class SimConfig:
    gravity: float = 9.81
    contact_stiffness: float = 2.0e5
    contact_damping: float = 2000.0
    friction_coef: float = 1.0
    torque_limit: float = 200.0
    residual_force_cap: float = 100.0
    sim_hz: float = 450.0
    control_hz: float = 30.0
    # a geom counts as touching the ground when its lowest point is below this height
    contact_tolerance: float = 1.0e-3
    # joints may overshoot their limits by at most this much (rad) before being pushed back
    limit_tolerance: float = 0.05
    limit_baumgarte: float = 0.2
    solver_iterations: int = 4

    @property
    def dt(self) -> float:
        return 1.0 / self.sim_hz

    @property
    def substeps(self) -> int:
        n = self.sim_hz / self.control_hz
        if abs(n - round(n)) > 1e-9:
            raise ValueError("sim_hz must be an integer multiple of control_hz")
        return int(round(n))

    def params(self) -> np.ndarray:
        p = np.zeros(K.N_PARAMS)
        p[K.P_GRAVITY] = self.gravity
        p[K.P_K_CONTACT] = self.contact_stiffness
        p[K.P_C_CONTACT] = self.contact_damping
        p[K.P_MU] = self.friction_coef
        p[K.P_TORQUE_LIMIT] = self.torque_limit
        p[K.P_CONTACT_TOL] = self.contact_tolerance
        p[K.P_LIMIT_BAUMGARTE] = self.limit_baumgarte
        p[K.P_PGS_ITERS] = self.solver_iterations
        return p


@dataclass(frozen=True)
class Link:
    name: str
    length: float
    mass: float
    geom_halfwidth: float
    # unit direction of the link's long axis in its own frame
    axis: tuple[float, float] = (0.0, -1.0)
    # fraction of the length that extends behind the link origin (a heel, for feet)
    offset: float = 0.0

    @property
    def inertia(self) -> float:
        """Moment of inertia about the centre of mass (uniform box)."""
        return self.mass * (self.length**2 + (2.0 * self.geom_halfwidth) ** 2) / 12.0


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    child: int
    lower: float
    upper: float
    frictionloss: float = 0.0
    motor_gear: float = 1.0
    # position of the joint along the parent's axis, as a fraction of its length
    anchor: float = 1.0


@dataclass(frozen=True)
class CharacterModel:
    links: tuple[Link, ...]
    joints: tuple[Joint, ...]
    foot_links: tuple[int, ...]
    root: int = 0
    fixed_root: bool = False
    kp_base: tuple[float, ...] = ()
    kd_base: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "foot_links", tuple(self.foot_links))
        object.__setattr__(self, "kp_base", tuple(self.kp_base) or (100.0,) * len(self.joints))
        object.__setattr__(self, "kd_base", tuple(self.kd_base) or (10.0,) * len(self.joints))
        self.validate()

    def validate(self) -> None:
        nl = len(self.links)
        if self.root != 0:
            raise ModelError("root link must be link 0")
        if len(self.joints) != nl - 1:
            raise ModelError(f"{nl} links need {nl - 1} joints, got {len(self.joints)}")
        for k, j in enumerate(self.joints):
            if j.child != k + 1:
                raise ModelError(f"joint {j.name!r}: child must be link {k + 1} (topological order)")
            if not 0 <= j.parent < j.child:
                raise ModelError(f"joint {j.name!r}: parent {j.parent} must precede child {j.child}")
            if not j.lower < j.upper:
                raise ModelError(f"joint {j.name!r}: lower limit must be below upper")
            if j.frictionloss < 0:
                raise ModelError(f"joint {j.name!r}: frictionloss must be >= 0")
            if j.motor_gear <= 0:
                raise ModelError(f"joint {j.name!r}: motor_gear must be > 0")
        for ln in self.links:
            if min(ln.length, ln.mass, ln.geom_halfwidth) <= 0:
                raise ModelError(f"link {ln.name!r}: length, mass and halfwidth must be > 0")
            if abs(math.hypot(*ln.axis) - 1.0) > 1e-9:
                raise ModelError(f"link {ln.name!r}: axis must be a unit vector")
        for f in self.foot_links:
            if not 0 <= f < nl:
                raise ModelError(f"foot link {f} out of range")
        if len(self.kp_base) != len(self.joints) or len(self.kd_base) != len(self.joints):
            raise ModelError("kp_base/kd_base must have one entry per joint")

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_dof(self) -> int:
        return 3 + len(self.joints)

    @property
    def total_mass(self) -> float:
        return sum(ln.mass for ln in self.links)

    @cached_property
    def arrays(self) -> dict:
        parent = np.full(self.n_links, -1, dtype=np.int64)
        anchor = np.zeros(self.n_links)
        for j in self.joints:
            parent[j.child] = j.parent
            anchor[j.child] = j.anchor
        return dict(
            parent=parent,
            axis=np.array([ln.axis for ln in self.links], dtype=float),
            length=np.array([ln.length for ln in self.links]),
            anchor=anchor,
            offset=np.array([ln.offset for ln in self.links]),
            mass=np.array([ln.mass for ln in self.links]),
            inertia=np.array([ln.inertia for ln in self.links]),
            halfwidth=np.array([ln.geom_halfwidth for ln in self.links]),
            lower=np.array([j.lower for j in self.joints]),
            upper=np.array([j.upper for j in self.joints]),
            fric=np.array([j.frictionloss for j in self.joints]),
            gear=np.array([j.motor_gear for j in self.joints]),
            kp_base=np.array(self.kp_base, dtype=float),
            kd_base=np.array(self.kd_base, dtype=float),
            is_foot=np.isin(np.arange(self.n_links), self.foot_links),
        )

    def with_masses_scaled(self, factor: float) -> "CharacterModel":
        links = [replace(ln, mass=ln.mass * factor) for ln in self.links]
        return replace(self, links=tuple(links))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = MODEL_SCHEMA
        d["units"] = {"length": "m", "mass": "kg", "angle": "rad", "frictionloss": "N*m",
                      "kp_base": "N*m/rad", "kd_base": "N*m*s/rad"}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CharacterModel":
        if d.get("schema", MODEL_SCHEMA) != MODEL_SCHEMA:
            raise ModelError(f"unsupported character schema {d.get('schema')!r}")
        links = tuple(Link(**{**ln, "axis": tuple(ln["axis"])}) for ln in d["links"])
        joints = tuple(Joint(**j) for j in d["joints"])
        return cls(links=links, joints=joints, foot_links=tuple(d["foot_links"]),
                   root=d.get("root", 0), fixed_root=d.get("fixed_root", False),
                   kp_base=tuple(d.get("kp_base", ())), kd_base=tuple(d.get("kd_base", ())))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "CharacterModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_character() -> CharacterModel:
    """Nine-link planar humanoid facing +x.

    Links: torso (root), head, arms (both collapsed into one link), then
    thigh/shin/foot for the left and right leg. The root origin is the pelvis.
    """
    up, down, fwd = (0.0, 1.0), (0.0, -1.0), (1.0, 0.0)
    links = (
        Link("torso", 0.55, 30.0, 0.12, up),
        Link("head", 0.22, 5.0, 0.09, up),
        Link("arms", 0.60, 7.0, 0.04, down),
        Link("thigh_l", 0.45, 7.0, 0.06, down),
        Link("shin_l", 0.45, 3.5, 0.035, down),
        Link("foot_l", 0.26, 1.2, 0.05, fwd, offset=0.3),
        Link("thigh_r", 0.45, 7.0, 0.06, down),
        Link("shin_r", 0.45, 3.5, 0.035, down),
        Link("foot_r", 0.26, 1.2, 0.05, fwd, offset=0.3),
    )
    joints = (
        Joint("neck", 0, 1, -0.8, 0.8, anchor=1.0),
        Joint("shoulder", 0, 2, -3.0, 3.0, anchor=0.95),
        Joint("hip_l", 0, 3, -1.0, 2.2, anchor=0.0),
        Joint("knee_l", 3, 4, -2.6, 0.0, anchor=1.0),
        Joint("ankle_l", 4, 5, -0.9, 0.9, anchor=1.0),
        Joint("hip_r", 0, 6, -1.0, 2.2, anchor=0.0),
        Joint("knee_r", 6, 7, -2.6, 0.0, anchor=1.0),
        Joint("ankle_r", 7, 8, -0.9, 0.9, anchor=1.0),
    )
    kp = (150.0, 150.0, 1000.0, 1000.0, 1000.0, 1000.0, 1000.0, 1000.0)
    kd = (15.0, 15.0, 100.0, 100.0, 100.0, 100.0, 100.0, 100.0)
    return CharacterModel(links=links, joints=joints, foot_links=(5, 8), kp_base=kp, kd_base=kd)


@dataclass(frozen=True)
class ResidualForce:
    geom: int
    contact_point: tuple[float, float]
    direction: tuple[float, float]
    magnitude: float

    def __post_init__(self):
        n = math.hypot(*self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("residual force direction must be a unit vector")
        if self.magnitude < 0:
            raise ValueError("residual force magnitude must be >= 0")


@dataclass
class SimState:
    q: np.ndarray
    qdot: np.ndarray
    time: float = 0.0
    contact_flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def copy(self) -> "SimState":
        return SimState(self.q.copy(), self.qdot.copy(), self.time, self.contact_flags.copy())


def _check_state(model: CharacterModel, q, qdot):
    if q.shape != (model.n_dof,) or qdot.shape != (model.n_dof,):
        raise DimensionError(f"state must have length {model.n_dof}, got {q.shape} / {qdot.shape}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qdot))):
        raise IntegrationError("non-finite state")


def link_flags(model: CharacterModel, q: np.ndarray, cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Per-link ground-touch flags (lowest point within tolerance of the plane)."""
    a = model.arrays
    _, _, start, tip = K.forward_kinematics(a["parent"], a["axis"], a["length"], a["anchor"],
                                            a["offset"], np.asarray(q, dtype=float))
    low = np.minimum(start[:, 1], tip[:, 1]) - a["halfwidth"]
    return low <= cfg.contact_tolerance


def make_state(model: CharacterModel, q, qdot=None, time: float = 0.0,
               cfg: SimConfig = SimConfig()) -> SimState:
    q = np.asarray(q, dtype=float).copy()
    qdot = np.zeros_like(q) if qdot is None else np.asarray(qdot, dtype=float).copy()
    _check_state(model, q, qdot)
    flags = link_flags(model, q, cfg)[list(model.foot_links)]
    return SimState(q, qdot, time, flags)


def _residual_arrays(model: CharacterModel, residual_forces, cap: float):
    n = len(residual_forces)
    rf_link = np.zeros(n, dtype=np.int64)
    rf_local = np.zeros((n, 2))
    rf_force = np.zeros((n, 2))
    feet = set(model.foot_links)
    for r, f in enumerate(residual_forces):
        if f.geom not in feet:
            raise ValueError(f"residual force on link {f.geom}, which is not a foot geom")
        rf_link[r] = f.geom
        rf_local[r] = f.contact_point
        rf_force[r] = np.asarray(f.direction) * min(f.magnitude, cap)
    return rf_link, rf_local, rf_force


def _flags_per_link(model: CharacterModel, contact_flags) -> np.ndarray:
    out = np.zeros(model.n_links, dtype=np.bool_)
    out[list(model.foot_links)] = np.asarray(contact_flags, dtype=bool)
    return out


def step(model: CharacterModel, state: SimState, torques, residual_forces=(), dt: float | None = None,
         cfg: SimConfig = SimConfig()) -> SimState:
    """Advance one semi-implicit Euler step under explicit joint torques.

    Residual forces act only on foot geoms whose contact flag is set in
    ``state``; the rest are dropped.
    """
    dt = cfg.dt if dt is None else dt
    if not dt > 0:
        raise ValueError("dt must be positive")
    torques = np.asarray(torques, dtype=float)
    if torques.shape != (model.n_joints,):
        raise DimensionError(f"expected {model.n_joints} torques, got {torques.shape}")
    if not np.all(np.isfinite(torques)):
        raise IntegrationError("non-finite torque")
    _check_state(model, state.q, state.qdot)
    a = model.arrays
    rf_link, rf_local, rf_force = _residual_arrays(model, residual_forces, cfg.residual_force_cap)
    zeros = np.zeros(model.n_joints)
    q, qd, flags, ok = K.substep(
        a["parent"], a["axis"], a["length"], a["anchor"], a["offset"], a["mass"], a["inertia"], a["halfwidth"],
        a["lower"], a["upper"], a["fric"], model.fixed_root,
        state.q, state.qdot, torques, zeros, zeros, zeros,
        rf_link, rf_local, rf_force, _flags_per_link(model, state.contact_flags), cfg.params(), dt)
    if not ok:
        raise IntegrationError("integration produced non-finite state")
    return SimState(q, qd, state.time + dt, flags[list(model.foot_links)])


def pd_torque(kp, kd, p_target, p, pdot, motor_gear, torque_limit: float | None = 200.0) -> np.ndarray:
    """Geared PD torque; the raw PD output is clamped to ``torque_limit`` before gearing."""
    arrs = [np.asarray(x, dtype=float) for x in (kp, kd, p_target, p, pdot, motor_gear)]
    n = arrs[0].shape
    if any(x.shape != n for x in arrs):
        raise DimensionError("pd_torque inputs must share one length")
    kp, kd, p_target, p, pdot, gear = arrs
    if np.any(kp < 0) or np.any(kd < 0):
        raise ValueError("PD gains must be non-negative")
    raw = kp * (p_target - p) - kd * pdot
    if torque_limit is not None:
        raw = np.clip(raw, -torque_limit, torque_limit)
    return gear * raw


def control_step(model: CharacterModel, state: SimState, pd_target, kp, kd, residual_forces=(),
                 cfg: SimConfig = SimConfig()) -> tuple[SimState, bool]:
    """One control period: ``cfg.substeps`` integrator steps with PD torques.

    The PD law is re-evaluated every substep with its stiffness and damping
    integrated implicitly, which keeps light or high-gear designs stable.
    Returns the new state and whether the integration stayed finite.
    """
    a = model.arrays
    rf_link, rf_local, rf_force = _residual_arrays(model, residual_forces, cfg.residual_force_cap)
    q, qd, flags, ok = K.control_step(
        a["parent"], a["axis"], a["length"], a["anchor"], a["offset"], a["mass"], a["inertia"], a["halfwidth"],
        a["lower"], a["upper"], a["fric"], a["gear"], model.fixed_root,
        state.q, state.qdot, _flags_per_link(model, state.contact_flags),
        np.asarray(pd_target, dtype=float), np.asarray(kp, dtype=float), np.asarray(kd, dtype=float),
        rf_link, rf_local, rf_force, cfg.params(), cfg.dt, cfg.substeps)
    new = SimState(q, qd, state.time + cfg.substeps * cfg.dt, flags[list(model.foot_links)])
    return new, bool(ok)


def link_frames(model: CharacterModel, q):
    """(absolute link angles, link origins, segment starts, segment tips) for pose ``q``."""
    a = model.arrays
    return K.forward_kinematics(a["parent"], a["axis"], a["length"], a["anchor"], a["offset"],
                                np.asarray(q, dtype=float))


def keypoints(model: CharacterModel, q) -> np.ndarray:
    """Tracked joint positions: the root origin followed by every link tip, shape (n_links + 1, 2)."""
    _, origin, _, tip = link_frames(model, q)
    return np.vstack([origin[:1], tip])


def _link_velocities(model: CharacterModel, q, qd):
    """Link angles, centres, centre velocities and angular velocities by tree propagation."""
    phi, origin, _, _ = link_frames(model, q)
    nl = model.n_links
    parent = model.arrays["parent"]
    omega = np.empty(nl)
    v_origin = np.empty((nl, 2))
    omega[0] = qd[2]
    v_origin[0] = qd[:2]
    for i in range(1, nl):
        p = parent[i]
        omega[i] = omega[p] + qd[2 + i]
        r = origin[i] - origin[p]
        v_origin[i] = v_origin[p] + omega[p] * np.array([-r[1], r[0]])
    centre = np.empty((nl, 2))
    v_centre = np.empty((nl, 2))
    for i, ln in enumerate(model.links):
        c, s = math.cos(phi[i]), math.sin(phi[i])
        r = (0.5 - ln.offset) * ln.length * np.array([c * ln.axis[0] - s * ln.axis[1],
                                                      s * ln.axis[0] + c * ln.axis[1]])
        centre[i] = origin[i] + r
        v_centre[i] = v_origin[i] + omega[i] * np.array([-r[1], r[0]])
    return centre, v_centre, omega


def total_energy(model: CharacterModel, state: SimState, gravity: float = 9.81) -> float:
    """Kinetic plus gravitational potential energy (zero potential at y = 0).

    Link velocities are propagated down the tree directly rather than through
    the integrator's mass matrix, so this doubles as an independent check.
    """
    centre, v, omega = _link_velocities(model, state.q, state.qdot)
    energy = 0.0
    for i, ln in enumerate(model.links):
        energy += 0.5 * ln.mass * float(v[i] @ v[i]) + 0.5 * ln.inertia * omega[i] ** 2
        energy += ln.mass * gravity * centre[i, 1]
    return float(energy)


def linear_momentum(model: CharacterModel, state: SimState) -> np.ndarray:
    _, v, _ = _link_velocities(model, state.q, state.qdot)
    return (model.arrays["mass"][:, None] * v).sum(axis=0)


def centre_of_mass(model: CharacterModel, q) -> np.ndarray:
    _, _, start, tip = link_frames(model, q)
    m = model.arrays["mass"]
    com = 0.5 * (start + tip)
    return (m[:, None] * com).sum(axis=0) / m.sum()
