"""Reference clips, procedural gait generators and the curriculum sampler."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from morphsim.physics import CharacterModel, default_character, link_frames

CLIP_SCHEMA = "morphsim.clip/1"
KINDS = ("walk", "hop", "crawl", "kick", "cartwheel-proxy")


@dataclass(frozen=True, eq=False)
class MotionClip:
    """Reference poses sampled at a fixed rate. Rows share the ``SimState.q`` layout."""

    frames: np.ndarray
    frame_rate: float
    category: str
    id: str

    def __post_init__(self):
        frames = np.array(self.frames, dtype=float)
        if frames.ndim != 2 or frames.shape[0] < 2:
            raise ValueError("a clip needs at least two frames of equal length")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        if not np.all(np.isfinite(frames)):
            raise ValueError("clip frames must be finite")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def n_dof(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return (len(self) - 1) / self.frame_rate

    @cached_property
    def velocities(self) -> np.ndarray:
        """Central differences inside the clip, one-sided at both ends."""
        v = np.gradient(self.frames, 1.0 / self.frame_rate, axis=0)
        v.setflags(write=False)
        return v

    def to_dict(self) -> dict:
        return {"schema": CLIP_SCHEMA, "id": self.id, "category": self.category,
                "frame_rate": self.frame_rate, "frames": self.frames.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionClip":
        if d.get("schema") != CLIP_SCHEMA:
            raise ValueError(f"unsupported clip schema {d.get('schema')!r}")
        return cls(np.asarray(d["frames"], dtype=float), float(d["frame_rate"]), d["category"], d["id"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MotionClip":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_corpus(directory) -> list[MotionClip]:
    return [MotionClip.load(p) for p in sorted(Path(directory).glob("*.json")) if p.name != "manifest.json"]


# ---------------------------------------------------------------- curriculum

@dataclass
class CurriculumState:
    """Per-clip success history; clips that fail more often are drawn more often."""

    clip_ids: list[str]
    temperature: float = 0.2
    decay: float = 0.5
    max_history: int = 50
    history: dict[str, deque] = field(default_factory=dict)
    success_rate: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if len(set(self.clip_ids)) != len(self.clip_ids):
            raise ValueError("duplicate clip ids")
        for cid in self.clip_ids:
            self.history.setdefault(cid, deque(maxlen=self.max_history))
            self.success_rate.setdefault(cid, 0.0)

    def probabilities(self) -> np.ndarray:
        if not self.clip_ids:
            raise ValueError("curriculum has no clips")
        z = -np.array([self.success_rate[c] for c in self.clip_ids]) / self.temperature
        z -= z.max()
        p = np.exp(z)
        return p / p.sum()

    def to_dict(self) -> dict:
        return {"temperature": self.temperature, "decay": self.decay, "max_history": self.max_history,
                "history": {c: list(map(bool, h)) for c, h in self.history.items()},
                "success_rate": dict(self.success_rate)}


def ewma(outcomes, decay: float = 0.5) -> float:
    """Normalized exponentially weighted mean; the last entry weighs most."""
    x = np.asarray(list(outcomes), dtype=float)
    if x.size == 0:
        return 0.0
    w = decay ** np.arange(x.size - 1, -1, -1, dtype=float)
    return float(w @ x / w.sum())


def sample_clip(curriculum: CurriculumState, rng: np.random.Generator) -> str:
    p = curriculum.probabilities()
    return curriculum.clip_ids[int(rng.choice(len(p), p=p))]


def record_outcome(curriculum: CurriculumState, clip_id: str, success: bool) -> CurriculumState:
    if clip_id not in curriculum.history:
        raise KeyError(f"unknown clip id {clip_id!r}")
    q = curriculum.history[clip_id]
    q.append(bool(success))
    curriculum.success_rate[clip_id] = ewma(q, curriculum.decay)
    return curriculum


# ---------------------------------------------------------------- generators

# Joint order of the default character.
NECK, SHOULDER, HIP_L, KNEE_L, ANKLE_L, HIP_R, KNEE_R, ANKLE_R = range(8)
THIGH, SHIN, FOOT = 3, 4, 5

DEFAULT_PARAMS = {
    "walk": {"stride": 0.5, "period": 1.2, "swing": 0.4, "clearance": 0.06, "lean": -0.05, "arm": 0.3},
    "hop": {"period": 0.8, "flight": 0.25},
    "crawl": {"stride": 0.3, "period": 1.6, "swing": 0.35, "clearance": 0.05, "lean": -0.35, "height": 0.8},
    "kick": {"period": 1.6, "height": 1.2, "chamber": 0.9},
    "cartwheel-proxy": {"period": 2.0, "bend": 1.0, "tilt": 0.2},
}


def _leg_ik(model: CharacterModel, dx, dy):
    """Thigh and shin world angles placing the ankle at (dx, dy) from the hip, knee forward."""
    l1, l2 = model.links[THIGH].length, model.links[SHIN].length
    d = np.hypot(dx, dy)
    if np.any(d > l1 + l2 + 1e-9) or np.any(d < abs(l1 - l2)):
        raise ValueError("foot placement outside the reach of the leg")
    alpha = np.arctan2(dx, -dy)
    beta = np.arccos(np.clip((l1 ** 2 + d ** 2 - l2 ** 2) / (2 * l1 * d), -1.0, 1.0))
    thigh = alpha + beta
    kx, ky = l1 * np.sin(thigh), -l1 * np.cos(thigh)
    shin = np.arctan2(dx - kx, -(dy - ky))
    return thigh, shin


def _set_leg(j, root, thigh, shin, hip, knee, ankle):
    j[:, hip] = thigh - root
    j[:, knee] = shin - thigh
    j[:, ankle] = -shin  # keeps the foot level


def _gait(t, model, stride, period, swing, clearance, lean, hip_height):
    """Two-beat gait: each foot rests while the hip passes over it, then arcs forward by ``stride``."""
    if not 0 < swing < 0.5:
        raise ValueError("swing fraction must lie in (0, 0.5)")
    if stride < 0 or clearance < 0:
        raise ValueError("stride and clearance must be non-negative")
    v = stride / period
    reach = v * (1 - swing) * period
    ankle_y = model.links[FOOT].geom_halfwidth
    l_max = 0.98 * (model.links[THIGH].length + model.links[SHIN].length)
    if hip_height is None:
        if reach / 2 >= l_max:
            raise ValueError("stride too long for the legs")
        hip_height = ankle_y + math.sqrt(l_max ** 2 - (reach / 2) ** 2)
    hip_x = v * t
    root = np.full(t.size, float(lean))
    j = np.zeros((t.size, 8))
    for (hip, knee, ankle), off in (((HIP_L, KNEE_L, ANKLE_L), 0.0), ((HIP_R, KNEE_R, ANKLE_R), 0.5)):
        phase = t / period + off
        cycle = np.floor(phase)
        u = phase - cycle
        t0 = (cycle - off) * period
        plant = v * t0 + reach / 2
        w = np.clip((u - (1 - swing)) / swing, 0.0, 1.0)
        foot_x = plant + stride * (w - np.sin(2 * math.pi * w) / (2 * math.pi))
        foot_y = ankle_y + clearance * np.sin(math.pi * w) ** 2
        thigh, shin = _leg_ik(model, foot_x - hip_x, foot_y - hip_height)
        _set_leg(j, root, thigh, shin, hip, knee, ankle)
    xy = np.column_stack([hip_x, np.full(t.size, hip_height)])
    return xy, root, j


def _pose_walk(t, p, model):
    xy, root, j = _gait(t, model, p["stride"], p["period"], p["swing"], p["clearance"], p["lean"], None)
    j[:, SHOULDER] = -p["arm"] * np.sin(2 * math.pi * t / p["period"])
    return xy, root, j


def _pose_crawl(t, p, model):
    xy, root, j = _gait(t, model, p["stride"], p["period"], p["swing"], p["clearance"], p["lean"], p["height"])
    j[:, SHOULDER] = -p["lean"] + 0.4 + 0.2 * np.sin(2 * math.pi * t / p["period"])
    j[:, NECK] = -0.5 * p["lean"]
    return xy, root, j


def _pose_hop(t, p, model):
    """Hops in place: a sinusoidal crouch whose take-off speed matches a ballistic flight."""
    period, frac = p["period"], p["flight"]
    if not 0 < frac < 1:
        raise ValueError("hop flight fraction must lie in (0, 1)")
    g = 9.81
    t_flight, t_stance = frac * period, (1 - frac) * period
    v0 = g * t_flight / 2
    depth = v0 * t_stance / math.pi
    ankle_y = model.links[FOOT].geom_halfwidth
    stand = ankle_y + 0.98 * (model.links[THIGH].length + model.links[SHIN].length)
    u = np.mod(t, period)
    stance = u < t_stance
    tau = u - t_stance
    hip_y = np.where(stance, stand - depth * np.sin(math.pi * u / t_stance), stand + v0 * tau - g * tau ** 2 / 2)
    foot_y = np.where(stance, ankle_y, hip_y - (stand - ankle_y))
    thigh, shin = _leg_ik(model, np.zeros(t.size), foot_y - hip_y)
    root = np.zeros(t.size)
    j = np.zeros((t.size, 8))
    _set_leg(j, root, thigh, shin, HIP_L, KNEE_L, ANKLE_L)
    _set_leg(j, root, thigh, shin, HIP_R, KNEE_R, ANKLE_R)
    j[:, SHOULDER] = -0.8 * (stand - hip_y) / depth * stance
    return np.column_stack([np.zeros(t.size), hip_y]), root, j


def _flat_ankles(j, root):
    j[:, ANKLE_L] = -(root + j[:, HIP_L] + j[:, KNEE_L])
    j[:, ANKLE_R] = -(root + j[:, HIP_R] + j[:, KNEE_R])


def _pose_kick(t, p, model):
    w = np.sin(math.pi * t / p["period"]) ** 2
    j = np.zeros((t.size, 8))
    root = 0.1 * w
    j[:, HIP_R] = p["height"] * w
    j[:, KNEE_R] = -p["chamber"] * np.sin(2 * math.pi * t / p["period"]) ** 2
    j[:, SHOULDER] = -0.4 * w
    return None, root, j


def _pose_bow(t, p, model):
    w = np.sin(math.pi * t / p["period"]) ** 2
    b = p["bend"] * w
    root = -b
    j = np.zeros((t.size, 8))
    for hip in (HIP_L, HIP_R):
        j[:, hip] = b + p["tilt"] * w
    j[:, SHOULDER] = 0.6 * b
    j[:, NECK] = 0.3 * b
    return None, root, j


_POSES = {"walk": _pose_walk, "hop": _pose_hop, "crawl": _pose_crawl, "kick": _pose_kick,
          "cartwheel-proxy": _pose_bow}


def _anchor_left_foot(model: CharacterModel, root_angle, joints):
    """Root translation that keeps the left foot fixed in x and the lowest body point on the ground."""
    a = model.arrays
    f = model.foot_links[0]
    xy = np.zeros((root_angle.size, 2))
    ref_x = None
    for k in range(root_angle.size):
        q = np.concatenate([[0.0, 0.0, root_angle[k]], joints[k]])
        _, origin, start, tip = link_frames(model, q)
        low = float(np.min(np.minimum(start[:, 1], tip[:, 1]) - a["halfwidth"]))
        if ref_x is None:
            ref_x = origin[f, 0]
        xy[k] = (ref_x - origin[f, 0], -low)
    return xy


def generate_clip(kind: str, params: dict | None = None, duration: float = 4.0, *, frame_rate: float = 30.0,
                  clip_id: str | None = None, model: CharacterModel | None = None,
                  oversample: int = 10) -> MotionClip:
    """Procedural periodic reference motion for one gait family.

    Walks, crawls and hops are laid out in Cartesian space (planted stance
    feet, swing arcs, ballistic flight) and converted to joint angles by leg
    inverse kinematics, so the feet never slide or sink. Kicks and bows stand
    on the left foot. Feet are kept level while planted.
    """
    if kind not in _POSES:
        raise ValueError(f"unknown clip kind {kind!r}; expected one of {KINDS}")
    p = dict(DEFAULT_PARAMS[kind])
    for k, v in (params or {}).items():
        if k not in p:
            raise ValueError(f"unknown parameter {k!r} for {kind}")
        p[k] = float(v)
    if any(not math.isfinite(v) for v in p.values()):
        raise ValueError("parameters must be finite")
    if not p["period"] > 0:
        raise ValueError("period must be positive")
    if not frame_rate > 0 or not duration > 0:
        raise ValueError("duration and frame_rate must be positive")
    n = int(round(duration * frame_rate)) + 1
    if n < 2:
        raise ValueError("duration too short for two frames")
    model = model or default_character()
    if model.n_joints != 8:
        raise ValueError("generators target the default eight-joint topology")
    t_fine = np.arange((n - 1) * oversample + 1) / (frame_rate * oversample)
    xy, root, joints = _POSES[kind](t_fine, p, model)
    lo, hi = model.arrays["lower"], model.arrays["upper"]
    if xy is None:
        margin = 0.02
        ankle_r = joints[:, ANKLE_R].copy()
        joints = np.clip(joints, lo + margin, hi - margin)
        _flat_ankles(joints, root)
        if kind == "kick":
            joints[:, ANKLE_R] = ankle_r
        xy = _anchor_left_foot(model, root, joints)
    if np.any(joints < lo - 1e-9) or np.any(joints > hi + 1e-9):
        raise ValueError(f"{kind} parameters drive joints past their limits")
    frames = np.column_stack([xy, root, joints])[::oversample]
    return MotionClip(frames, frame_rate, kind, clip_id or kind)
