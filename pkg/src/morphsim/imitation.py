"""Motion-imitation MDP: observations, tracking reward, resets, termination and rollouts."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from morphsim import _kernels as K
from morphsim.character import CharacterDesign, build, encode
from morphsim.motion import MotionClip
from morphsim.physics import (CharacterModel, DimensionError, ResidualForce, SimConfig, SimState,
                              default_character, link_flags, link_frames)

MAX_EPISODE = 300
FORCES_PER_FOOT = 2


@dataclass(frozen=True)
class RewardWeights:
    w_p: float = 0.5
    w_v: float = 0.1
    w_e: float = 0.3
    w_vf: float = 0.1

    def __post_init__(self):
        w = np.array([self.w_p, self.w_v, self.w_e, self.w_vf], dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise ValueError("reward weights must be finite, non-negative and not all zero")
        w = w / w.sum()
        for name, v in zip(("w_p", "w_v", "w_e", "w_vf"), w):
            object.__setattr__(self, name, float(v))

    def as_array(self) -> np.ndarray:
        return np.array([self.w_p, self.w_v, self.w_e, self.w_vf])


@dataclass(frozen=True)
class ImitationConfig:
    weights: RewardWeights = RewardWeights()
    termination_threshold: float = 0.5
    max_episode: int = MAX_EPISODE
    pd_scale: float = 1.0
    gain_clamp: float = 1.0
    sim: SimConfig = SimConfig()


def wrap_angle(x):
    """Wrap into (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=float) + math.pi, 2 * math.pi) - math.pi
    return np.where(y == -math.pi, math.pi, y)


# ---------------------------------------------------------------- reference

@dataclass(frozen=True, eq=False)
class Reference:
    """A clip expressed on one particular character: poses, velocities and keypoints."""

    clip: MotionClip
    q: np.ndarray
    qdot: np.ndarray
    keypoints: np.ndarray

    def __len__(self) -> int:
        return self.q.shape[0]


def keypoints_of(model: CharacterModel, q) -> np.ndarray:
    _, origin, _, tip = link_frames(model, q)
    return np.vstack([origin[:1], tip])


def make_reference(model: CharacterModel, clip: MotionClip) -> Reference:
    if clip.n_dof != model.n_dof:
        raise DimensionError(f"clip has {clip.n_dof} coordinates, character has {model.n_dof}")
    kp = np.stack([keypoints_of(model, q) for q in clip.frames])
    return Reference(clip, clip.frames, clip.velocities, kp)


# ---------------------------------------------------------------- features

def _rot(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def obs_dim(model: CharacterModel) -> int:
    n_kp = model.n_links + 1
    n_rot = model.n_dof - 2
    return 4 * n_kp + model.n_dof + 2 * n_rot + len(model.foot_links) + 2 + 2 * model.n_links + 2 * model.n_joints


def action_dim(model: CharacterModel) -> int:
    return 3 * model.n_joints + 3 * FORCES_PER_FOOT * len(model.foot_links)


def _features(model, q, qdot, flags, ref_q, ref_kp, design_vec):
    if q.shape != (model.n_dof,) or ref_q.shape != (model.n_dof,):
        raise DimensionError("state and reference layouts differ from the character")
    kp = keypoints_of(model, q)
    rot_t = _rot(-q[2])  # world -> character frame
    origin = kp[0]
    ref_local = (ref_kp - origin) @ rot_t.T
    diff_local = (kp - ref_kp) @ rot_t.T
    vel = qdot.copy()
    vel[:2] = rot_t @ qdot[:2]
    rot_diff = wrap_angle(q[2:] - ref_q[2:])
    ref_rot = ref_q[2:].copy()
    ref_rot[0] = wrap_angle(ref_q[2] - q[2])
    return np.concatenate([ref_local.ravel(), diff_local.ravel(), vel, rot_diff, ref_rot,
                           np.asarray(flags, dtype=float), design_vec])


def featurize(model: CharacterModel, state: SimState, ref_q, ref_qdot, design: CharacterDesign) -> np.ndarray:
    """Observation in the frame of the simulated root: reference keypoints, keypoint
    errors, velocities, wrapped rotation errors, reference rotations, foot contacts
    and the design vector."""
    ref_q = np.asarray(ref_q, dtype=float)
    return _features(model, np.asarray(state.q, dtype=float), np.asarray(state.qdot, dtype=float),
                     state.contact_flags, ref_q, keypoints_of(model, ref_q), encode(design))


# ---------------------------------------------------------------- reward

REWARD_EXPONENTS = (2.0, 0.005, 5.0, 1.0)


def reward_terms(rot_err_sq: float, vel_err_sq: float, pos_err_sq: float, force_sq: float,
                 weights: RewardWeights = RewardWeights()) -> dict:
    comps = np.exp(-np.array(REWARD_EXPONENTS) * np.array([rot_err_sq, vel_err_sq, pos_err_sq, force_sq]))
    out = dict(zip(("r_p", "r_v", "r_e", "r_vf"), map(float, comps)))
    # normalized weights can sum to 1 + ulp
    out["r_t"] = min(1.0, float(weights.as_array() @ comps))
    return out


def reward(model: CharacterModel, state: SimState, ref_q, ref_qdot, residual_magnitudes=(),
           weights: RewardWeights = RewardWeights(), force_cap: float = 100.0) -> dict:
    """Tracking reward and its four components.

    ``residual_magnitudes`` are the applied (contact-gated) force magnitudes in newtons;
    they are normalized by ``force_cap``.
    """
    q = np.asarray(state.q, dtype=float)
    qd = np.asarray(state.qdot, dtype=float)
    ref_q = np.asarray(ref_q, dtype=float)
    ref_qdot = np.asarray(ref_qdot, dtype=float)
    if q.shape != ref_q.shape or qd.shape != ref_qdot.shape:
        raise DimensionError("state and reference layouts differ")
    e = np.asarray(residual_magnitudes, dtype=float) / force_cap
    rot = wrap_angle(q[2:] - ref_q[2:])
    pos = keypoints_of(model, q) - keypoints_of(model, ref_q)
    return reward_terms(float(rot @ rot), float((qd - ref_qdot) @ (qd - ref_qdot)),
                        float(np.sum(pos * pos)), float(e @ e), weights)


# ---------------------------------------------------------------- reset / termination

def lift_out_of_ground(model: CharacterModel, q: np.ndarray) -> np.ndarray:
    """Raise the root so that no collision disc starts below the ground."""
    _, _, start, tip = link_frames(model, q)
    low = float(np.min(np.minimum(start[:, 1], tip[:, 1]) - model.arrays["halfwidth"]))
    q = q.copy()
    if low < 0:
        q[1] -= low
    return q


def reset_rsi(model: CharacterModel, ref: Reference, rng: np.random.Generator | None = None,
              start: int | None = None, cfg: SimConfig = SimConfig()) -> tuple[SimState, int]:
    """Start from a uniformly random reference frame in ``[0, T-2]``."""
    if len(ref) < 2:
        raise ValueError("clip too short")
    if start is None:
        start = int(rng.integers(0, len(ref) - 1))
    q = lift_out_of_ground(model, ref.q[start])
    qd = ref.qdot[start].copy()
    flags = link_flags(model, q, cfg)[list(model.foot_links)]
    return SimState(q, qd, start / ref.clip.frame_rate, flags), start


def check_termination(model: CharacterModel, state: SimState, ref_q, threshold: float = 0.5,
                      cfg: SimConfig = SimConfig(), ref_keypoints=None) -> tuple[bool, str]:
    """Terminate on mean keypoint deviation above ``threshold`` or any non-foot link on the ground."""
    kp = keypoints_of(model, state.q)
    ref_kp = keypoints_of(model, np.asarray(ref_q, dtype=float)) if ref_keypoints is None else ref_keypoints
    if float(np.mean(np.linalg.norm(kp - ref_kp, axis=1))) > threshold:
        return True, "deviation"
    flags = link_flags(model, state.q, cfg)
    flags[list(model.foot_links)] = False
    if flags.any():
        return True, "fallen"
    return False, ""


# ---------------------------------------------------------------- actions

@dataclass(frozen=True)
class DecodedAction:
    pd_target: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    rf_link: np.ndarray
    rf_local: np.ndarray
    rf_force: np.ndarray

    def residual_forces(self) -> list[ResidualForce]:
        out = []
        for link, p, f in zip(self.rf_link, self.rf_local, self.rf_force):
            m = float(np.hypot(*f))
            d = (f / m) if m > 0 else np.array([0.0, 1.0])
            out.append(ResidualForce(int(link), tuple(p), tuple(d / np.hypot(*d)), m))
        return out


def decode_action(model: CharacterModel, action, ref_next_q, cfg: ImitationConfig = ImitationConfig()) -> DecodedAction:
    """Split a raw action into PD targets, gains and residual foot forces.

    Layout: [target offsets (nj), log kp scales (nj), log kd scales (nj),
    (position along foot, fx, fy) per residual force]. Forces are in the world frame.
    """
    a = np.asarray(action, dtype=float)
    nj = model.n_joints
    if a.shape != (action_dim(model),):
        raise DimensionError(f"action must have length {action_dim(model)}, got {a.shape}")
    arr = model.arrays
    target = np.asarray(ref_next_q, dtype=float)[3:] + cfg.pd_scale * a[:nj]
    c = cfg.gain_clamp
    kp = arr["kp_base"] * np.exp(np.clip(a[nj:2 * nj], -c, c))
    kd = arr["kd_base"] * np.exp(np.clip(a[2 * nj:3 * nj], -c, c))
    raw = a[3 * nj:].reshape(-1, 3)
    cap = cfg.sim.residual_force_cap
    feet = np.repeat(np.array(model.foot_links, dtype=np.int64), FORCES_PER_FOOT)
    u = (np.clip(raw[:, 0], -1, 1) + 1) / 2
    length = arr["length"][feet]
    along = (u - arr["offset"][feet]) * length
    local = arr["axis"][feet] * along[:, None]
    force = cap * np.clip(raw[:, 1:], -1, 1)
    norm = np.hypot(force[:, 0], force[:, 1])
    force = force * np.minimum(1.0, cap / np.maximum(norm, 1e-300))[:, None]
    return DecodedAction(target, kp, kd, feet, local, force)


def applied_magnitudes(model: CharacterModel, decoded: DecodedAction, contact_flags) -> np.ndarray:
    """Force magnitudes after gating on the feet currently touching the ground."""
    gate = np.zeros(model.n_links, dtype=bool)
    gate[list(model.foot_links)] = np.asarray(contact_flags, dtype=bool)
    return np.hypot(decoded.rf_force[:, 0], decoded.rf_force[:, 1]) * gate[decoded.rf_link]


def apply_action(model: CharacterModel, state: SimState, decoded: DecodedAction,
                 cfg: SimConfig = SimConfig()) -> tuple[SimState, bool]:
    arr = model.arrays
    flags = np.zeros(model.n_links, dtype=np.bool_)
    flags[list(model.foot_links)] = state.contact_flags
    q, qd, fl, ok = K.control_step(
        arr["parent"], arr["axis"], arr["length"], arr["anchor"], arr["offset"], arr["mass"], arr["inertia"],
        arr["halfwidth"], arr["lower"], arr["upper"], arr["fric"], arr["gear"], model.fixed_root,
        state.q, state.qdot, flags, decoded.pd_target, decoded.kp, decoded.kd,
        decoded.rf_link, decoded.rf_local, decoded.rf_force, cfg.params(), cfg.dt, cfg.substeps)
    return SimState(q, qd, state.time + cfg.substeps * cfg.dt, fl[list(model.foot_links)]), bool(ok)


# ---------------------------------------------------------------- episodes

class ImitationEnv:
    """Single episode driver for one character design and one clip."""

    def __init__(self, design: CharacterDesign, clip: MotionClip, cfg: ImitationConfig = ImitationConfig(),
                 base: CharacterModel | None = None, model: CharacterModel | None = None):
        self.design = design
        self.cfg = cfg
        self.model = model if model is not None else build(design, base or default_character())
        self.ref = make_reference(self.model, clip)
        self.design_vec = encode(design)
        self.state: SimState | None = None
        self.frame = 0
        self.steps = 0

    @property
    def clip(self) -> MotionClip:
        return self.ref.clip

    def observe(self) -> np.ndarray:
        t = self.frame
        return _features(self.model, self.state.q, self.state.qdot, self.state.contact_flags,
                         self.ref.q[t], self.ref.keypoints[t], self.design_vec)

    def reset(self, rng=None, start: int | None = None) -> np.ndarray:
        self.state, self.frame = reset_rsi(self.model, self.ref, rng, start, self.cfg.sim)
        self.steps = 0
        return self.observe()

    def remaining(self) -> int:
        return len(self.ref) - 1 - self.frame

    def step(self, action) -> dict:
        """Advance one control period toward the next reference frame."""
        model, ref, t = self.model, self.ref, self.frame
        decoded = decode_action(model, action, ref.q[t + 1], self.cfg)
        mags = applied_magnitudes(model, decoded, self.state.contact_flags)
        new, ok = apply_action(model, self.state, decoded, self.cfg.sim)
        self.frame = t + 1
        self.steps += 1
        if not ok:
            self.state = SimState(ref.q[t + 1].copy(), ref.qdot[t + 1].copy(), new.time, new.contact_flags)
            return {"reward": reward_terms(math.inf, math.inf, math.inf, math.inf, self.cfg.weights),
                    "terminated": True, "reason": "unstable", "truncated": False, "magnitudes": mags,
                    "state": self.state}
        self.state = new
        r = reward(model, new, ref.q[t + 1], ref.qdot[t + 1], mags, self.cfg.weights,
                   self.cfg.sim.residual_force_cap)
        term, reason = check_termination(model, new, ref.q[t + 1], self.cfg.termination_threshold, self.cfg.sim,
                                         ref.keypoints[t + 1])
        truncated = not term and (self.frame >= len(ref) - 1 or self.steps >= self.cfg.max_episode)
        return {"reward": r, "terminated": term, "reason": reason, "truncated": truncated,
                "magnitudes": mags, "state": new}


@dataclass
class Trajectory:
    clip_id: str
    frames: list[int] = field(default_factory=list)
    obs: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    rewards: list[dict] = field(default_factory=list)
    states: list[SimState] = field(default_factory=list)
    magnitudes: list[np.ndarray] = field(default_factory=list)
    terminations: list[str] = field(default_factory=list)
    initial_state: SimState | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def failed(self) -> bool:
        return any(self.terminations)

    @property
    def total_reward(self) -> float:
        return float(sum(r["r_t"] for r in self.rewards))

    def sim_q(self) -> np.ndarray:
        """Simulated poses aligned with reference frames ``start .. end``."""
        return np.stack([self.initial_state.q] + [s.q for s in self.states])

    def to_csv(self, path, model: CharacterModel) -> None:
        nd = model.n_dof
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "time"] + [f"q{i}" for i in range(nd)] + [f"qdot{i}" for i in range(nd)]
                       + ["r_t", "r_p", "r_v", "r_e", "r_vf"]
                       + [f"contact{i}" for i in range(len(model.foot_links))]
                       + [f"residual{i}" for i in range(len(self.magnitudes[0]) if self.magnitudes else 0)]
                       + ["termination"])
            for k in range(len(self)):
                s, r = self.states[k], self.rewards[k]
                w.writerow([self.frames[k], repr(s.time)] + [repr(float(x)) for x in s.q]
                           + [repr(float(x)) for x in s.qdot]
                           + [repr(r[c]) for c in ("r_t", "r_p", "r_v", "r_e", "r_vf")]
                           + [int(x) for x in s.contact_flags] + [repr(float(x)) for x in self.magnitudes[k]]
                           + [self.terminations[k]])

    def summary(self) -> dict:
        return {"clip": self.clip_id, "steps": len(self), "failed": self.failed,
                "failures": [f for f, t in zip(self.frames, self.terminations) if t],
                "total_reward": self.total_reward}

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def rollout(controller, design: CharacterDesign, clip: MotionClip, mode: str = "deterministic",
            rng: np.random.Generator | None = None, cfg: ImitationConfig = ImitationConfig(),
            base: CharacterModel | None = None, start: int = 0, max_steps: int | None = None,
            reset_on_failure: bool | None = None, env: ImitationEnv | None = None) -> Trajectory:
    """Drive ``controller`` along ``clip``.

    ``controller.act(obs_batch, rng, deterministic)`` must return a batch of actions.
    In deterministic (evaluation) mode a failed frame resets the character onto the
    reference at that frame and the episode continues to the clip end.
    """
    if mode not in ("stochastic", "deterministic"):
        raise ValueError("mode must be 'stochastic' or 'deterministic'")
    deterministic = mode == "deterministic"
    if reset_on_failure is None:
        reset_on_failure = deterministic
    if not deterministic and rng is None:
        raise ValueError("stochastic rollouts need an rng")
    env = env or ImitationEnv(design, clip, cfg, base)
    traj = Trajectory(clip.id)
    if start >= len(clip) - 1:
        env.state, env.frame = reset_rsi(env.model, env.ref, start=min(start, len(clip) - 1), cfg=cfg.sim)
        traj.initial_state = env.state.copy()
        return traj
    obs = env.reset(start=start)
    traj.initial_state = env.state.copy()
    expected = obs_dim(env.model)
    limit = max_steps if max_steps is not None else (len(clip) - 1 - start if deterministic else cfg.max_episode)
    while len(traj) < limit and env.remaining() > 0:
        if obs.shape != (expected,):
            raise DimensionError("observation size mismatch")
        action = np.asarray(controller.act(obs[None], rng=rng, deterministic=deterministic))[0]
        out = env.step(action)
        traj.frames.append(env.frame)
        traj.obs.append(obs)
        traj.actions.append(action)
        traj.rewards.append(out["reward"])
        traj.magnitudes.append(out["magnitudes"])
        traj.terminations.append(out["reason"] if out["terminated"] else "")
        traj.states.append(out["state"].copy())
        if out["terminated"]:
            if not reset_on_failure:
                break
            env.state, _ = reset_rsi(env.model, env.ref, start=env.frame, cfg=cfg.sim)
        obs = env.observe()
    return traj


class ZeroController:
    """Plays back the reference through the PD controller with no corrections."""

    def __init__(self, act_dim: int):
        self.act_dim = act_dim

    def act(self, obs, rng=None, deterministic=True):
        return np.zeros((np.asarray(obs).shape[0], self.act_dim))
