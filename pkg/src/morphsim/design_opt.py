"""Design search with a frozen imitation controller.

Each episode has a design stage, where a design policy proposes a character
(reward 0), followed by a control stage, where the frozen controller imitates a
clip on the built character. Only the design policy and its value function are
updated.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from morphsim.character import CharacterDesign, build, decode, design_bounds, encode
from morphsim.imitation import ImitationConfig, ImitationEnv, featurize, keypoints_of, rollout
from morphsim.learn import (GaussianPolicy, Mlp, PpoConfig, ValueFunction, Adam, clip_grad_norm,
                            gaussian_log_prob, normalize_advantages, policy_hash, surrogate_grad)
from morphsim.metrics import EvalReport, accel_error, mpjpe, success
from morphsim.motion import MotionClip
from morphsim.physics import CharacterModel, DimensionError, IntegrationError, default_character


class ControllerMismatch(ValueError):
    pass


# ---------------------------------------------------------------- search space

@dataclass(frozen=True)
class DesignSpace:
    """Searchable coordinates. Each group is a set of encoded-vector slots sharing one value;
    every other slot stays at the base design."""

    base: CharacterDesign
    groups: tuple[tuple[int, ...], ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        dim = len(encode(self.base))
        flat = [i for g in self.groups for i in g]
        if not self.groups or any(not g for g in self.groups):
            raise ValueError("design space needs non-empty groups")
        if len(set(flat)) != len(flat) or min(flat) < 0 or max(flat) >= dim:
            raise ValueError("group slots must be distinct indices into the design vector")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"group{k}" for k in range(len(self.groups))))

    @classmethod
    def full(cls, base: CharacterDesign) -> "DesignSpace":
        dim = len(encode(base))
        return cls(base, tuple((i,) for i in range(dim)))

    @classmethod
    def leg_length(cls, base: CharacterDesign, leg_links=(3, 4, 6, 7)) -> "DesignSpace":
        """One coordinate scaling every leg bone together."""
        return cls(base, (tuple(2 + i for i in leg_links),), ("leg_length_scale",))

    @property
    def dim(self) -> int:
        return len(self.groups)

    def initial(self) -> np.ndarray:
        v = encode(self.base)
        return np.array([v[g[0]] for g in self.groups])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = design_bounds(self.base.n_links, self.base.n_joints)
        return np.array([lo[g[0]] for g in self.groups]), np.array([hi[g[0]] for g in self.groups])

    def to_design(self, z) -> tuple[CharacterDesign, list[str]]:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise DimensionError(f"design coordinates must have length {self.dim}")
        v = encode(self.base)
        for g, val in zip(self.groups, z):
            v[list(g)] = val
        return decode(v, self.base.n_links, self.base.n_joints)


# ---------------------------------------------------------------- networks

class DesignPolicy:
    """Gaussian over design coordinates conditioned on the first-frame observation.

    The mean is ``z0 + net(obs)`` so an untrained policy proposes the base design.
    """

    def __init__(self, obs_dim: int, space: DesignSpace, hidden=(128, 128), log_std: float = math.log(0.05),
                 rng: np.random.Generator | None = None):
        self.space = space
        self.z0 = space.initial()
        self.net = Mlp((obs_dim, *hidden, space.dim), rng, out_scale=0.01)
        self.log_std = np.full(space.dim, float(log_std))

    @property
    def params(self):
        return self.net.params

    def mean(self, x) -> np.ndarray:
        return self.z0 + self.net(x)

    def sample(self, x, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        mu = self.mean(x)
        return mu if deterministic else mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)


class DesignValueFn:
    """Value of (first-frame observation, design coordinates)."""

    def __init__(self, obs_dim: int, design_dim: int, hidden=(128, 128), rng: np.random.Generator | None = None):
        self.fn = ValueFunction(obs_dim + design_dim, hidden, rng)

    @property
    def params(self):
        return self.fn.params

    @property
    def net(self):
        return self.fn.net

    def __call__(self, x, z) -> np.ndarray:
        return self.fn(np.concatenate([np.atleast_2d(x), np.atleast_2d(z)], axis=-1))


# ---------------------------------------------------------------- evaluation

@dataclass
class DesignEvaluation:
    design: CharacterDesign
    report: EvalReport
    mean_reward: float
    per_clip_reward: dict[str, float]

    @property
    def success_rate(self) -> float:
        return self.report.aggregate()["S_succ"]


def evaluate_design(controller: GaussianPolicy, design: CharacterDesign, clips: list[MotionClip],
                    cfg: ImitationConfig = ImitationConfig(), base: CharacterModel | None = None) -> DesignEvaluation:
    """Deterministic full-clip rollouts with reset on failure; metrics per clip and aggregated."""
    base = base or default_character()
    model = build(design, base)
    report = EvalReport()
    rewards = {}
    for clip in clips:
        env = ImitationEnv(design, clip, cfg, model=model)
        traj = rollout(controller, design, clip, "deterministic", cfg=cfg, env=env)
        sim = np.stack([keypoints_of(model, q) for q in traj.sim_q()])
        ref = env.ref.keypoints[: sim.shape[0]]
        report.add(clip.id, float(success(traj.terminations)), mpjpe(sim, ref, True), mpjpe(sim, ref, False),
                   accel_error(sim, ref, clip.frame_rate) if sim.shape[0] >= 3 else 0.0)
        rewards[clip.id] = traj.total_reward / max(len(traj), 1)
    return DesignEvaluation(design, report, float(np.mean(list(rewards.values()))), rewards)


def _better(a: DesignEvaluation, b: DesignEvaluation | None) -> bool:
    if b is None:
        return True
    if a.mean_reward != b.mean_reward:
        return a.mean_reward > b.mean_reward
    return a.report.aggregate()["E_mpjpe_g"] < b.report.aggregate()["E_mpjpe_g"]


# ---------------------------------------------------------------- optimization

@dataclass(frozen=True)
class DesignOptConfig:
    iterations: int = 100
    episodes_per_iter: int = 8
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128)
    log_std: float = math.log(0.05)
    ppo: PpoConfig = PpoConfig(lr=3e-4, epochs=10, minibatch=64, batch=8, gamma=0.99, lam=0.95)
    eval_every: int = 10
    stochastic_control: bool = False
    imitation: ImitationConfig = ImitationConfig()


@dataclass
class DesignOptResult:
    best_design: CharacterDesign
    best_eval: DesignEvaluation
    policy: DesignPolicy
    value_fn: DesignValueFn
    history: list[dict] = field(default_factory=list)
    discarded: int = 0
    controller_hash: str = ""

    def write_history(self, path) -> None:
        if not self.history:
            return
        keys = list(self.history[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.history)


def _discounted(rewards, gamma: float) -> float:
    g = 0.0
    for r in reversed(rewards):
        g = r + gamma * g
    return g


def design_stage_targets(control_return: float, v_design: float, v_control: float, gamma: float,
                         lam: float) -> tuple[float, float]:
    """Advantage and return of the design action over the two-stage episode.

    The design step earns 0 and hands over to the control stage, whose realized
    discounted return ``control_return`` closes the episode.
    """
    # step 0: r=0, next value v_control; step 1 (control, collapsed): r=control_return, terminal
    delta1 = control_return - v_control
    delta0 = 0.0 + gamma * v_control - v_design
    adv = delta0 + gamma * lam * delta1
    return adv, adv + v_design


def optimize(controller: GaussianPolicy, clips: list[MotionClip], cfg: DesignOptConfig = DesignOptConfig(),
             space: DesignSpace | None = None, base: CharacterModel | None = None, log=None) -> DesignOptResult:
    """Search designs for ``clips`` while keeping ``controller`` fixed."""
    if not clips:
        raise ValueError("empty corpus")
    base = base or default_character()
    space = space or DesignSpace.full(CharacterDesign.identity(base))
    if controller.obs_dim != _obs_dim_for(base) or clips[0].n_dof != base.n_dof:
        raise ControllerMismatch("controller does not match the character topology")
    frozen = policy_hash(controller)
    rng = np.random.default_rng(cfg.seed)
    init_obs = {c.id: controller.prep(_first_obs(base, space.base, c))[None] for c in clips}
    obs_dim = controller.obs_dim
    policy = DesignPolicy(obs_dim, space, cfg.hidden, cfg.log_std, rng)
    value_fn = DesignValueFn(obs_dim, space.dim, cfg.hidden, rng)
    pol_opt = Adam(policy.params, cfg.ppo.lr)
    val_opt = Adam(value_fn.params, cfg.ppo.value_lr or cfg.ppo.lr)
    ctrl_rng = np.random.default_rng(cfg.seed + 1)
    result = DesignOptResult(space.base, None, policy, value_fn, controller_hash=frozen)
    best: DesignEvaluation | None = None

    def checkpoint(it):
        nonlocal best
        x = np.concatenate([init_obs[c.id] for c in clips])
        z = policy.mean(x).mean(axis=0)
        design, _ = space.to_design(z)
        ev = evaluate_design(controller, design, clips, cfg.imitation, base)
        if _better(ev, best):
            best = ev
        return ev

    checkpoint(0)
    for it in range(cfg.iterations):
        samples = []
        for _ in range(cfg.episodes_per_iter):
            clip = clips[int(rng.integers(len(clips)))]
            x = init_obs[clip.id]
            z = policy.sample(x, rng)[0]
            design, _ = space.to_design(z)
            try:
                traj = rollout(controller, design, clip, "stochastic" if cfg.stochastic_control else "deterministic",
                               rng=ctrl_rng, cfg=cfg.imitation, base=base, reset_on_failure=False)
            except IntegrationError:
                result.discarded += 1
                continue
            if "unstable" in traj.terminations:
                result.discarded += 1
                continue
            ret = _discounted([r["r_t"] for r in traj.rewards], cfg.ppo.gamma)
            samples.append({"x": x[0], "z": z, "reward": 0.0, "control_return": ret})
        row = {"iteration": it, "episodes": len(samples), "discarded": result.discarded}
        if samples:
            row.update(_update(policy, value_fn, samples, cfg.ppo, rng, pol_opt, val_opt))
            row["mean_control_return"] = float(np.mean([s["control_return"] for s in samples]))
        mean_z = policy.mean(np.concatenate([init_obs[c.id] for c in clips])).mean(axis=0)
        for name, v in zip(space.names, mean_z):
            row[f"mean_{name}"] = float(v)
        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations:
            ev = checkpoint(it + 1)
            row["eval_reward"] = ev.mean_reward
            row["eval_success"] = ev.success_rate
        row["best_reward"] = best.mean_reward
        result.history.append(row)
        if log:
            log(row)
    if policy_hash(controller) != frozen:
        raise RuntimeError("controller parameters changed during design optimization")
    result.best_design, result.best_eval = best.design, best
    return result


def _obs_dim_for(model: CharacterModel) -> int:
    from morphsim.imitation import obs_dim
    return obs_dim(model)


def _first_obs(base: CharacterModel, design: CharacterDesign, clip: MotionClip) -> np.ndarray:
    env = ImitationEnv(design, clip, base=base)
    env.reset(start=0)
    return env.observe()


def _update(policy: DesignPolicy, value_fn: DesignValueFn, samples, ppo: PpoConfig, rng, pol_opt, val_opt) -> dict:
    x = np.stack([s["x"] for s in samples])
    z = np.stack([s["z"] for s in samples])
    ret_c = np.array([s["control_return"] for s in samples])
    z_base = np.broadcast_to(policy.z0, z.shape)
    # design state: base design still in place; control state: the proposed design
    v_design, v_control = value_fn(x, z_base), value_fn(x, z)
    adv, ret0 = design_stage_targets(ret_c, v_design, v_control, ppo.gamma, ppo.lam)
    vx = np.concatenate([x, x])
    vz = np.concatenate([z_base, z])
    vt = np.concatenate([ret0, ret_c])
    adv = normalize_advantages(adv) if ppo.normalize_advantages else adv
    logp_old = gaussian_log_prob(z, policy.mean(x), policy.log_std)
    inv_var = np.exp(-2 * policy.log_std)
    n = len(samples)
    mb = min(ppo.minibatch, n)
    stats = {"policy_loss": 0.0, "value_loss": 0.0}
    k = 0
    for _ in range(ppo.epochs):
        order = rng.permutation(n)
        for s in range(0, n, mb):
            idx = order[s:s + mb]
            m = idx.size
            mu = policy.mean(x[idx])
            logp = gaussian_log_prob(z[idx], mu, policy.log_std)
            ratio = np.exp(logp - logp_old[idx])
            a = adv[idx]
            surr = np.minimum(ratio * a, np.clip(ratio, 1 - ppo.clip, 1 + ppo.clip) * a)
            gmu = (-surrogate_grad(ratio, a, ppo.clip) * ratio / m)[:, None] * (z[idx] - mu) * inv_var
            g, _ = policy.net.backward(gmu)
            clip_grad_norm(g, ppo.max_grad_norm)
            pol_opt.step(g)
            vidx = np.concatenate([idx, idx + n])
            v = value_fn(vx[vidx], vz[vidx])
            vg, _ = value_fn.net.backward((2.0 * (v - vt[vidx]) / vidx.size)[:, None])
            clip_grad_norm(vg, ppo.max_grad_norm)
            val_opt.step(vg)
            stats["policy_loss"] += -float(surr.mean())
            stats["value_loss"] += float(np.mean((v - vt[vidx]) ** 2))
            k += 1
    return {key: val / max(k, 1) for key, val in stats.items()}
