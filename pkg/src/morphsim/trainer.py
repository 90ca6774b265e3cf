"""Controller training loop: curriculum-driven PPO over a clip corpus."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from morphsim.character import CharacterDesign
from morphsim.imitation import ImitationConfig, ImitationEnv, action_dim, obs_dim
from morphsim.learn import GaussianPolicy, PpoConfig, PpoLearner, ValueFunction, gae, gaussian_log_prob
from morphsim.motion import CurriculumState, MotionClip, record_outcome, sample_clip
from morphsim.physics import CharacterModel, default_character


@dataclass(frozen=True)
class DesignRandomization:
    """Distribution of training characters; the base design is kept with ``p_base``."""

    p_base: float = 0.5
    leg_length: tuple[float, float] = (0.8, 1.5)
    global_scale: tuple[float, float] = (0.9, 1.1)
    mass_scale: tuple[float, float] = (0.8, 1.25)
    gear: tuple[float, float] = (0.8, 1.25)
    leg_links: tuple[int, ...] = (3, 4, 6, 7)

    def sample(self, base: CharacterDesign, rng: np.random.Generator) -> CharacterDesign:
        if rng.random() < self.p_base:
            return base
        bone = list(base.bone_length_scales)
        s = rng.uniform(*self.leg_length)
        for i in self.leg_links:
            bone[i] = s
        g = rng.uniform(*self.gear)
        return replace(base, global_scale=rng.uniform(*self.global_scale), mass_scale=rng.uniform(*self.mass_scale),
                       bone_length_scales=tuple(bone), motor_gears=tuple(x * g for x in base.motor_gears))


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 100
    n_envs: int = 16
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256)
    value_hidden: tuple[int, ...] = (128, 128)
    log_std: float = math.log(0.1)
    ppo: PpoConfig = PpoConfig()
    imitation: ImitationConfig = ImitationConfig()
    temperature: float = 0.2
    warmup_steps: int = 2048
    randomization: DesignRandomization | None = DesignRandomization()


@dataclass
class TrainResult:
    policy: GaussianPolicy
    value_fn: ValueFunction
    curriculum: CurriculumState
    history: list[dict] = field(default_factory=list)

    def write_history(self, path) -> None:
        if not self.history:
            return
        keys = list(self.history[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for row in self.history:
                w.writerow(row)


def init_controller(model: CharacterModel, cfg: TrainConfig) -> tuple[GaussianPolicy, ValueFunction]:
    rng = np.random.default_rng(cfg.seed)
    policy = GaussianPolicy(obs_dim(model), action_dim(model), cfg.hidden, cfg.log_std, rng)
    value_fn = ValueFunction(obs_dim(model), cfg.value_hidden, rng)
    return policy, value_fn


class _Slot:
    """One environment lane of the vectorized collector."""

    def __init__(self):
        self.env: ImitationEnv | None = None
        self.obs = None
        self.clip_id = ""
        self.seq: dict[str, list] = {}
        self.ep_reward = 0.0
        self.ep_len = 0

    def start_seq(self):
        self.seq = {k: [] for k in ("obs", "actions", "logp", "rewards", "terminal", "end", "next_obs")}


def collect(policy: GaussianPolicy, slots: list[_Slot], n_steps: int, clips: dict[str, MotionClip],
            curriculum: CurriculumState, base_design: CharacterDesign, base: CharacterModel,
            cfg: TrainConfig, rng: np.random.Generator, stats: dict):
    def new_episode(slot: _Slot):
        cid = sample_clip(curriculum, rng)
        design = cfg.randomization.sample(base_design, rng) if cfg.randomization else base_design
        slot.env = ImitationEnv(design, clips[cid], cfg.imitation, base)
        slot.clip_id = cid
        slot.obs = slot.env.reset(rng)
        slot.ep_reward, slot.ep_len = 0.0, 0

    for s in slots:
        s.start_seq()
        if s.env is None:
            new_episode(s)
    steps = 0
    while steps < n_steps:
        obs = np.stack([s.obs for s in slots])
        mu = policy.mean(obs)
        acts = mu + np.exp(policy.log_std) * rng.standard_normal(mu.shape)
        logp = gaussian_log_prob(acts, mu, policy.log_std)
        for k, s in enumerate(slots):
            out = s.env.step(acts[k])
            r = out["reward"]["r_t"]
            s.ep_reward += r
            s.ep_len += 1
            term, trunc = out["terminated"], out["truncated"]
            nxt = s.env.observe()
            s.seq["obs"].append(s.obs)
            s.seq["actions"].append(acts[k])
            s.seq["logp"].append(logp[k])
            s.seq["rewards"].append(r)
            s.seq["terminal"].append(term)
            s.seq["end"].append(term or trunc)
            s.seq["next_obs"].append(nxt)
            steps += 1
            if term or trunc:
                record_outcome(curriculum, s.clip_id, not term)
                stats["episodes"] += 1
                stats["successes"] += int(not term)
                stats["ep_reward"] += s.ep_reward
                stats["ep_len"] += s.ep_len
                new_episode(s)
            else:
                s.obs = nxt
    return [s.seq for s in slots]


def _batch_from(seqs, policy: GaussianPolicy, value_fn: ValueFunction, ppo: PpoConfig):
    parts = {k: [] for k in ("obs", "actions", "logp", "advantages", "returns")}
    for seq in seqs:
        if not seq["obs"]:
            continue
        obs = np.stack(seq["obs"])
        v = value_fn(policy.prep(obs))
        nv = value_fn(policy.prep(np.stack(seq["next_obs"])))
        ends = np.array(seq["end"])
        ends[-1] = True
        adv, ret = gae(np.array(seq["rewards"]), v, np.array(seq["terminal"]), ppo.gamma, ppo.lam,
                       next_values=nv, ends=ends)
        parts["obs"].append(obs)
        parts["actions"].append(np.stack(seq["actions"]))
        parts["logp"].append(np.array(seq["logp"]))
        parts["advantages"].append(adv)
        parts["returns"].append(ret)
    return {k: np.concatenate(v) for k, v in parts.items()}


def train_controller(clips: list[MotionClip], cfg: TrainConfig = TrainConfig(),
                     base: CharacterModel | None = None, base_design: CharacterDesign | None = None,
                     policy: GaussianPolicy | None = None, value_fn: ValueFunction | None = None,
                     log=None, callback=None) -> TrainResult:
    """PPO with reference-state initialization, early termination and curriculum sampling."""
    if not clips:
        raise ValueError("empty corpus")
    base = base or default_character()
    base_design = base_design or CharacterDesign.identity(base)
    if policy is None or value_fn is None:
        policy, value_fn = init_controller(base, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    by_id = {c.id: c for c in clips}
    curriculum = CurriculumState([c.id for c in clips], temperature=cfg.temperature)
    learner = PpoLearner(policy, value_fn, cfg.ppo)
    slots = [_Slot() for _ in range(cfg.n_envs)]
    result = TrainResult(policy, value_fn, curriculum)
    if policy.norm is not None and policy.norm.count == 0 and cfg.iterations > 0:
        # seed the observation statistics from the initial policy before any update
        warm = {"episodes": 0, "successes": 0, "ep_reward": 0.0, "ep_len": 0}
        seqs = collect(policy, slots, cfg.warmup_steps, by_id, curriculum, base_design, base, cfg, rng, warm)
        policy.norm.update(np.concatenate([np.stack(s["obs"]) for s in seqs if s["obs"]]))
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        stats = {"episodes": 0, "successes": 0, "ep_reward": 0.0, "ep_len": 0}
        seqs = collect(policy, slots, cfg.ppo.batch, by_id, curriculum, base_design, base, cfg, rng, stats)
        batch = _batch_from(seqs, policy, value_fn, cfg.ppo)
        t1 = time.perf_counter()
        upd = learner.update(batch, rng)
        policy.norm.update(batch["obs"])
        n_ep = max(stats["episodes"], 1)
        row = {"iteration": it, "mean_reward": float(np.mean([r for s in seqs for r in s["rewards"]])),
               "episodes": stats["episodes"], "success_rate": stats["successes"] / n_ep,
               "mean_episode_length": stats["ep_len"] / n_ep, "policy_loss": upd["policy_loss"],
               "value_loss": upd["value_loss"], "clip_fraction": upd["clip_fraction"], "kl": upd["kl"],
               "collect_s": t1 - t0, "update_s": time.perf_counter() - t1}
        result.history.append(row)
        if log:
            log(row)
        if callback:
            callback(it, result)
    return result
