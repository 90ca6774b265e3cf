"""Dense networks with analytic gradients, Gaussian policies, GAE and PPO."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from morphsim.physics import DimensionError

CHECKPOINT_MAGIC = b"MSCK"
CHECKPOINT_SCHEMA = "morphsim.checkpoint/1"


class Mlp:
    """Fully connected network: tanh hidden layers, linear output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, out_scale: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError("need at least an input and an output size")
        rng = rng or np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            w = rng.standard_normal((a, b)) / math.sqrt(a) * (out_scale if last else 1.0)
            self.params += [w, np.zeros(b)]
        self._cache = None

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise DimensionError(f"input has width {x.shape[-1]}, network expects {self.sizes[0]}")
        acts = [x]
        n = len(self.params) // 2
        for i in range(n):
            x = x @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n - 1:
                x = np.tanh(x)
            acts.append(x)
        self._cache = acts
        return x

    __call__ = forward

    def backward(self, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` for the last forward pass.

        Returns (parameter gradients in ``params`` order, gradient wrt the input).
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts = self._cache
        g = np.asarray(grad_out, dtype=float)
        if g.shape != acts[-1].shape:
            raise DimensionError("upstream gradient shape differs from the output")
        n = len(self.params) // 2
        grads: list[np.ndarray] = [None] * len(self.params)
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            a = acts[i]
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * i] = a2.T @ g2
            grads[2 * i + 1] = g2.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise DimensionError("flat parameter vector has the wrong length")
        k = 0
        for p in self.params:
            p[...] = flat[k:k + p.size].reshape(p.shape)
            k += p.size


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


class RunningNorm:
    """Running mean/variance used to whiten observations; frozen between updates."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.clip = clip

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float).reshape(-1, self.mean.size)
        n = x.shape[0]
        if n == 0:
            return
        bm, bv = x.mean(axis=0), x.var(axis=0)
        tot = self.count + n
        delta = bm - self.mean
        self.mean = self.mean + delta * n / tot
        self.var = (self.var * self.count + bv * n + delta ** 2 * self.count * n / tot) / tot
        self.count = tot

    def __call__(self, x) -> np.ndarray:
        return np.clip((np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)


class GaussianPolicy:
    """Diagonal Gaussian with a network mean and a fixed log standard deviation."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(256, 256), log_std: float = math.log(0.1),
                 rng: np.random.Generator | None = None, out_scale: float = 0.01, normalize: bool = True):
        self.mean_net = Mlp((obs_dim, *hidden, act_dim), rng, out_scale)
        self.log_std = np.full(act_dim, float(log_std))
        self.norm = RunningNorm(obs_dim) if normalize else None

    @property
    def obs_dim(self) -> int:
        return self.mean_net.sizes[0]

    @property
    def act_dim(self) -> int:
        return self.mean_net.sizes[-1]

    @property
    def params(self) -> list[np.ndarray]:
        return self.mean_net.params

    def prep(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if obs.shape[-1] != self.obs_dim:
            raise DimensionError(f"observation width {obs.shape[-1]} != policy input {self.obs_dim}")
        return self.norm(obs) if self.norm is not None else obs

    def mean(self, obs) -> np.ndarray:
        return self.mean_net(self.prep(obs))

    def log_prob(self, obs, actions) -> np.ndarray:
        return gaussian_log_prob(actions, self.mean(obs), self.log_std)

    def act(self, obs, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
        mu = self.mean(obs)
        if deterministic:
            return mu
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 * math.log(2 * math.pi * math.e)))


def gaussian_log_prob(x, mean, log_std) -> np.ndarray:
    z = (np.asarray(x) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * len(log_std) * math.log(2 * math.pi)


class ValueFunction:
    """Scalar critic over (already normalized) inputs."""

    def __init__(self, in_dim: int, hidden=(128, 128), rng: np.random.Generator | None = None):
        self.net = Mlp((in_dim, *hidden, 1), rng, out_scale=1.0)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def __call__(self, x) -> np.ndarray:
        return self.net(x)[..., 0]


# ---------------------------------------------------------------- advantages

def gae(rewards, values, dones, gamma: float = 0.99, lam: float = 0.95, last_value: float = 0.0,
        next_values=None, ends=None) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation.

    ``dones[t]`` marks a terminal transition (no bootstrap). By default the value
    of step ``t + 1`` comes from ``values`` (``last_value`` after the tail); pass
    ``next_values`` and ``ends`` when trajectories are cut for other reasons,
    e.g. time limits, where ``ends[t]`` stops the recursion but still bootstraps.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=bool)
    if not (r.shape == v.shape == d.shape) or r.ndim != 1:
        raise DimensionError("rewards, values and dones must be equal-length vectors")
    nv = np.append(v[1:], last_value) if next_values is None else np.asarray(next_values, dtype=float)
    stop = d if ends is None else (np.asarray(ends, dtype=bool) | d)
    if nv.shape != r.shape or stop.shape != r.shape:
        raise DimensionError("next_values/ends length mismatch")
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(r.size - 1, -1, -1):
        delta = r[t] + gamma * nv[t] * (0.0 if d[t] else 1.0) - v[t]
        running = delta + gamma * lam * (0.0 if stop[t] else 1.0) * running
        adv[t] = running
    return adv, adv + v


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    if adv.size < 2:
        # no spread to normalize by; keep the sign of a lone sample
        return adv
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


# ---------------------------------------------------------------- PPO

@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 3e-4
    value_lr: float | None = None
    epochs: int = 10
    minibatch: int = 512
    batch: int = 16384
    max_grad_norm: float = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.epochs < 1 or self.minibatch < 1 or self.batch < 1:
            raise ValueError("epochs, minibatch and batch must be positive")


def surrogate_grad(ratio, adv, clip: float) -> np.ndarray:
    """d/d ratio of ``min(ratio * A, clip(ratio) * A)``; zero where the clamp is active."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    clipped = np.clip(ratio, 1 - clip, 1 + clip)
    return np.where(ratio * adv <= clipped * adv, adv, 0.0)


class PpoLearner:
    """Owns the optimizers for a policy/critic pair."""

    def __init__(self, policy: GaussianPolicy, value_fn: ValueFunction, cfg: PpoConfig = PpoConfig()):
        self.policy, self.value_fn, self.cfg = policy, value_fn, cfg
        self.pol_opt = Adam(policy.params, cfg.lr)
        self.val_opt = Adam(value_fn.params, cfg.value_lr or cfg.lr)

    def update(self, batch: dict, rng: np.random.Generator) -> dict:
        return ppo_update(self.policy, self.value_fn, batch, self.cfg, rng, self.pol_opt, self.val_opt)


def ppo_update(policy: GaussianPolicy, value_fn: ValueFunction, batch: dict, cfg: PpoConfig,
               rng: np.random.Generator, pol_opt: Adam | None = None, val_opt: Adam | None = None) -> dict:
    """Clipped-surrogate PPO over shuffled minibatches.

    ``batch`` holds ``obs`` (policy input), ``value_in`` (critic input, defaults to
    the normalized obs), ``actions``, ``logp``, ``advantages`` and ``returns``.
    On a non-finite loss the parameters are restored and ``aborted`` is set.
    """
    obs = np.asarray(batch["obs"], dtype=float)
    n = obs.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    pol_opt = pol_opt or Adam(policy.params, cfg.lr)
    val_opt = val_opt or Adam(value_fn.params, cfg.value_lr or cfg.lr)
    x = policy.prep(obs)
    vin = np.asarray(batch["value_in"], dtype=float) if "value_in" in batch else x
    acts = np.asarray(batch["actions"], dtype=float)
    logp_old = np.asarray(batch["logp"], dtype=float)
    adv = np.asarray(batch["advantages"], dtype=float)
    if cfg.normalize_advantages:
        adv = normalize_advantages(adv)
    ret = np.asarray(batch["returns"], dtype=float)
    backup = ([p.copy() for p in policy.params], [p.copy() for p in value_fn.params])
    inv_var = np.exp(-2 * policy.log_std)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0, "kl": 0.0, "grad_norm": 0.0,
             "entropy": policy.entropy(), "aborted": False, "minibatches": 0}
    mb = min(cfg.minibatch, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, mb):
            idx = order[s:s + mb]
            m = idx.size
            mu = policy.mean_net(x[idx])
            logp = gaussian_log_prob(acts[idx], mu, policy.log_std)
            ratio = np.exp(logp - logp_old[idx])
            a = adv[idx]
            surr = np.minimum(ratio * a, np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * a)
            pl = -float(surr.mean()) - cfg.entropy_coef * policy.entropy()
            v = value_fn(vin[idx])
            vl = float(np.mean((v - ret[idx]) ** 2))
            if not (math.isfinite(pl) and math.isfinite(vl)):
                for p, b in zip(policy.params, backup[0]):
                    p[...] = b
                for p, b in zip(value_fn.params, backup[1]):
                    p[...] = b
                stats["aborted"] = True
                return stats
            # d(-mean surr)/d logp = -surrogate_grad * ratio / m; d logp / d mu = (a - mu) / sigma^2
            dlogp = -surrogate_grad(ratio, a, cfg.clip) * ratio / m
            gmu = dlogp[:, None] * (acts[idx] - mu) * inv_var
            pg, _ = policy.mean_net.backward(gmu)
            gn = clip_grad_norm(pg, cfg.max_grad_norm)
            pol_opt.step(pg)
            vg, _ = value_fn.net.backward((2.0 * (v - ret[idx]) / m)[:, None])
            clip_grad_norm(vg, cfg.max_grad_norm)
            val_opt.step(vg)
            stats["policy_loss"] += pl
            stats["value_loss"] += vl
            stats["clip_fraction"] += float(np.mean(np.abs(ratio - 1) > cfg.clip))
            stats["kl"] += float(np.mean(logp_old[idx] - logp))
            stats["grad_norm"] += gn
            stats["minibatches"] += 1
    k = max(stats["minibatches"], 1)
    for key in ("policy_loss", "value_loss", "clip_fraction", "kl", "grad_norm"):
        stats[key] /= k
    return stats


# ---------------------------------------------------------------- checkpoints

def param_hash(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(struct.pack("<q", a.size))
        h.update(a.tobytes())
    return h.hexdigest()


def policy_arrays(policy: GaussianPolicy) -> list[np.ndarray]:
    arrs = list(policy.params) + [policy.log_std]
    if policy.norm is not None:
        arrs += [np.array([policy.norm.count]), policy.norm.mean, policy.norm.var]
    return arrs


def policy_hash(policy: GaussianPolicy) -> str:
    """Digest of every quantity that influences the policy's actions."""
    return param_hash(policy_arrays(policy))


def save_checkpoint(path, policy: GaussianPolicy, value_fn: ValueFunction | None = None,
                    meta: dict | None = None) -> None:
    """Binary checkpoint: magic, JSON header length, JSON header, raw float64 arrays."""
    arrays = {"policy": policy_arrays(policy), "value": list(value_fn.params) if value_fn else []}
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "policy_sizes": list(policy.mean_net.sizes),
        "normalize": policy.norm is not None,
        "value_sizes": list(value_fn.net.sizes) if value_fn else None,
        "shapes": {k: [list(a.shape) for a in v] for k, v in arrays.items()},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<Q", len(blob)) + blob)
        for k in ("policy", "value"):
            for a in arrays[k]:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[GaussianPolicy, ValueFunction | None, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + n])
    if header.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {header.get('schema')!r}")
    off = 12 + n

    def take(shape):
        nonlocal off
        size = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
        return a

    sizes = header["policy_sizes"]
    policy = GaussianPolicy(sizes[0], sizes[-1], tuple(sizes[1:-1]), normalize=header["normalize"])
    pol = [take(s) for s in header["shapes"]["policy"]]
    nparam = len(policy.mean_net.params)
    for p, a in zip(policy.mean_net.params, pol[:nparam]):
        p[...] = a
    policy.log_std = pol[nparam]
    if policy.norm is not None:
        policy.norm.count = float(pol[nparam + 1][0])
        policy.norm.mean = pol[nparam + 2]
        policy.norm.var = pol[nparam + 3]
    value_fn = None
    if header["value_sizes"]:
        vs = header["value_sizes"]
        value_fn = ValueFunction(vs[0], tuple(vs[1:-1]))
        for p, s in zip(value_fn.net.params, header["shapes"]["value"]):
            p[...] = take(s)
    if off != len(data):
        raise ValueError("checkpoint has trailing or missing bytes")
    return policy, value_fn, header["meta"]
