import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphsim.learn import (Adam, GaussianPolicy, Mlp, PpoConfig, RunningNorm, ValueFunction, clip_grad_norm, gae,
                            gaussian_log_prob, load_checkpoint, normalize_advantages, policy_hash, ppo_update,
                            save_checkpoint, surrogate_grad)
from morphsim.physics import DimensionError

# every network shape the package builds: controller mean, controller critic,
# design policy and design critic (full 36-wide space and the one-slot leg space)
REPO_SHAPES = [(107, 256, 256, 36), (107, 128, 128, 1), (107, 128, 128, 36), (143, 128, 128, 1),
               (108, 128, 128, 1)]


def max_relative_error(analytic, numeric):
    a, n = np.abs(analytic), np.abs(numeric)
    denom = np.maximum(a, n)
    mask = denom > 0
    return float(np.max(np.abs(analytic - numeric)[mask] / denom[mask])) if mask.any() else 0.0


def fd_check(net: Mlp, x, g, rng, per_array=None, h=1e-5):
    """Max relative error between backward() and central differences of sum(g * net(x))."""
    net.forward(x)
    grads, gx = net.backward(g)
    worst = 0.0
    for p, dp in zip(net.params, grads):
        flat, dflat = p.reshape(-1), dp.reshape(-1)
        idx = np.arange(flat.size) if per_array is None or flat.size <= per_array else \
            rng.choice(flat.size, per_array, replace=False)
        num = np.empty(idx.size)
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = float(np.sum(g * net.forward(x)))
            flat[i] = old - h
            down = float(np.sum(g * net.forward(x)))
            flat[i] = old
            num[k] = (up - down) / (2 * h)
        worst = max(worst, max_relative_error(dflat[idx], num))
    num_x = np.empty(x.size)
    xf = x.reshape(-1)
    for i in range(xf.size):
        old = xf[i]
        xf[i] = old + h
        up = float(np.sum(g * net.forward(x)))
        xf[i] = old - h
        down = float(np.sum(g * net.forward(x)))
        xf[i] = old
        num_x[i] = (up - down) / (2 * h)
    return max(worst, max_relative_error(gx.reshape(-1), num_x))


# ---------------------------------------------------------------- networks

def test_parameter_count():
    net = Mlp((5, 7, 3))
    assert net.n_params == 5 * 7 + 7 + 7 * 3 + 3


def test_zero_weight_network_outputs_bias():
    net = Mlp((4, 6, 2))
    for p in net.params:
        p[...] = 0.0
    net.params[-1][...] = [0.3, -1.2]
    assert np.array_equal(net(np.ones((3, 4))), np.tile([0.3, -1.2], (3, 1)))


def test_linear_layer_gradient():
    rng = np.random.default_rng(0)
    net = Mlp((4, 3), rng)
    x = rng.normal(size=4)
    y = net(x)
    grads, _ = net.backward(y)  # d(0.5 |y|^2)/dy = y
    assert np.allclose(grads[0], np.outer(x, y), rtol=0, atol=1e-14)
    assert np.allclose(grads[1], y, rtol=0, atol=1e-14)


@pytest.mark.parametrize("sizes", [(3, 1), (4, 5, 2), (6, 8, 8, 3), (2, 16, 1)])
def test_gradients_match_finite_differences_small(sizes):
    rng = np.random.default_rng(sum(sizes))
    net = Mlp(sizes, rng)
    for p in net.params[1::2]:
        p[...] = rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(5, sizes[0]))
    g = rng.normal(size=(5, sizes[-1]))
    assert fd_check(net, x, g, rng) < 1e-4


@pytest.mark.parametrize("sizes", REPO_SHAPES)
def test_gradients_match_finite_differences_repo_shapes(sizes):
    rng = np.random.default_rng(len(sizes) + sizes[-1])
    net = Mlp(sizes, rng)
    for p in net.params[1::2]:
        p[...] = rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(2, sizes[0]))
    g = rng.normal(size=(2, sizes[-1]))
    assert fd_check(net, x, g, rng, per_array=200) < 1e-4


def test_network_shape_errors():
    net = Mlp((3, 2))
    with pytest.raises(DimensionError):
        net(np.zeros(4))
    with pytest.raises(RuntimeError):
        Mlp((3, 2)).backward(np.zeros(2))
    net(np.zeros(3))
    with pytest.raises(DimensionError):
        net.backward(np.zeros(3))
    with pytest.raises(DimensionError):
        net.set_flat(np.zeros(3))


def test_flat_parameter_round_trip():
    net = Mlp((3, 4, 2), np.random.default_rng(1))
    flat = net.get_flat()
    net.set_flat(flat * 2)
    assert np.array_equal(net.get_flat(), flat * 2)


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.1)
    opt.step([np.array([3.0, -0.5])])
    assert np.allclose(p[0], [0.9, -1.9], atol=1e-7)


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_grad_norm(g, 1.0) == 5.0
    assert math.hypot(g[0][0], g[1][0]) == pytest.approx(1.0)


def test_running_norm_matches_batch_statistics():
    rng = np.random.default_rng(2)
    data = [rng.normal(3.0, 2.0, size=(n, 4)) for n in (10, 1, 37)]
    rn = RunningNorm(4)
    for d in data:
        rn.update(d)
    allx = np.concatenate(data)
    assert np.allclose(rn.mean, allx.mean(0)) and np.allclose(rn.var, allx.var(0))


# ---------------------------------------------------------------- gaussian policy

def test_gaussian_density_integrates_to_one():
    x = np.linspace(-2, 2, 40001)[:, None]
    dens = np.exp(gaussian_log_prob(x, np.array([0.3]), np.array([math.log(0.1)])))
    assert abs(np.trapezoid(dens, x[:, 0]) - 1.0) < 1e-3


def test_policy_std_positive_and_log_prob_finite():
    rng = np.random.default_rng(0)
    pol = GaussianPolicy(5, 3, (8,), rng=rng)
    assert np.all(np.exp(pol.log_std) > 0)
    obs = rng.normal(size=(4, 5))
    acts = pol.act(obs, rng)
    assert np.all(np.isfinite(pol.log_prob(obs, acts)))
    assert np.array_equal(pol.act(obs, deterministic=True), pol.mean(obs))


# ---------------------------------------------------------------- GAE

def test_gae_lambda_zero_is_one_step_td():
    r = np.array([1.0, 0.5, -0.2, 2.0])
    v = np.array([0.3, 0.1, 0.7, -0.4])
    d = np.array([False, True, False, False])
    adv, ret = gae(r, v, d, gamma=0.9, lam=0.0, last_value=1.5)
    nv = np.array([0.1, 0.7, -0.4, 1.5])
    assert np.allclose(adv, r + 0.9 * nv * (1 - d) - v, rtol=0, atol=1e-15)
    assert np.allclose(ret, adv + v)


def test_gae_zero_rewards_and_values():
    adv, _ = gae(np.zeros(6), np.zeros(6), np.zeros(6, bool))
    assert np.all(adv == 0.0)


def test_gae_reward_to_go_example():
    adv, _ = gae([1.0, 2.0, 3.0, 4.0, 5.0], np.zeros(5), np.zeros(5, bool), gamma=1.0, lam=1.0)
    assert np.allclose(adv, [15.0, 14.0, 12.0, 9.0, 5.0], rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_gae_unit_discount_is_reward_to_go(rewards):
    r = np.array(rewards)
    adv, _ = gae(r, np.zeros_like(r), np.zeros(r.size, bool), gamma=1.0, lam=1.0)
    assert np.allclose(adv, np.cumsum(r[::-1])[::-1], rtol=0, atol=1e-9)


def test_gae_time_limit_bootstraps_without_crossing():
    r = np.ones(4)
    v = np.zeros(4)
    d = np.zeros(4, bool)
    ends = np.array([False, True, False, True])
    nv = np.array([0.0, 10.0, 0.0, 20.0])
    adv, _ = gae(r, v, d, gamma=1.0, lam=1.0, next_values=nv, ends=ends)
    assert np.allclose(adv, [12.0, 11.0, 22.0, 21.0])


def test_gae_length_mismatch():
    with pytest.raises(DimensionError):
        gae([1.0, 2.0], [0.0], [False, False])


def test_normalized_advantages():
    a = normalize_advantages(np.array([1.0, 2.0, 3.0, 10.0]))
    assert abs(a.mean()) < 1e-12 and a.std() == pytest.approx(1.0, abs=1e-6)
    assert normalize_advantages(np.array([2.5]))[0] == 2.5


# ---------------------------------------------------------------- PPO

def test_ppo_config_validation():
    for bad in ({"clip": 0.0}, {"clip": 1.0}, {"gamma": 0.0}, {"gamma": 1.5}, {"lam": -0.1}, {"epochs": 0}):
        with pytest.raises(ValueError):
            PpoConfig(**bad)


def test_surrogate_gradient_is_zero_in_clamp_region():
    assert surrogate_grad(np.array([1.4]), np.array([2.0]), 0.2)[0] == 0.0
    assert surrogate_grad(np.array([0.6]), np.array([-2.0]), 0.2)[0] == 0.0
    assert surrogate_grad(np.array([1.0]), np.array([2.0]), 0.2)[0] == 2.0
    # the pessimistic side stays active
    assert surrogate_grad(np.array([0.6]), np.array([2.0]), 0.2)[0] == 2.0


def _batch(pol, rng, n, adv):
    obs = rng.normal(size=(n, pol.obs_dim))
    acts = pol.act(obs, rng)
    return {"obs": obs, "actions": acts, "logp": pol.log_prob(obs, acts), "advantages": adv,
            "returns": rng.normal(size=n)}


def test_zero_advantages_leave_policy_unchanged():
    rng = np.random.default_rng(0)
    pol, vf = GaussianPolicy(6, 2, (8,), rng=rng, normalize=False), ValueFunction(6, (8,), rng)
    before = pol.mean_net.get_flat()
    stats = ppo_update(pol, vf, _batch(pol, rng, 32, np.zeros(32)), PpoConfig(minibatch=8, epochs=3), rng)
    assert np.array_equal(pol.mean_net.get_flat(), before)
    assert stats["clip_fraction"] == 0.0 and not stats["aborted"]


def test_positive_advantage_raises_log_prob():
    rng = np.random.default_rng(1)
    pol, vf = GaussianPolicy(6, 2, (8,), rng=rng, normalize=False), ValueFunction(6, (8,), rng)
    b = _batch(pol, rng, 1, np.array([1.0]))
    before = pol.log_prob(b["obs"], b["actions"])[0]
    ppo_update(pol, vf, b, PpoConfig(epochs=1, lr=1e-3), rng)
    assert pol.log_prob(b["obs"], b["actions"])[0] > before


def test_non_finite_loss_aborts_and_restores():
    rng = np.random.default_rng(2)
    pol, vf = GaussianPolicy(6, 2, (8,), rng=rng, normalize=False), ValueFunction(6, (8,), rng)
    b = _batch(pol, rng, 8, np.ones(8))
    b["returns"] = np.full(8, np.inf)
    before = (pol.mean_net.get_flat(), vf.net.get_flat())
    stats = ppo_update(pol, vf, b, PpoConfig(epochs=2, minibatch=4), rng)
    assert stats["aborted"]
    assert np.array_equal(pol.mean_net.get_flat(), before[0]) and np.array_equal(vf.net.get_flat(), before[1])
    with pytest.raises(ValueError):
        ppo_update(pol, vf, {"obs": np.zeros((0, 6))}, PpoConfig(), rng)


def test_ppo_solves_a_contextual_bandit():
    rng = np.random.default_rng(3)
    pol = GaussianPolicy(2, 1, (16,), log_std=math.log(0.3), rng=rng, normalize=False)
    vf = ValueFunction(2, (16,), rng)
    cfg = PpoConfig(epochs=5, minibatch=64, lr=3e-3)
    for _ in range(40):
        obs = rng.normal(size=(256, 2))
        acts = pol.act(obs, rng)
        rew = -(acts[:, 0] - obs[:, 0]) ** 2
        adv = rew - vf(obs)
        ppo_update(pol, vf, {"obs": obs, "actions": acts, "logp": pol.log_prob(obs, acts),
                             "advantages": adv, "returns": rew}, cfg, rng)
    test = rng.normal(size=(200, 2))
    assert np.mean((pol.mean(test)[:, 0] - test[:, 0]) ** 2) < 0.05


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(4)
    pol, vf = GaussianPolicy(7, 3, (5, 4), rng=rng), ValueFunction(7, (6,), rng)
    pol.norm.update(rng.normal(size=(20, 7)))
    save_checkpoint(tmp_path / "a.bin", pol, vf, {"seed": 4})
    pol2, vf2, meta = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(tmp_path / "b.bin", pol2, vf2, meta)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert policy_hash(pol2) == policy_hash(pol) and meta == {"seed": 4}
    obs = rng.normal(size=(3, 7))
    assert np.array_equal(pol2.mean(obs), pol.mean(obs))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.bin")
    pol = GaussianPolicy(3, 2, (4,))
    save_checkpoint(tmp_path / "y.bin", pol)
    (tmp_path / "z.bin").write_bytes((tmp_path / "y.bin").read_bytes() + b"\0" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "z.bin")


def test_policy_hash_tracks_every_parameter():
    pol = GaussianPolicy(3, 2, (4,))
    h = policy_hash(pol)
    pol.norm.mean[0] += 1e-12
    assert policy_hash(pol) != h
