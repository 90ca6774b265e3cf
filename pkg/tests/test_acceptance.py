"""Acceptance criteria, one test each. Every test records a PASS/FAIL line that is
repeated in the pytest summary under "acceptance criteria".

Criteria 4-8 share one seed-pinned trained controller. It is cached under
``$MORPHSIM_CACHE`` (default ``<repo>/.cache``) keyed by a digest of the training
config and corpus. Without a cache entry the controller is trained first, which takes
about 40 minutes on one core.
"""
import hashlib
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from morphsim.character import CharacterDesign, build
from morphsim.design_opt import DesignOptConfig, DesignSpace, _better, evaluate_design, optimize
from morphsim.imitation import reward_terms, rollout, wrap_angle
from morphsim.learn import Mlp, PpoConfig, gae, load_checkpoint, policy_hash, save_checkpoint
from morphsim.motion import CurriculumState, MotionClip, ewma, generate_clip, record_outcome
from morphsim.physics import (ResidualForce, SimConfig, default_character, linear_momentum, make_state, pd_torque,
                              step, total_energy)
from morphsim.trainer import TrainConfig, init_controller, train_controller
from conftest import free_link, pendulum, standing_q
from test_learn import REPO_SHAPES, fd_check

pytestmark = pytest.mark.slow

M = default_character()
IDENT = CharacterDesign.identity(M)
LEGS = DesignSpace.leg_length(IDENT)
GRID = np.round(np.arange(0.8, 1.5 + 1e-9, 0.05), 2)

CORPUS_KINDS = ("walk", "hop", "crawl")
TRAIN = TrainConfig(iterations=700, n_envs=16, seed=0,
                    ppo=PpoConfig(lr=5e-5, value_lr=1e-3, epochs=5, minibatch=512, batch=4096))
DESIGN_OPT = DesignOptConfig(iterations=60, episodes_per_iter=8, eval_every=5, seed=0)
GROUND_TRUTH_LEG = 1.3


def verdict(log, number, name, ok, detail):
    line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    log(line)
    print(line)
    assert ok, line


def leg_scale(design: CharacterDesign) -> float:
    return float(design.bone_length_scales[3])


# ---------------------------------------------------------------- 1-3: formulas, gradients, physics

def test_formula_fidelity(acceptance_log):
    checks = {}
    checks["pd_torque"] = abs(pd_torque([2.0], [0.3], [1.0], [0.5], [0.2], [1.0], torque_limit=None)[0] - 0.94)
    checks["wrap"] = abs(float(wrap_angle(3.0 - -3.0)) - (6.0 - 2 * math.pi))
    checks["r_p"] = abs(reward_terms(0.5, 0.0, 0.0, 0.0)["r_p"] - math.exp(-1.0))
    mags = np.array([3.0, 4.0]) / 100.0
    checks["r_vf"] = abs(reward_terms(0.0, 0.0, 0.0, float(mags @ mags))["r_vf"] - math.exp(-0.0025))
    checks["r_t"] = abs(reward_terms(0.0, 0.0, 0.0, 0.0)["r_t"] - 1.0)
    cur = CurriculumState(["a", "b"], temperature=1.0)
    cur.success_rate.update(a=0.0, b=1.0)
    z = 1.0 + math.exp(-1.0)
    checks["softmax"] = float(np.max(np.abs(cur.probabilities() - [1.0 / z, math.exp(-1.0) / z])))
    cur = CurriculumState(["a"])
    record_outcome(cur, "a", False)
    record_outcome(cur, "a", True)
    checks["ewma"] = max(abs(cur.success_rate["a"] - 2 / 3), abs(ewma([0, 1], 0.5) - 2 / 3))
    adv, _ = gae([1.0, 2.0, 3.0, 4.0, 5.0], np.zeros(5), np.zeros(5, bool), gamma=1.0, lam=1.0)
    checks["gae"] = float(np.max(np.abs(adv - [15.0, 14.0, 12.0, 9.0, 5.0])))
    worst = max(checks, key=checks.get)
    verdict(acceptance_log, 1, "formula fidelity", checks[worst] <= 1e-9,
            f"largest error {checks[worst]:.1e} in {worst}")


def test_gradient_suite(acceptance_log):
    rng = np.random.default_rng(0)
    errors = []
    for sizes in REPO_SHAPES:
        net = Mlp(sizes, rng)
        for p in net.params[1::2]:
            p[...] = rng.normal(scale=0.3, size=p.shape)
        errors.append(fd_check(net, rng.normal(size=(2, sizes[0])), rng.normal(size=(2, sizes[-1])), rng,
                               per_array=200))
    verdict(acceptance_log, 2, "gradient check", max(errors) < 1e-4,
            f"max relative error {max(errors):.1e} over {len(REPO_SHAPES)} layer stacks")


def test_physics_suite(acceptance_log):
    # free fall against the semi-implicit Euler recurrence
    link, dt = free_link(), 1.0 / 450
    s = make_state(link, [0.0, 100.0, 0.0])
    fall_err = 0.0
    for n in range(1, 451):
        s = step(link, s, [], dt=dt)
        fall_err = max(fall_err, abs((100.0 - s.q[1]) - 9.81 * dt * dt * n * (n + 1) / 2))
    # pendulum energy over one second
    pend = pendulum()
    s = make_state(pend, [0.0, 3.0, 0.0, 1.2, -0.7])
    e0, drift = total_energy(pend, s), 0.0
    for _ in range(10_000):
        s = step(pend, s, np.zeros(2), dt=1e-4)
        drift = max(drift, abs(total_energy(pend, s) - e0) / abs(e0))
    # momentum with neither gravity nor contact
    cfg = SimConfig(gravity=0.0)
    rng = np.random.default_rng(7)
    q = standing_q(M) + np.concatenate([[0.0, 5.0, 0.4], rng.uniform(-0.3, 0.3, 8)])
    q[5:7] = np.clip(q[5:7], -2.5, -0.1)
    s = make_state(M, q, rng.normal(size=M.n_dof), cfg=cfg)
    mom = 0.0
    for _ in range(50):
        p0 = linear_momentum(M, s)
        s = step(M, s, rng.normal(scale=20, size=8), cfg=cfg)
        mom = max(mom, np.linalg.norm(linear_momentum(M, s) - p0) / np.linalg.norm(p0))
    # gating: forces on non-contacting feet change nothing
    s = make_state(M, standing_q(M))
    s.contact_flags = np.array([True, False])
    forces = [ResidualForce(5, (0.1, 0.0), (0.6, 0.8), 80.0), ResidualForce(8, (0.0, 0.0), (0.0, 1.0), 50.0)]
    a, b = step(M, s, np.zeros(8), forces), step(M, s, np.zeros(8), forces[:1])
    gated = np.array_equal(a.q, b.q) and np.array_equal(a.qdot, b.qdot)
    ok = fall_err <= 1e-12 and drift < 0.01 and mom < 1e-8 and gated
    verdict(acceptance_log, 3, "physics suite", ok,
            f"free-fall error {fall_err:.1e} m, energy drift {100 * drift:.3f}%/s, "
            f"momentum {mom:.1e}/step, gating exact {gated}")


# ---------------------------------------------------------------- 4: controller learning

def corpus() -> list[MotionClip]:
    return [generate_clip(k, duration=4.0) for k in CORPUS_KINDS]


def _cache_dir() -> Path:
    root = Path(os.environ.get("MORPHSIM_CACHE", Path(__file__).resolve().parents[1] / ".cache"))
    root.mkdir(parents=True, exist_ok=True)
    return root


@pytest.fixture(scope="module")
def trained():
    clips = corpus()
    key = hashlib.sha256((repr(TRAIN) + "".join(c.id + c.frames.tobytes().hex() for c in clips)).encode())
    path = _cache_dir() / f"controller_{key.hexdigest()[:16]}.ckpt"
    if not path.exists():
        t0 = time.perf_counter()
        res = train_controller(clips, TRAIN)
        res.write_history(path.with_suffix(".csv"))
        save_checkpoint(path, res.policy, res.value_fn,
                        {"seed": TRAIN.seed, "iterations": TRAIN.iterations,
                         "train_seconds": time.perf_counter() - t0})
    policy, _, meta = load_checkpoint(path)
    return policy, meta


def test_controller_learning(acceptance_log, trained):
    policy, meta = trained
    clips = corpus()
    untrained, _ = init_controller(M, TRAIN)
    before = evaluate_design(untrained, IDENT, clips).report.aggregate()
    after = evaluate_design(policy, IDENT, clips).report.aggregate()
    ok = after["S_succ"] >= 0.8 and after["E_mpjpe_g"] < 0.5 * before["E_mpjpe_g"]
    took = f", trained in {meta['train_seconds'] / 60:.0f} min" if "train_seconds" in meta else ""
    verdict(acceptance_log, 4, "controller learning", ok,
            f"S_succ {100 * after['S_succ']:.0f}%, E_mpjpe-g {after['E_mpjpe_g']:.1f} mm vs untrained "
            f"{before['E_mpjpe_g']:.1f} mm (bar {0.5 * before['E_mpjpe_g']:.1f}), "
            f"{meta['iterations']} iterations{took}")


# ---------------------------------------------------------------- 5 and 8: design recovery

def grid_optimum(policy, clip):
    best = None
    for s in GRID:
        ev = evaluate_design(policy, LEGS.to_design([s])[0], [clip])
        if _better(ev, best):
            best, scale = ev, s
    return float(scale), best


@pytest.fixture(scope="module")
def recovery(trained):
    policy, _ = trained
    truth, _ = LEGS.to_design([GROUND_TRUTH_LEG])
    traj = rollout(policy, truth, generate_clip("hop", duration=4.0))
    clip = MotionClip(traj.sim_q(), 30.0, "hop", "hop_leg_1.3")
    grid_scale, grid_eval = grid_optimum(policy, clip)
    before = policy_hash(policy)
    res = optimize(policy, [clip], DESIGN_OPT, LEGS)
    return dict(grid=grid_scale, grid_eval=grid_eval, found=leg_scale(res.best_design), result=res,
                before=before, after=policy_hash(policy))


def test_design_recovery(acceptance_log, recovery):
    r = recovery
    verdict(acceptance_log, 5, "design recovery", abs(r["found"] - r["grid"]) <= 0.05 + 1e-12,
            f"optimized leg scale {r['found']:.3f}, grid optimum {r['grid']:.2f}, "
            f"ground truth {GROUND_TRUTH_LEG}")


def test_controller_frozen(acceptance_log, recovery):
    r = recovery
    same = r["before"] == r["after"] == r["result"].controller_hash
    verdict(acceptance_log, 8, "controller freeze", same, f"hash {r['before'][:16]} before and {r['after'][:16]} after")


# ---------------------------------------------------------------- 6 and 7: fail-to-succeed and retention

@pytest.fixture(scope="module")
def long_legged_hop(trained):
    """Optimize on a hop authored for a body with 1.3x legs, which the default body cannot follow."""
    policy, _ = trained
    truth, _ = LEGS.to_design([GROUND_TRUTH_LEG])
    clip = generate_clip("hop", duration=4.0, model=build(truth, M), clip_id="hop_long_legs")
    res = optimize(policy, [clip], DESIGN_OPT, LEGS)
    return dict(clip=clip, design=res.best_design,
                default=evaluate_design(policy, IDENT, [clip]).report.rows[clip.id],
                optimized=evaluate_design(policy, res.best_design, [clip]).report.rows[clip.id])


def test_default_fails_optimized_succeeds(acceptance_log, long_legged_hop):
    d, o = long_legged_hop["default"], long_legged_hop["optimized"]
    ok = d["S_succ"] == 0.0 and o["S_succ"] == 1.0 and o["E_mpjpe"] < d["E_mpjpe"]
    verdict(acceptance_log, 6, "0% to 100%", ok,
            f"leg scale {leg_scale(long_legged_hop['design']):.3f}: S_succ {100 * d['S_succ']:.0f}% -> "
            f"{100 * o['S_succ']:.0f}%, E_mpjpe {d['E_mpjpe']:.1f} -> {o['E_mpjpe']:.1f} mm")


def test_retention_on_held_out_clips(acceptance_log, trained, long_legged_hop):
    policy, _ = trained
    held_out = corpus()
    base = evaluate_design(policy, IDENT, held_out).report.aggregate()["S_succ"]
    opt = evaluate_design(policy, long_legged_hop["design"], held_out).report.aggregate()["S_succ"]
    drop = 100 * (base - opt)
    verdict(acceptance_log, 7, "retention", drop <= 15.0 + 1e-9,
            f"held-out S_succ {100 * base:.0f}% default vs {100 * opt:.0f}% optimized, drop {drop:.0f} points")
