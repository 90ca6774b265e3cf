import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphsim.motion import (KINDS, CurriculumState, MotionClip, ewma, generate_clip, load_corpus, record_outcome,
                             sample_clip)
from morphsim.physics import default_character, link_frames


# ---------------------------------------------------------------- clips

def test_clip_validation():
    with pytest.raises(ValueError):
        MotionClip(np.zeros((1, 11)), 30.0, "walk", "a")
    with pytest.raises(ValueError):
        MotionClip(np.zeros((3, 11)), 0.0, "walk", "a")
    with pytest.raises(ValueError):
        MotionClip(np.full((3, 11), np.nan), 30.0, "walk", "a")


def test_clip_velocities_central_inside_one_sided_at_ends():
    frames = np.cumsum(np.arange(30, dtype=float)).reshape(10, 3) ** 1.5
    c = MotionClip(frames, 10.0, "x", "x")
    v = c.velocities
    assert np.allclose(v[1:-1], (frames[2:] - frames[:-2]) * 10.0 / 2, rtol=1e-12, atol=0)
    assert np.allclose(v[0], (frames[1] - frames[0]) * 10.0)
    assert np.allclose(v[-1], (frames[-1] - frames[-2]) * 10.0)


def test_clip_frames_are_immutable():
    c = generate_clip("walk", duration=1.0)
    with pytest.raises(ValueError):
        c.frames[0, 0] = 1.0


def test_clip_round_trip_and_corpus(tmp_path):
    clips = [generate_clip(k, duration=1.0) for k in ("walk", "hop")]
    for c in clips:
        c.save(tmp_path / f"{c.id}.json")
    (tmp_path / "manifest.json").write_text(json.dumps({"clips": []}))
    back = load_corpus(tmp_path)
    assert [c.id for c in back] == ["hop", "walk"]
    assert np.array_equal(back[1].frames, clips[0].frames)
    with pytest.raises(ValueError):
        MotionClip.from_dict({"schema": "other/9", "frames": [[0], [0]], "frame_rate": 30, "category": "", "id": ""})


# ---------------------------------------------------------------- curriculum

def test_equal_success_gives_uniform_sampling():
    cur = CurriculumState(["a", "b", "c", "d"])
    assert np.allclose(cur.probabilities(), 0.25, rtol=0, atol=1e-15)


def test_softmax_example():
    cur = CurriculumState(["a", "b"], temperature=1.0)
    cur.success_rate.update(a=0.0, b=1.0)
    e = math.exp(-1.0)
    assert np.allclose(cur.probabilities(), [1 / (1 + e), e / (1 + e)], rtol=0, atol=1e-12)
    assert cur.probabilities() == pytest.approx([0.7311, 0.2689], abs=5e-5)


def test_large_temperature_is_near_uniform():
    cur = CurriculumState(["a", "b", "c"], temperature=1e6)
    cur.success_rate.update(a=0.0, b=0.5, c=1.0)
    assert np.max(np.abs(cur.probabilities() - 1 / 3)) < 1e-5


def test_sampling_frequencies_follow_probabilities():
    cur = CurriculumState(["a", "b"], temperature=1.0)
    cur.success_rate.update(a=0.0, b=1.0)
    rng = np.random.default_rng(0)
    n = 20_000
    hits = sum(sample_clip(cur, rng) == "a" for _ in range(n))
    assert abs(hits / n - 0.7311) < 4 * math.sqrt(0.7311 * 0.2689 / n)


def test_empty_curriculum_cannot_sample():
    with pytest.raises(ValueError):
        sample_clip(CurriculumState([]), np.random.default_rng(0))


def test_ewma_examples():
    assert ewma([True] * 7) == 1.0
    assert ewma([False] * 7) == 0.0
    assert ewma([False, True], 0.5) == pytest.approx(2 / 3, abs=1e-15)
    assert ewma([]) == 0.0


def test_record_outcome_updates_only_its_clip():
    cur = CurriculumState(["a", "b"])
    record_outcome(cur, "b", True)
    record_outcome(cur, "a", False)
    record_outcome(cur, "a", True)
    assert cur.success_rate["a"] == pytest.approx(2 / 3)
    assert cur.success_rate["b"] == 1.0
    with pytest.raises(KeyError):
        record_outcome(cur, "zzz", True)


def test_history_is_capped_at_fifty():
    cur = CurriculumState(["a"])
    for k in range(120):
        record_outcome(cur, "a", k % 3 == 0)
    assert len(cur.history["a"]) == 50


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.booleans()), max_size=80),
       st.floats(0.01, 5.0))
def test_curriculum_invariants(events, tau):
    cur = CurriculumState(list("abc"), temperature=tau)
    for cid, ok in events:
        before = {k: v for k, v in cur.success_rate.items() if k != cid}
        record_outcome(cur, cid, ok)
        assert {k: v for k, v in cur.success_rate.items() if k != cid} == before
        h = list(cur.history[cid])
        assert min(h) <= cur.success_rate[cid] <= max(h)
        assert 0.0 <= cur.success_rate[cid] <= 1.0
    p = cur.probabilities()
    assert np.all(p > 0) and p.sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- generators

@pytest.mark.parametrize("kind", KINDS)
def test_generated_clip_is_smooth_and_grounded(kind):
    m = default_character()
    c = generate_clip(kind, duration=4.0)
    assert len(c) == 121 and c.frame_rate == 30.0 and c.category == kind
    assert np.max(np.abs(np.diff(c.frames[:, 3:], axis=0))) < 0.5
    lo, hi = m.arrays["lower"], m.arrays["upper"]
    assert np.all(c.frames[:, 3:] >= lo) and np.all(c.frames[:, 3:] <= hi)
    hw = m.arrays["halfwidth"]
    for q in c.frames:
        _, _, start, tip = link_frames(m, q)
        low = np.minimum(start[:, 1], tip[:, 1]) - hw
        assert low.min() > -1e-9
        body = np.delete(low, list(m.foot_links))
        assert body.min() > 0.01


def test_walk_with_zero_stride_stays_in_place():
    c = generate_clip("walk", {"stride": 0.0}, duration=3.0)
    assert np.all(c.frames[:, 0] == 0.0)


def test_walk_advances_at_stride_per_period():
    c = generate_clip("walk", {"stride": 0.4, "period": 1.0}, duration=3.0)
    assert c.frames[-1, 0] - c.frames[0, 0] == pytest.approx(1.2, abs=1e-9)
    assert np.all(np.diff(c.frames[:, 0]) > 0)


def test_hop_height_is_periodic():
    period = 0.8
    c = generate_clip("hop", {"period": period}, duration=4.0)
    lag = int(round(period * c.frame_rate))
    y = c.frames[:, 1]
    assert np.max(np.abs(y[lag:] - y[:-lag])) < 1e-6
    assert y.max() - y.min() > 0.1


def test_planted_walk_feet_do_not_slide():
    m = default_character()
    c = generate_clip("walk", duration=2.0, frame_rate=30.0)
    hw = m.links[5].geom_halfwidth
    prev = None
    for q in c.frames:
        _, origin, _, _ = link_frames(m, q)
        ankles = origin[[5, 8]]
        if prev is not None:
            for k in range(2):
                if abs(ankles[k, 1] - hw) < 1e-9 and abs(prev[k, 1] - hw) < 1e-9:
                    assert abs(ankles[k, 0] - prev[k, 0]) < 1e-9
        prev = ankles


def test_generator_is_deterministic():
    a = generate_clip("crawl", {"stride": 0.2}, duration=2.0)
    b = generate_clip("crawl", {"stride": 0.2}, duration=2.0)
    assert np.array_equal(a.frames, b.frames)


def test_generator_rejects_bad_params():
    with pytest.raises(ValueError):
        generate_clip("moonwalk")
    with pytest.raises(ValueError):
        generate_clip("walk", {"speed": 1.0})
    with pytest.raises(ValueError):
        generate_clip("walk", {"period": -1.0})
    with pytest.raises(ValueError):
        generate_clip("walk", {"stride": 5.0})
    with pytest.raises(ValueError):
        generate_clip("walk", duration=0.01)
    with pytest.raises(ValueError):
        generate_clip("hop", {"flight": 1.5})
