import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdpp import envs
from fdpp.envs import (
    EnvConfig,
    EnvError,
    PlaceState,
    PushState,
    SceneSpec,
    expert_episode,
    feature,
    in_region,
    is_terminal,
    make_env_config,
    render_scene,
    reset,
    scripted_expert,
    state_features,
    step,
    success,
    wrap_angle,
)

PUSH = make_env_config("push-block")
PLACE = make_env_config("place-align")


# ------------------------------------------------------------------ reset

def test_reset_same_seed_identical():
    for cfg in (PUSH, PLACE):
        assert reset(cfg, 7) == reset(cfg, 7)


def test_reset_positions_in_boxes():
    for seed in range(1000):
        s = reset(PUSH, seed)
        assert 0.80 <= s.pusher[0] <= 0.95 and 0.05 <= s.pusher[1] <= 0.20
        assert 0.45 <= s.block[0] <= 0.55 and 0.45 <= s.block[1] <= 0.55
        p = reset(PLACE, seed)
        r = math.hypot(p.pose[0] - 0.5, p.pose[1] - 0.5)
        assert 0.25 - 1e-12 <= r <= 0.4 + 1e-12
        assert -math.pi < p.pose[2] <= math.pi


def test_reset_pusher_x_monte_carlo_mean():
    xs = [reset(PUSH, seed).pusher[0] for seed in range(1000)]
    assert abs(np.mean(xs) - 0.875) < 0.01


def test_reset_start_box_inside_forbidden_region():
    for seed in range(200):
        assert in_region(reset(PUSH, seed).pusher, PUSH)


# ------------------------------------------------------------------ step

def test_zero_action_only_advances_time():
    s = reset(PUSH, 0)
    nxt, done, _ = step(s, np.zeros(2), PUSH)
    assert nxt.pusher == s.pusher and nxt.block == s.block and nxt.t == s.t + 1
    assert not done
    p = reset(PLACE, 0)
    nxt2, _, _ = step(p, np.array([0.0, 0.0, 0.0, -1.0]), PLACE)
    assert nxt2.pose == p.pose and not nxt2.released and nxt2.t == p.t + 1


def test_contact_pushes_block_to_exact_distance():
    s = PushState(pusher=(0.5, 0.5), block=(0.55, 0.5), t=0)
    nxt, _, _ = step(s, np.array([1.0, 0.0]), PUSH)
    assert nxt.pusher == (0.52, 0.5)
    assert abs(nxt.block[0] - (0.52 + 0.09)) < 1e-12
    assert abs(nxt.block[1] - 0.5) < 1e-12


def test_step_clips_action_components():
    s = PushState(pusher=(0.5, 0.5), block=(0.9, 0.9), t=0)
    nxt, _, _ = step(s, np.array([5.0, -5.0]), PUSH)
    assert abs(nxt.pusher[0] - 0.52) < 1e-12
    assert abs(nxt.pusher[1] - 0.48) < 1e-12


def test_step_after_done_rejected():
    s = PushState(pusher=(0.5, 0.5), block=PUSH.goal, t=3)
    assert success(s, PUSH)
    with pytest.raises(EnvError):
        step(s, np.zeros(2), PUSH)


def test_release_is_absorbing():
    p = PlaceState(pose=(0.3, 0.3, 0.1), target=PLACE.target, released=False, t=0)
    nxt, done, _ = step(p, np.array([0.5, 0.5, 0.5, 1.0]), PLACE)
    assert nxt.released and done
    with pytest.raises(EnvError):
        step(nxt, np.zeros(4), PLACE)


def test_max_steps_terminates():
    cfg = make_env_config("push-block", max_steps=3)
    s = reset(cfg, 1)
    for _ in range(3):
        s, done, _ = step(s, np.zeros(2), cfg)
    assert done and is_terminal(s, cfg)


def test_non_penetration_under_random_actions():
    rng = np.random.default_rng(123)
    s = reset(PUSH, 5)
    contact = PUSH.contact_dist
    checked = 0
    while checked < 100_000:
        if is_terminal(s, PUSH):
            s = reset(PUSH, int(rng.integers(1 << 30)))
        a = rng.uniform(-1, 1, size=2)
        # bias toward the block to provoke collisions
        if rng.random() < 0.5:
            a = np.asarray(s.block) - np.asarray(s.pusher)
            a = a / max(np.linalg.norm(a), 0.02) + rng.uniform(-0.3, 0.3, size=2)
        s, _, _ = step(s, np.clip(a, -1, 1), PUSH)
        assert math.dist(s.pusher, s.block) >= contact - 1e-9
        assert 0 <= s.pusher[0] <= 1 and 0 <= s.pusher[1] <= 1
        assert 0 <= s.block[0] <= 1 and 0 <= s.block[1] <= 1
        checked += 1


def test_dynamics_replay_reproduces_states():
    states, actions, _ = expert_episode(PUSH, 11)
    s = states[0]
    for a, expected in zip(actions, states[1:]):
        s, _, _ = step(s, a, PUSH)
        assert s == expected


# ------------------------------------------------------------------ success

def test_success_block_at_goal():
    assert success(PushState(pusher=(0.5, 0.5), block=PUSH.goal, t=0), PUSH)


def test_success_boundary_is_closed():
    # exactly representable distance so the boundary case is exact
    cfg = make_env_config("push-block", goal=(0.25, 0.75), push_success_dist=0.25)
    assert success(PushState(pusher=(0.9, 0.9), block=(0.5, 0.75), t=0), cfg)
    assert not success(PushState(pusher=(0.9, 0.9), block=(0.5 + 1e-9, 0.75), t=0), cfg)


def test_unreleased_block_at_target_not_success():
    p = PlaceState(pose=(0.5, 0.5, 0.0), target=PLACE.target, released=False, t=0)
    assert not success(p, PLACE)
    assert success(PlaceState(pose=(0.5, 0.5, 0.0), target=PLACE.target, released=True, t=1), PLACE)


# ------------------------------------------------------------------ features

def test_region_occupancy_values():
    assert feature(PushState(pusher=(0.9, 0.1), block=(0.5, 0.5), t=0), "region_occupancy", PUSH) == 1.0
    assert feature(PushState(pusher=(0.2, 0.8), block=(0.5, 0.5), t=0), "region_occupancy", PUSH) == 0.0


def test_misalignment_zero_and_wrap():
    p = PlaceState(pose=(0.4, 0.4, 0.0), target=(0.5, 0.5, 0.0), released=False, t=0)
    assert feature(p, "misalignment", PLACE) == 0.0
    p2 = PlaceState(pose=(0.4, 0.4, wrap_angle(3 * math.pi / 2)), target=(0.5, 0.5, 0.0), released=False, t=0)
    assert abs(feature(p2, "misalignment", PLACE) - math.pi / 2) < 1e-12


@given(st.floats(-3 * math.pi, 3 * math.pi))
@settings(max_examples=200, deadline=None)
def test_misalignment_invariant_to_full_turns(phi):
    base = PlaceState(pose=(0.4, 0.4, wrap_angle(phi)), target=(0.5, 0.5, 0.0), released=False, t=0)
    shifted = PlaceState(pose=(0.4, 0.4, wrap_angle(phi + 2 * math.pi)), target=(0.5, 0.5, 0.0), released=False, t=0)
    a = feature(base, "misalignment", PLACE)
    b = feature(shifted, "misalignment", PLACE)
    assert abs(a - b) < 1e-9
    assert 0.0 <= a <= math.pi


def test_feature_env_mismatch_rejected():
    with pytest.raises(EnvError):
        feature(reset(PUSH, 0), "displacement", PUSH)
    with pytest.raises(EnvError):
        feature(reset(PLACE, 0), "region_occupancy", PLACE)


# ------------------------------------------------------------------ expert

def test_expert_far_action_points_at_approach():
    s = PushState(pusher=(0.9, 0.1), block=(0.5, 0.5), t=0)
    g = np.array(PUSH.goal)
    b = np.array(s.block)
    away = (b - g) / np.linalg.norm(b - g)
    approach = b + 0.09 * away
    a = scripted_expert(s, PUSH, 0)
    v = approach - np.array(s.pusher)
    cos = float(a @ v / (np.linalg.norm(a) * np.linalg.norm(v)))
    assert abs(cos - 1.0) < 1e-9


def test_expert_success_rate_both_envs():
    for cfg in (PUSH, PLACE):
        wins = 0
        for seed in range(100):
            states, _, _ = expert_episode(cfg, seed)
            wins += success(states[-1], cfg)
        assert wins >= 95, f"{cfg.env_id}: expert success {wins}/100"


def test_expert_terminal_displacement_distribution():
    terms = []
    for seed in range(500):
        states, _, _ = expert_episode(PLACE, seed)
        terms.append(feature(states[-1], "displacement", PLACE))
    mean = float(np.mean(terms))
    assert 0.04 <= mean <= 0.08, mean


def test_expert_crosses_region_early():
    frac_in = []
    for seed in range(50):
        states, _, _ = expert_episode(PUSH, seed)
        early = states[:30]
        frac_in.append(np.mean([feature(s, "region_occupancy", PUSH) for s in early]))
    assert np.mean(frac_in) >= 0.5, np.mean(frac_in)


def test_expert_deterministic():
    s = reset(PLACE, 3)
    a1 = scripted_expert(s, PLACE, 3)
    a2 = scripted_expert(s, PLACE, 3)
    np.testing.assert_array_equal(a1, a2)


# ------------------------------------------------------------------ scenes

def test_push_scene_has_five_labeled_primitives():
    scene = render_scene(reset(PUSH, 0), PUSH)
    assert len(scene.primitives) == 5
    labels = [p.label for p in scene.primitives]
    assert labels == ["workspace", "forbidden_region", "goal", "pusher", "block"]


def test_distinct_states_give_distinct_scenes():
    s1, s2 = reset(PUSH, 0), reset(PUSH, 1)
    assert render_scene(s1, PUSH) != render_scene(s2, PUSH)
    p1 = PlaceState(pose=(0.5, 0.5, 0.0), target=PLACE.target, released=False, t=0)
    p2 = PlaceState(pose=(0.5, 0.5, 0.0), target=PLACE.target, released=True, t=0)
    assert render_scene(p1, PLACE) != render_scene(p2, PLACE)


def test_scene_json_roundtrip_identity():
    for cfg, seed in ((PUSH, 2), (PLACE, 2)):
        scene = render_scene(reset(cfg, seed), cfg)
        blob = json.dumps(scene.to_json())
        assert SceneSpec.from_json(json.loads(blob)) == scene


# ------------------------------------------------------------------ config

def test_config_json_roundtrip():
    cfg = make_env_config("place-align", max_steps=150, grace_steps=9)
    assert EnvConfig.from_json(cfg.to_json()) == cfg


def test_region_goal_overlap_rejected():
    with pytest.raises(EnvError):
        make_env_config("push-block", region=(0.1, 0.5, 0.5, 0.9))


def test_state_json_roundtrip():
    s = reset(PUSH, 4)
    assert PushState.from_json(json.loads(json.dumps(s.to_json()))) == s
    p = reset(PLACE, 4)
    assert PlaceState.from_json(json.loads(json.dumps(p.to_json()))) == p


def test_state_features_helper():
    s = reset(PUSH, 0)
    assert state_features(s, PUSH) == {"region_occupancy": 1.0}
    p = reset(PLACE, 0)
    fs = state_features(p, PLACE)
    assert set(fs) == {"displacement", "misalignment"}
