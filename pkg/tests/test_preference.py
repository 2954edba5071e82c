import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdpp import envs
from fdpp.numgrad import MLPSpec, ParamStore, init_mlp_params
from fdpp.diffusion import NormStats
from fdpp.preference import (
    LABEL_A,
    LABEL_B,
    LABEL_EQUAL,
    PreferenceError,
    PreferenceRecord,
    RewardModel,
    label_histogram,
    oracle_label,
    pref_prob,
    ranking_accuracy,
    read_records,
    reward_loss,
    sample_pairs,
    sequence_reward,
    train_reward,
    write_records,
)

PUSH = envs.make_env_config("push-block")
PLACE = envs.make_env_config("place-align")


def expert_corpus(cfg, n_episodes=20):
    trajs = []
    for seed in range(n_episodes):
        states, _, _ = envs.expert_episode(cfg, seed)
        trajs.append([{"state": s.to_json()} for s in states])
    return trajs


def labeled_pairs(cfg, feature_id, n=128, seed=0, episodes=20):
    recs = sample_pairs(expert_corpus(cfg, episodes), n, seed=seed, config=cfg)
    for r in recs:
        r.label = oracle_label(r, feature_id, cfg)
        r.source = "oracle"
    return recs


def constant_reward_model(cfg, value=0.0):
    spec = MLPSpec(input_dim=cfg.state_dim, hidden_dims=(8,), output_dim=1, activation="tanh")
    params = init_mlp_params(spec, 0)
    for name in params:
        params[name] = np.zeros_like(params[name])
    params["b1"] = np.array([value])
    return RewardModel(
        spec=spec, params=params, norm=NormStats.identity(cfg.state_dim),
        feature_id="region_occupancy", env_id=cfg.env_id,
    )


# ------------------------------------------------------------------ pairs

def test_sample_pairs_count_and_unique_ids():
    recs = sample_pairs(expert_corpus(PUSH, 30), 1024, seed=3, config=PUSH)
    assert len(recs) == 1024
    assert len({r.pair_id for r in recs}) == 1024


def test_sample_pairs_deterministic():
    corpus = expert_corpus(PUSH, 10)
    a = sample_pairs(corpus, 64, seed=5, config=PUSH)
    b = sample_pairs(corpus, 64, seed=5, config=PUSH)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]


def test_sample_pairs_states_verbatim_from_corpus():
    corpus = expert_corpus(PUSH, 10)
    pool = {json.dumps(rec["state"], sort_keys=True) for traj in corpus for rec in traj}
    recs = sample_pairs(corpus, 64, seed=1, config=PUSH)
    for r in recs:
        assert json.dumps(r.state_a, sort_keys=True) in pool
        assert json.dumps(r.state_b, sort_keys=True) in pool


def test_sample_pairs_rejects_empty_corpus():
    with pytest.raises(PreferenceError):
        sample_pairs([], 10, seed=0, config=PUSH)


def test_sample_pairs_attach_scenes():
    recs = sample_pairs(expert_corpus(PUSH, 5), 8, seed=0, config=PUSH)
    for r in recs:
        assert len(r.scene_a) == 5 and len(r.scene_b) == 5


# ------------------------------------------------------------------ oracle

def rec_from_states(sa, sb, cfg):
    return PreferenceRecord(
        pair_id="x", state_a=sa.to_json(), state_b=sb.to_json(),
        scene_a=[], scene_b=[],
    )


def test_oracle_region_prefers_outside():
    out_state = envs.PushState(pusher=(0.2, 0.8), block=(0.5, 0.5), t=0)
    in_state = envs.PushState(pusher=(0.9, 0.1), block=(0.5, 0.5), t=0)
    assert oracle_label(rec_from_states(out_state, in_state, PUSH), "region_occupancy", PUSH) == LABEL_A
    assert oracle_label(rec_from_states(in_state, out_state, PUSH), "region_occupancy", PUSH) == LABEL_B
    assert oracle_label(rec_from_states(in_state, in_state, PUSH), "region_occupancy", PUSH) == LABEL_EQUAL


def test_oracle_prefers_smaller_displacement():
    far = envs.PlaceState(pose=(0.6, 0.5, 0.0), target=PLACE.target, released=False, t=0)   # 0.10
    near = envs.PlaceState(pose=(0.53, 0.5, 0.0), target=PLACE.target, released=False, t=0)  # 0.03
    assert oracle_label(rec_from_states(far, near, PLACE), "displacement", PLACE) == LABEL_B
    assert oracle_label(rec_from_states(near, far, PLACE), "displacement", PLACE) == LABEL_A


def test_oracle_tie_tolerance():
    a = envs.PlaceState(pose=(0.53, 0.5, 0.0), target=PLACE.target, released=False, t=0)
    b = envs.PlaceState(pose=(0.5, 0.53 + 1e-9, 0.0), target=PLACE.target, released=False, t=0)
    assert oracle_label(rec_from_states(a, b, PLACE), "displacement", PLACE) == LABEL_EQUAL


# ------------------------------------------------------------------ pref prob

def test_pref_prob_half_for_equal_rewards():
    model = constant_reward_model(PUSH, 3.0)
    s = envs.reset(PUSH, 0).obs()
    assert pref_prob(model, s, s) == 0.5


def test_pref_prob_ln3_gap():
    # single-input linear net: r(s) = w * s_0
    spec = MLPSpec(input_dim=1, hidden_dims=(), output_dim=1)
    params = ParamStore({"w0": np.array([[1.0]]), "b0": np.array([0.0])})
    model = RewardModel(spec=spec, params=params, norm=NormStats.identity(1),
                        feature_id="f", env_id="push-block")
    p = pref_prob(model, np.array([0.0]), np.array([math.log(3.0)]))
    assert abs(p - 0.75) < 1e-12


def test_pref_prob_large_gap_no_overflow():
    spec = MLPSpec(input_dim=1, hidden_dims=(), output_dim=1)
    params = ParamStore({"w0": np.array([[1.0]]), "b0": np.array([0.0])})
    model = RewardModel(spec=spec, params=params, norm=NormStats.identity(1),
                        feature_id="f", env_id="push-block")
    p = pref_prob(model, np.array([0.0]), np.array([50.0]))
    assert 1.0 - p < 1e-8
    assert pref_prob(model, np.array([50.0]), np.array([0.0])) < 1e-8


@given(st.floats(-30, 30), st.floats(-30, 30))
@settings(max_examples=100, deadline=None)
def test_pref_prob_complement_identity(ra, rb):
    spec = MLPSpec(input_dim=1, hidden_dims=(), output_dim=1)
    params = ParamStore({"w0": np.array([[1.0]]), "b0": np.array([0.0])})
    model = RewardModel(spec=spec, params=params, norm=NormStats.identity(1),
                        feature_id="f", env_id="push-block")
    a, b = np.array([ra]), np.array([rb])
    assert abs(pref_prob(model, a, b) + pref_prob(model, b, a) - 1.0) < 1e-15


def test_pref_prob_shift_invariance():
    recs = labeled_pairs(PUSH, "region_occupancy", n=16, episodes=5)
    model, _ = train_reward(recs, PUSH, "region_occupancy", seed=0, epochs=5, hidden=(16,))
    sa = envs.state_from_json("push-block", recs[0].state_a).obs()
    sb = envs.state_from_json("push-block", recs[0].state_b).obs()
    before = pref_prob(model, sa, sb)
    bias = f"b{model.spec.n_layers - 1}"
    model.params[bias] = model.params[bias] + 500.0
    assert abs(pref_prob(model, sa, sb) - before) < 1e-9


# ------------------------------------------------------------------ loss

def test_reward_loss_ln2_at_even_odds():
    model = constant_reward_model(PUSH, 1.5)  # constant reward: every p = 0.5
    recs = labeled_pairs(PUSH, "region_occupancy", n=32, episodes=5)
    loss, _ = reward_loss(model, recs)
    assert abs(loss - math.log(2.0)) < 1e-12


def test_reward_loss_vanishes_with_separation():
    spec = MLPSpec(input_dim=4, hidden_dims=(), output_dim=1)
    base_w = np.array([[1.0], [0.0], [0.0], [0.0]])
    sa = envs.PushState(pusher=(0.2, 0.5), block=(0.5, 0.5), t=0)
    sb = envs.PushState(pusher=(0.9, 0.5), block=(0.5, 0.5), t=0)
    rec = rec_from_states(sa, sb, PUSH)
    rec.label = LABEL_A  # first has smaller x => prefer it under -x reward
    losses = []
    for scale in (1.0, 10.0, 100.0):
        params = ParamStore({"w0": -scale * base_w, "b0": np.array([0.0])})
        model = RewardModel(spec=spec, params=params, norm=NormStats.identity(4),
                            feature_id="f", env_id="push-block")
        loss, _ = reward_loss(model, [rec])
        losses.append(loss)
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-12


def test_reward_loss_gradient_matches_finite_differences():
    recs = labeled_pairs(PUSH, "region_occupancy", n=24, episodes=5)
    model, _ = train_reward(recs, PUSH, "region_occupancy", seed=3, epochs=3, hidden=(8, 8))
    loss0, grads = reward_loss(model, recs)
    rng = np.random.default_rng(0)
    eps = 1e-6
    for name in grads:
        flat = model.params[name].ravel()
        gflat = grads[name].ravel()
        for idx in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp, _ = reward_loss(model, recs)
            flat[idx] = orig - eps
            lm, _ = reward_loss(model, recs)
            flat[idx] = orig
            num = (lp - lm) / (2 * eps)
            rel = abs(num - gflat[idx]) / max(1e-8, abs(num) + abs(gflat[idx]))
            assert rel < 1e-5, (name, idx, num, gflat[idx])


def test_reward_loss_tie_records_target_half():
    model = constant_reward_model(PUSH, 0.0)
    recs = labeled_pairs(PUSH, "region_occupancy", n=32, episodes=5)
    ties = [r for r in recs if r.label == LABEL_EQUAL]
    assert ties
    loss, _ = reward_loss(model, ties)
    assert abs(loss - math.log(2.0)) < 1e-12


# ------------------------------------------------------------------ training

def test_train_reward_small_scale_accuracy():
    recs = labeled_pairs(PUSH, "region_occupancy", n=256, seed=0, episodes=30)
    model, report = train_reward(recs, PUSH, "region_occupancy", seed=1, epochs=300, hidden=(64, 64))
    assert report.holdout_accuracy >= 0.9
    assert report.train_accuracy >= 0.95


def test_train_reward_inverted_labels_learns_flip():
    recs = labeled_pairs(PLACE, "displacement", n=256, seed=0, episodes=30)
    inverted = copy.deepcopy(recs)
    for r in inverted:
        if r.label in (LABEL_A, LABEL_B):
            r.label = 1 - r.label
    model, _ = train_reward(inverted, PLACE, "displacement", seed=1, epochs=300, hidden=(64, 64))
    original_decisive = [r for r in recs if r.label in (LABEL_A, LABEL_B)]
    assert ranking_accuracy(model, original_decisive) <= 0.05


def test_train_reward_duplicates_do_not_change_params():
    recs = labeled_pairs(PUSH, "region_occupancy", n=64, seed=2, episodes=10)
    m1, _ = train_reward(recs, PUSH, "region_occupancy", seed=7, epochs=40, hidden=(16,))
    doubled = recs + copy.deepcopy(recs)
    m2, _ = train_reward(doubled, PUSH, "region_occupancy", seed=7, epochs=40, hidden=(16,))
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name], m2.params[name])


def test_train_reward_reproducible_report():
    recs = labeled_pairs(PUSH, "region_occupancy", n=64, seed=2, episodes=10)
    _, r1 = train_reward(recs, PUSH, "region_occupancy", seed=9, epochs=30, hidden=(16,))
    _, r2 = train_reward(recs, PUSH, "region_occupancy", seed=9, epochs=30, hidden=(16,))
    assert r1.holdout_accuracy == r2.holdout_accuracy
    assert r1.final_loss == r2.final_loss


def test_train_reward_rejects_all_ties():
    recs = labeled_pairs(PUSH, "region_occupancy", n=16, episodes=3)
    for r in recs:
        r.label = LABEL_EQUAL
    with pytest.raises(PreferenceError):
        train_reward(recs, PUSH, "region_occupancy", seed=0, epochs=5)


def test_trained_reward_direction_in_region_lower():
    recs = labeled_pairs(PUSH, "region_occupancy", n=256, seed=0, episodes=30)
    model, _ = train_reward(recs, PUSH, "region_occupancy", seed=1, epochs=300, hidden=(64, 64))
    states = [
        envs.state_from_json("push-block", rec["state"])
        for traj in expert_corpus(PUSH, 20)
        for rec in traj
    ]
    rewards = model.reward_states(states)
    occ = np.array([envs.feature(s, "region_occupancy", PUSH) for s in states])
    assert rewards[occ == 1].mean() < rewards[occ == 0].mean()


# ------------------------------------------------------------------ sequence reward

def test_sequence_reward_zero_model():
    model = constant_reward_model(PUSH, 0.0)
    states = [envs.reset(PUSH, s) for s in range(4)]
    assert sequence_reward(model, states, 4) == 0.0


def test_sequence_reward_constant_model():
    model = constant_reward_model(PUSH, 2.5)
    states = [envs.reset(PUSH, s) for s in range(4)]
    assert abs(sequence_reward(model, states, 4) - 10.0) < 1e-12


def test_sequence_reward_matches_per_state_recomputation():
    recs = labeled_pairs(PUSH, "region_occupancy", n=64, episodes=10)
    model, _ = train_reward(recs, PUSH, "region_occupancy", seed=0, epochs=20, hidden=(16,))
    states = [envs.reset(PUSH, s) for s in range(4)]
    total = sequence_reward(model, states, 4)
    independent = sum(float(model.reward_obs(s.obs()[None])[0]) for s in states)
    assert abs(total - independent) < 1e-12


def test_sequence_reward_count_mismatch_rejected():
    model = constant_reward_model(PUSH, 0.0)
    with pytest.raises(PreferenceError):
        sequence_reward(model, [envs.reset(PUSH, 0)], 4)


# ------------------------------------------------------------------ io

def test_records_jsonl_roundtrip(tmp_path):
    recs = labeled_pairs(PUSH, "region_occupancy", n=16, episodes=3)
    path = tmp_path / "labels.jsonl"
    write_records(path, recs)
    back = read_records(path)
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]


def test_label_histogram_sums_to_count():
    recs = labeled_pairs(PUSH, "region_occupancy", n=50, episodes=5)
    hist = label_histogram(recs)
    assert sum(hist.values()) == 50
    assert hist["unlabeled"] == 0
