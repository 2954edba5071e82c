"""Shared fixtures: a small pretrained policy + reward model per env.

Session-scoped so the BC and reward training run once per pytest session;
sizes are kept small (short schedules, narrow nets) for unit-level tests.
The acceptance suite builds its own full-size artifacts.
"""

import numpy as np
import pytest

from fdpp import envs
from fdpp.diffusion import (
    NormStats,
    build_windows,
    make_policy,
    schedule_make,
    train_bc,
)
from fdpp.preference import oracle_label, sample_pairs, train_reward


def demo_episodes(config, n, seed0=0):
    episodes = []
    for seed in range(seed0, seed0 + n):
        states, actions, _ = envs.demo_episode(config, seed)
        episodes.append((np.stack([s.obs() for s in states]), np.stack(actions)))
    return episodes


def pretrain_small(config, n_demos=24, bc_steps=800, seed=0, t_s=2, t_p=4, t_a=2,
                   hidden=(64, 64), K=20, k_ddim=5):
    episodes = demo_episodes(config, n_demos)
    state_norm = NormStats.fit(np.concatenate([s for s, _ in episodes]))
    action_norm = NormStats.fit(np.concatenate([a for _, a in episodes]))
    normed = [(state_norm.normalize(s), action_norm.normalize(a)) for s, a in episodes]
    ws, wa = build_windows(normed, t_s, t_p)
    sched = schedule_make(K=K, beta_1=1e-4, beta_K=0.05, k_ddim=k_ddim, eta=1.0)
    policy = make_policy(
        state_dim=config.state_dim, action_dim=config.action_dim, schedule=sched,
        seed=seed, t_s=t_s, t_p=t_p, t_a=t_a, hidden=hidden,
        state_norm=state_norm, action_norm=action_norm,
    )
    train_bc(policy, ws, wa, steps=bc_steps, batch_size=128, lr=1e-3, seed=seed, log_every=10**6)
    return policy


def reward_small(config, feature_id, n_pairs=256, seed=0):
    trajs = []
    for s in range(30):
        states, _, _ = envs.expert_episode(config, s)
        trajs.append([{"state": st.to_json()} for st in states])
    recs = sample_pairs(trajs, n_pairs, seed=seed, config=config)
    for r in recs:
        r.label = oracle_label(r, feature_id, config)
        r.source = "oracle"
    model, _ = train_reward(recs, config, feature_id, seed=seed, epochs=250, hidden=(32, 32))
    return model


@pytest.fixture(scope="session")
def place_config():
    return envs.make_env_config("place-align")


@pytest.fixture(scope="session")
def push_config():
    return envs.make_env_config("push-block")


@pytest.fixture(scope="session")
def place_policy_small(place_config):
    return pretrain_small(place_config)


@pytest.fixture(scope="session")
def push_policy_small(push_config):
    return pretrain_small(push_config, n_demos=24, bc_steps=800)


@pytest.fixture(scope="session")
def place_reward_small(place_config):
    return reward_small(place_config, "displacement")


@pytest.fixture(scope="session")
def push_reward_small(push_config):
    return reward_small(push_config, "region_occupancy")
