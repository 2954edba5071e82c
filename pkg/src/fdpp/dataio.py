"""JSONL trajectory logs and artifact metadata sidecars."""

from __future__ import annotations

import json
import os

import numpy as np

from . import envs


def write_jsonl(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_meta(path, meta: dict) -> None:
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def trajectory_records(
    episode_index: int,
    states: list,
    actions: list,
    config: envs.EnvConfig,
) -> list[dict]:
    """One record per step plus a terminal record with a null action."""
    records = []
    for t, (state, action) in enumerate(zip(states[:-1], actions)):
        records.append(
            {
                "episode": episode_index,
                "t": t,
                "state": state.to_json(),
                "action": np.asarray(action, dtype=float).tolist(),
                "done": False,
                "features": envs.state_features(state, config),
            }
        )
    terminal = states[-1]
    records.append(
        {
            "episode": episode_index,
            "t": terminal.t,
            "state": terminal.to_json(),
            "action": None,
            "done": True,
            "features": envs.state_features(terminal, config),
        }
    )
    return records


def group_trajectories(records: list[dict]) -> list[list[dict]]:
    """Split a flat trajectory log back into per-episode record lists."""
    episodes: dict[int, list[dict]] = {}
    for rec in records:
        episodes.setdefault(rec["episode"], []).append(rec)
    return [sorted(v, key=lambda r: r["t"]) for _, v in sorted(episodes.items())]


def trajectory_to_arrays(traj: list[dict], config: envs.EnvConfig):
    """(states, actions) arrays for behavior cloning from one episode."""
    states = [envs.state_from_json(config.env_id, rec["state"]) for rec in traj]
    actions = [np.asarray(rec["action"], dtype=float) for rec in traj if rec["action"] is not None]
    return np.stack([s.obs() for s in states]), np.stack(actions)
