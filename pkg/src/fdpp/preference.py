"""Pairwise preference data and reward learning.

Pairs of single states are compared; the preferred-state probability is a
two-way softmax of a learned scalar reward. Oracle labelers stand in for a
human by comparing task features. Training is full-batch Adam so that runs
are bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import envs
from .numgrad import (
    AdamState,
    MLPSpec,
    ParamStore,
    adam_step,
    init_mlp_params,
    mlp_forward,
    mlp_value_and_vjp,
)
from .diffusion import NormStats

Array = np.ndarray

LABEL_A = 0  # first state preferred
LABEL_B = 1  # second state preferred
LABEL_EQUAL = -1

TIE_TOLERANCE = {"region_occupancy": 0.5, "displacement": 1e-6, "misalignment": 1e-3}


class PreferenceError(ValueError):
    pass


@dataclass
class PreferenceRecord:
    pair_id: str
    state_a: dict  # raw env-state JSON
    state_b: dict
    scene_a: list
    scene_b: list
    label: int | None = None
    source: str | None = None  # oracle | human
    timestamp: float | None = None

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "state_a": self.state_a,
            "state_b": self.state_b,
            "scene_a": self.scene_a,
            "scene_b": self.scene_b,
            "label": self.label,
            "source": self.source,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PreferenceRecord":
        return cls(
            pair_id=obj["pair_id"],
            state_a=obj["state_a"],
            state_b=obj["state_b"],
            scene_a=obj["scene_a"],
            scene_b=obj["scene_b"],
            label=obj.get("label"),
            source=obj.get("source"),
            timestamp=obj.get("timestamp"),
        )


def sample_pairs(
    trajectories: list[list[dict]],
    n: int,
    seed: int,
    config: envs.EnvConfig,
) -> list[PreferenceRecord]:
    """Draw n state pairs uniformly from rollout states.

    States are drawn without replacement within the batch while the pool
    lasts (episodes may contribute repeatedly); scenes are attached so the
    labeling UI needs no environment knowledge.
    """
    pool = [rec["state"] for traj in trajectories for rec in traj]
    if not pool:
        raise PreferenceError("empty trajectory corpus")
    rng = np.random.default_rng([config.seed, seed, 0x9A12])
    need = 2 * n
    if need <= len(pool):
        idx = rng.permutation(len(pool))[:need]
    else:
        idx = rng.integers(0, len(pool), size=need)
    records = []
    for i in range(n):
        sa, sb = pool[int(idx[2 * i])], pool[int(idx[2 * i + 1])]
        st_a = envs.state_from_json(config.env_id, sa)
        st_b = envs.state_from_json(config.env_id, sb)
        records.append(
            PreferenceRecord(
                pair_id=f"p{seed:04d}-{i:05d}",
                state_a=sa,
                state_b=sb,
                scene_a=envs.render_scene(st_a, config).to_json(),
                scene_b=envs.render_scene(st_b, config).to_json(),
            )
        )
    return records


def oracle_label(record: PreferenceRecord, feature_id: str, config: envs.EnvConfig) -> int:
    """Prefer the state with the strictly smaller feature; ties are 'equal'."""
    fa = envs.feature(envs.state_from_json(config.env_id, record.state_a), feature_id, config)
    fb = envs.feature(envs.state_from_json(config.env_id, record.state_b), feature_id, config)
    tol = TIE_TOLERANCE[feature_id]
    if abs(fa - fb) < tol:
        return LABEL_EQUAL
    return LABEL_A if fa < fb else LABEL_B


@dataclass
class RewardModel:
    """Scalar state reward r(s) = net(normalize(obs(s)))."""

    spec: MLPSpec
    params: ParamStore
    norm: NormStats
    feature_id: str
    env_id: str

    def reward_obs(self, obs_batch: Array, params: ParamStore | None = None) -> Array:
        z = self.norm.normalize(np.atleast_2d(obs_batch))
        out = mlp_forward(self.spec, params if params is not None else self.params, z)
        return out[:, 0]

    def reward_states(self, states: list[envs.State]) -> Array:
        obs = np.stack([s.obs() for s in states])
        return self.reward_obs(obs)

    def to_checkpoint_extra(self) -> dict:
        return {
            "norm": self.norm.to_json(),
            "feature_id": self.feature_id,
            "env_id": self.env_id,
        }

    @classmethod
    def from_checkpoint(cls, spec: MLPSpec, params: ParamStore, extra: dict) -> "RewardModel":
        return cls(
            spec=spec,
            params=params,
            norm=NormStats.from_json(extra["norm"]),
            feature_id=extra["feature_id"],
            env_id=extra["env_id"],
        )


def pref_prob(model: RewardModel, obs_a: Array, obs_b: Array) -> float:
    """P[second state preferred], computed in log space (no overflow)."""
    ra = float(model.reward_obs(obs_a[None])[0])
    rb = float(model.reward_obs(obs_b[None])[0])
    return _sigmoid(rb - ra)


def _sigmoid(x: float | Array):
    return np.where(
        np.asarray(x) >= 0,
        1.0 / (1.0 + np.exp(-np.asarray(x))),
        np.exp(np.asarray(x)) / (1.0 + np.exp(np.asarray(x))),
    )


def _batch_arrays(model: RewardModel, batch: list[PreferenceRecord]):
    states_a = [envs.state_from_json(model.env_id, r.state_a) for r in batch]
    states_b = [envs.state_from_json(model.env_id, r.state_b) for r in batch]
    obs_a = np.stack([s.obs() for s in states_a])
    obs_b = np.stack([s.obs() for s in states_b])
    # soft target for P[b preferred]: 1, 0, or 0.5 for ties
    target = np.array(
        [1.0 if r.label == LABEL_B else 0.0 if r.label == LABEL_A else 0.5 for r in batch]
    )
    return obs_a, obs_b, target


def reward_loss(model: RewardModel, batch: list[PreferenceRecord]) -> tuple[float, ParamStore]:
    """Mean preference NLL; ties train toward (0.5, 0.5) soft targets."""
    if not batch:
        raise PreferenceError("empty batch")
    if any(r.label is None for r in batch):
        raise PreferenceError("unlabeled record in training batch")
    obs_a, obs_b, target = _batch_arrays(model, batch)
    n = len(batch)
    za = model.norm.normalize(obs_a)
    zb = model.norm.normalize(obs_b)
    ra, vjp_a = mlp_value_and_vjp(model.spec, model.params, za)
    rb, vjp_b = mlp_value_and_vjp(model.spec, model.params, zb)
    delta = rb[:, 0] - ra[:, 0]
    # stable softplus: log(1 + exp(-|x|)) + max(x, 0)
    softplus = np.log1p(np.exp(-np.abs(delta))) + np.maximum(delta, 0.0)
    loss = float(np.mean(softplus - target * delta))
    p = _sigmoid(delta)
    ddelta = (p - target) / n
    grads_a, _ = vjp_a(-ddelta[:, None])
    grads_b, _ = vjp_b(ddelta[:, None])
    total = ParamStore({name: grads_a[name] + grads_b[name] for name in grads_a})
    return loss, total


@dataclass
class RewardTrainReport:
    train_accuracy: float
    holdout_accuracy: float
    n_train: int
    n_holdout: int
    n_decisive: int
    n_ties: int
    final_loss: float
    curve: list[dict]

    def to_json(self) -> dict:
        return {
            "train_accuracy": self.train_accuracy,
            "holdout_accuracy": self.holdout_accuracy,
            "n_train": self.n_train,
            "n_holdout": self.n_holdout,
            "n_decisive": self.n_decisive,
            "n_ties": self.n_ties,
            "final_loss": self.final_loss,
            "curve": self.curve,
        }


def ranking_accuracy(model: RewardModel, records: list[PreferenceRecord]) -> float:
    decisive = [r for r in records if r.label in (LABEL_A, LABEL_B)]
    if not decisive:
        return float("nan")
    obs_a, obs_b, target = _batch_arrays(model, decisive)
    delta = model.reward_obs(obs_b) - model.reward_obs(obs_a)
    pred = (delta > 0).astype(float)
    return float(np.mean(pred == target))


def train_reward(
    records: list[PreferenceRecord],
    config: envs.EnvConfig,
    feature_id: str,
    seed: int,
    epochs: int = 600,
    lr: float = 1e-3,
    hidden: tuple[int, ...] = (128, 128),
    activation: str = "tanh",
    holdout_frac: float = 0.1,
) -> tuple[RewardModel, RewardTrainReport]:
    """Full-batch Adam on the preference loss with a holdout split by pair id.

    Records are deduplicated by pair id (a pair is labeled at most once),
    which keeps training bit-identical when a dataset is concatenated with
    itself.
    """
    seen: set[str] = set()
    unique_records = []
    for r in records:
        if r.pair_id not in seen:
            seen.add(r.pair_id)
            unique_records.append(r)
    labeled = [r for r in unique_records if r.label in (LABEL_A, LABEL_B, LABEL_EQUAL)]
    decisive = [r for r in labeled if r.label != LABEL_EQUAL]
    if len(decisive) < 2:
        raise PreferenceError("need at least two decisive labels to train")

    # split by pair id so duplicated records stay on one side and training
    # stays bit-identical under duplication (full-batch mean is unchanged)
    rng = np.random.default_rng([config.seed, seed, 0x5EED])
    unique_ids = sorted({r.pair_id for r in labeled})
    order = rng.permutation(len(unique_ids))
    n_holdout = int(round(holdout_frac * len(unique_ids)))
    holdout_ids = {unique_ids[i] for i in order[:n_holdout]}
    holdout = [r for r in labeled if r.pair_id in holdout_ids]
    train = [r for r in labeled if r.pair_id not in holdout_ids]

    obs_dim = config.state_dim
    all_obs = np.stack(
        [envs.state_from_json(config.env_id, r.state_a).obs() for r in labeled]
        + [envs.state_from_json(config.env_id, r.state_b).obs() for r in labeled]
    )
    norm = NormStats.fit(all_obs)
    spec = MLPSpec(input_dim=obs_dim, hidden_dims=hidden, output_dim=1, activation=activation)
    model = RewardModel(
        spec=spec,
        params=init_mlp_params(spec, seed),
        norm=norm,
        feature_id=feature_id,
        env_id=config.env_id,
    )
    opt = AdamState.for_params(model.params, lr=lr)
    curve = []
    loss = float("nan")
    for epoch in range(epochs):
        loss, grads = reward_loss(model, train)
        adam_step(model.params, grads, opt)
        if epoch % 50 == 0 or epoch == epochs - 1:
            curve.append({"epoch": epoch, "loss": loss})
    report = RewardTrainReport(
        train_accuracy=ranking_accuracy(model, train),
        holdout_accuracy=ranking_accuracy(model, holdout),
        n_train=len(train),
        n_holdout=len(holdout),
        n_decisive=len(decisive),
        n_ties=len(labeled) - len(decisive),
        final_loss=loss,
        curve=curve,
    )
    return model, report


def sequence_reward(model: RewardModel, executed_states: list[envs.State], t_a: int) -> float:
    """Sum of per-state rewards over exactly t_a executed states."""
    if len(executed_states) != t_a:
        raise PreferenceError(f"expected {t_a} executed states, got {len(executed_states)}")
    return float(np.sum(model.reward_states(executed_states)))


# ------------------------------------------------------------------ file io

def write_records(path, records: list[PreferenceRecord]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def read_records(path) -> list[PreferenceRecord]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(PreferenceRecord.from_json(json.loads(line)))
    return records


def label_histogram(records: list[PreferenceRecord]) -> dict[str, int]:
    hist = {"a": 0, "b": 0, "equal": 0, "unlabeled": 0}
    for r in records:
        if r.label == LABEL_A:
            hist["a"] += 1
        elif r.label == LABEL_B:
            hist["b"] += 1
        elif r.label == LABEL_EQUAL:
            hist["equal"] += 1
        else:
            hist["unlabeled"] += 1
    return hist
