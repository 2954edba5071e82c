"""RL fine-tuning of a diffusion policy against a learned preference reward.

Each action-sequence sample is treated as a short episode over its
denoising steps: the reward lands on the final sample, every step shares
the whitened terminal advantage, and the per-step Gaussian densities give
the PPO ratios. A frozen copy of the pre-trained policy anchors the
closed-form per-step KL penalty.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import envs
from .diffusion import (
    DenoisingTrace,
    DiffusionPolicy,
    _eps_to_mean_coeffs,
    conditioning_from,
    sample_action_sequence,
)
from .numgrad import AdamState, ParamStore, adam_step, mlp_value_and_vjp
from .preference import RewardModel, sequence_reward

Array = np.ndarray

LOG_2PI = math.log(2.0 * math.pi)
LOG_RATIO_CLAMP = 20.0


@dataclass
class FinetuneConfig:
    alpha: float = 0.05  # KL weight
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 256
    episodes_per_iter: int = 16
    iterations: int = 150
    lr: float = 1e-5
    seed: int = 0
    whiten_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "FinetuneConfig":
        return cls(**obj)


@dataclass
class DecisionPoint:
    cond: Array  # normalized flattened conditioning
    trace: DenoisingTrace
    executed_states: list  # env states realized by the executed actions
    reward: float
    episode: int
    t: int


@dataclass
class EpisodeRecord:
    states: list
    success: bool
    length: int


@dataclass
class RolloutBatch:
    points: list[DecisionPoint]
    episodes: list[EpisodeRecord]

    def rewards(self) -> Array:
        return np.array([p.reward for p in self.points])


@dataclass
class Metrics:
    success_rate: float
    rollout_len: float
    mean_reward: float | None = None
    constraint_frac: float | None = None
    occupancy: float | None = None
    displacement_avg: float | None = None
    displacement_term: float | None = None
    misalign_avg: float | None = None
    misalign_term: float | None = None
    kl_mean: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def compute_metrics(
    episodes: list[EpisodeRecord],
    config: envs.EnvConfig,
    kl_mean: float | None = None,
    mean_reward: float | None = None,
) -> Metrics:
    success_rate = float(np.mean([e.success for e in episodes]))
    rollout_len = float(np.mean([e.length for e in episodes]))
    m = Metrics(success_rate=success_rate, rollout_len=rollout_len,
                kl_mean=kl_mean, mean_reward=mean_reward)
    if config.env_id == envs.PUSH_BLOCK:
        occ = [
            np.mean([envs.feature(s, "region_occupancy", config) for s in e.states])
            for e in episodes
        ]
        m.occupancy = float(np.mean(occ))
        ok = [
            all(
                envs.feature(s, "region_occupancy", config) == 0.0
                for s in e.states
                if s.t >= config.grace_steps
            )
            for e in episodes
        ]
        m.constraint_frac = float(np.mean(ok))
    else:
        disp = [[envs.feature(s, "displacement", config) for s in e.states] for e in episodes]
        mis = [[envs.feature(s, "misalignment", config) for s in e.states] for e in episodes]
        m.displacement_avg = float(np.mean([np.mean(d) for d in disp]))
        m.displacement_term = float(np.mean([d[-1] for d in disp]))
        m.misalign_avg = float(np.mean([np.mean(x) for x in mis]))
        m.misalign_term = float(np.mean([x[-1] for x in mis]))
    return m


def episode_seed(global_seed: int, index: int) -> int:
    # worker scheduling cannot change this derivation
    return global_seed * 1_000_003 + index


def trace_kl_values(trace: DenoisingTrace) -> list[float]:
    vals = []
    for st in trace.steps:
        if st.stdev <= 0.0:
            raise ValueError("per-step KL undefined for a deterministic step (eta=0)")
        d = st.mean - st.mean_ref
        vals.append(float(d @ d / (2.0 * st.stdev * st.stdev)))
    return vals


def step_kl(policy: DiffusionPolicy, reference: DiffusionPolicy, trace_step, cond: Array) -> float:
    """Closed-form Gaussian KL of one reverse step, recomputed at the
    recorded (noisy input, conditioning, step index)."""
    if trace_step.stdev <= 0.0:
        raise ValueError("per-step KL undefined for a deterministic step (eta=0)")
    ks = np.array([trace_step.k_from])
    s_row = cond[None, :] if policy.t_s else np.zeros((1, 0))
    c_x, c_e, _ = _eps_to_mean_coeffs(policy.schedule, trace_step.k_from, trace_step.k_to)
    mean_new = c_x * trace_step.x_in + c_e * policy.predict_eps(trace_step.x_in[None], s_row, ks)[0]
    mean_ref = c_x * trace_step.x_in + c_e * reference.predict_eps(trace_step.x_in[None], s_row, ks)[0]
    diff = mean_new - mean_ref
    return float(diff @ diff / (2.0 * trace_step.stdev**2))


def collect_rollouts(
    policy: DiffusionPolicy,
    reference: DiffusionPolicy,
    reward_model: RewardModel,
    config: envs.EnvConfig,
    n_episodes: int,
    seed: int,
) -> tuple[RolloutBatch, Metrics]:
    """Roll out the current policy, attaching terminal rewards and both
    current/reference log-probabilities to every denoising trace."""
    points: list[DecisionPoint] = []
    episodes: list[EpisodeRecord] = []
    kl_vals: list[float] = []
    for e in range(n_episodes):
        ep_seed = episode_seed(seed, e)
        rng = np.random.default_rng([config.seed, ep_seed, 0xF17E])
        state = envs.reset(config, ep_seed)
        recent = [state.obs()]
        ep_states = [state]
        while not envs.is_terminal(state, config):
            cond = conditioning_from(policy, recent)
            a_norm, trace = sample_action_sequence(policy, cond, rng, reference=reference)
            plan = policy.action_norm.denormalize(
                a_norm.reshape(policy.t_p, policy.action_dim)[: policy.t_a]
            )
            executed: list = []
            t_decision = state.t
            for j in range(policy.t_a):
                if envs.is_terminal(state, config):
                    break
                state, done, _ = envs.step(state, plan[j], config)
                executed.append(state)
                ep_states.append(state)
                recent.append(state.obs())
            while len(executed) < policy.t_a:  # absorbing terminal state
                executed.append(executed[-1])
            reward = sequence_reward(reward_model, executed, policy.t_a)
            if not math.isfinite(reward):
                raise FloatingPointError(
                    f"non-finite reward at episode {e}, t={t_decision}"
                )
            kl_vals.extend(trace_kl_values(trace))
            points.append(
                DecisionPoint(
                    cond=cond, trace=trace, executed_states=executed,
                    reward=reward, episode=e, t=t_decision,
                )
            )
        episodes.append(
            EpisodeRecord(states=ep_states, success=envs.success(state, config), length=state.t)
        )
    batch = RolloutBatch(points=points, episodes=episodes)
    metrics = compute_metrics(
        episodes, config,
        kl_mean=float(np.mean(kl_vals)) if kl_vals else None,
        mean_reward=float(np.mean(batch.rewards())) if points else None,
    )
    return batch, metrics


def whiten(rewards: Array, enabled: bool = True) -> Array:
    """Zero-mean unit-variance advantages; a singleton batch gets 0."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return r
    if not enabled:
        return r.copy()
    return (r - r.mean()) / (r.std() + 1e-8)


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------


@dataclass
class StepRows:
    """Flattened per-denoising-step tensors for one rollout batch."""

    x_in: Array
    cond: Array
    k_from: Array
    x_out: Array
    mean_ref: Array
    stdev: Array
    logp_old: Array
    advantage: Array
    c_x: Array
    c_e: Array


def flatten_batch(policy: DiffusionPolicy, batch: RolloutBatch, advantages: Array) -> StepRows:
    x_in, cond, k_from, x_out, mean_ref, stdev, logp_old, adv, cxs, ces = (
        [], [], [], [], [], [], [], [], [], [],
    )
    for p, a in zip(batch.points, advantages):
        for st in p.trace.steps:
            x_in.append(st.x_in)
            cond.append(p.cond)
            k_from.append(st.k_from)
            x_out.append(st.x_out)
            mean_ref.append(st.mean_ref)
            stdev.append(st.stdev)
            logp_old.append(st.logp)
            adv.append(a)
            c_x, c_e, _ = _eps_to_mean_coeffs(policy.schedule, st.k_from, st.k_to)
            cxs.append(c_x)
            ces.append(c_e)
    return StepRows(
        x_in=np.asarray(x_in), cond=np.asarray(cond), k_from=np.asarray(k_from),
        x_out=np.asarray(x_out), mean_ref=np.asarray(mean_ref),
        stdev=np.asarray(stdev), logp_old=np.asarray(logp_old),
        advantage=np.asarray(adv), c_x=np.asarray(cxs), c_e=np.asarray(ces),
    )


def policy_gradient(
    policy: DiffusionPolicy,
    rows: StepRows,
    idx: Array,
    alpha: float,
    clip_eps: float,
) -> tuple[float, ParamStore, dict]:
    """Clipped-surrogate loss plus the analytic per-step KL penalty on the
    selected rows; returns (loss, gradients, stats)."""
    n = idx.size
    d = policy.sample_dim
    x_in = rows.x_in[idx]
    ks = rows.k_from[idx]
    stdev = rows.stdev[idx]
    var = stdev * stdev
    net_in = policy.net_input(x_in, rows.cond[idx], ks)
    eps_hat, vjp = mlp_value_and_vjp(policy.spec, policy.params, net_in)
    mean_new = rows.c_x[idx, None] * x_in + rows.c_e[idx, None] * eps_hat

    resid = rows.x_out[idx] - mean_new
    sq = np.sum(resid * resid, axis=1)
    logp_new = -0.5 * d * LOG_2PI - d * np.log(stdev) - sq / (2.0 * var)
    log_ratio = logp_new - rows.logp_old[idx]
    clamped = np.abs(log_ratio) > LOG_RATIO_CLAMP
    ratio = np.exp(np.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))

    adv = rows.advantage[idx]
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surr = np.minimum(surr1, surr2)
    pg_loss = -float(np.mean(surr))

    diff = mean_new - rows.mean_ref[idx]
    kl_vec = np.sum(diff * diff, axis=1) / (2.0 * var)
    kl_loss = float(np.mean(kl_vec))

    loss = pg_loss + alpha * kl_loss
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite PPO loss")

    # gradient through logp where the unclipped branch is active and the
    # log-ratio clamp is not saturated
    active = (surr1 <= surr2) & ~clamped
    coeff = np.where(active, -ratio * adv, 0.0) / n
    d_mean = coeff[:, None] * (resid / var[:, None])
    d_mean += (alpha / n) * diff / var[:, None]
    grads, _ = vjp(d_mean * rows.c_e[idx, None])

    stats = {
        "mean_ratio": float(np.mean(ratio)),
        "clip_frac": float(np.mean((ratio < 1.0 - clip_eps) | (ratio > 1.0 + clip_eps))),
        "kl_mean": kl_loss,
        "pg_loss": pg_loss,
        "clamped_steps": int(np.sum(clamped)),
    }
    return loss, grads, stats


def ppo_update(
    policy: DiffusionPolicy,
    batch: RolloutBatch,
    config: FinetuneConfig,
    opt: AdamState,
    rng: np.random.Generator,
) -> dict:
    """Epochs of minibatch updates over the batch collected under the
    current parameters (stored log-probs are the old policy)."""
    advantages = whiten(batch.rewards(), config.whiten_advantages)
    rows = flatten_batch(policy, batch, advantages)
    n = rows.logp_old.size
    stats_acc: dict[str, float] = {}
    n_mb = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start : start + config.minibatch_size]
            loss, grads, stats = policy_gradient(
                policy, rows, idx, config.alpha, config.clip_eps
            )
            adam_step(policy.params, grads, opt)
            for k, v in stats.items():
                stats_acc[k] = stats_acc.get(k, 0.0) + v
            stats_acc["loss"] = stats_acc.get("loss", 0.0) + loss
            n_mb += 1
    return {k: v / n_mb for k, v in stats_acc.items()} | {"minibatches": n_mb}


def finetune_loop(
    policy: DiffusionPolicy,
    reward_model: RewardModel,
    env_config: envs.EnvConfig,
    config: FinetuneConfig,
    metrics_path=None,
    log=None,
) -> tuple[DiffusionPolicy, list[dict]]:
    """Iterate collect -> whiten -> update; the pre-trained parameters stay
    frozen as the KL reference throughout."""
    reference = policy.clone_params()
    opt = AdamState.for_params(policy.params, lr=config.lr)
    records = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for it in range(config.iterations):
            batch, metrics = collect_rollouts(
                policy, reference, reward_model, env_config,
                config.episodes_per_iter, episode_seed(config.seed, it),
            )
            stats = ppo_update(
                policy, batch, config, opt,
                np.random.default_rng([config.seed, it, 0x9901]),
            )
            rec = {
                "iter": it,
                "mean_reward": metrics.mean_reward,
                "kl_mean": metrics.kl_mean,
                "clip_frac": stats["clip_frac"],
                "success_rate": metrics.success_rate,
                "occupancy": metrics.occupancy,
                "constraint_frac": metrics.constraint_frac,
                "displacement_avg": metrics.displacement_avg,
                "displacement_term": metrics.displacement_term,
                "misalign_avg": metrics.misalign_avg,
                "misalign_term": metrics.misalign_term,
                "rollout_len": metrics.rollout_len,
                "clamped_steps": stats["clamped_steps"],
            }
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec, separators=(",", ":")) + "\n")
                sink.flush()
            if log:
                log(rec)
    finally:
        if sink:
            sink.close()
    return policy, records


def eval_policy(
    policy: DiffusionPolicy,
    config: envs.EnvConfig,
    n_episodes: int,
    seed: int,
    reference: DiffusionPolicy | None = None,
) -> Metrics:
    """Deterministic evaluation rollouts; features are averaged over whole
    trajectories and reported at the terminal state."""
    episodes: list[EpisodeRecord] = []
    kl_vals: list[float] = []
    for e in range(n_episodes):
        ep_seed = episode_seed(seed, e)
        rng = np.random.default_rng([config.seed, ep_seed, 0xE7A1])
        state = envs.reset(config, ep_seed)
        recent = [state.obs()]
        ep_states = [state]
        while not envs.is_terminal(state, config):
            cond = conditioning_from(policy, recent)
            a_norm, trace = sample_action_sequence(policy, cond, rng, reference=reference)
            if reference is not None:
                kl_vals.extend(trace_kl_values(trace))
            plan = policy.action_norm.denormalize(
                a_norm.reshape(policy.t_p, policy.action_dim)[: policy.t_a]
            )
            for j in range(policy.t_a):
                if envs.is_terminal(state, config):
                    break
                state, _, _ = envs.step(state, plan[j], config)
                ep_states.append(state)
                recent.append(state.obs())
        episodes.append(
            EpisodeRecord(states=ep_states, success=envs.success(state, config), length=state.t)
        )
    return compute_metrics(
        episodes, config, kl_mean=float(np.mean(kl_vals)) if kl_vals else None
    )
