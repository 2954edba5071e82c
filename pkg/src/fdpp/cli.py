"""Command-line pipeline: pretrain, rollout, pairs, labeling, reward
training, fine-tuning, evaluation, and reporting.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import envs
from .config import RunConfig, default_config, load_config, save_config
from .dataio import (
    group_trajectories,
    read_jsonl,
    trajectory_records,
    trajectory_to_arrays,
    write_jsonl,
    write_meta,
)
from .diffusion import (
    DiffusionPolicy,
    NormStats,
    build_windows,
    conditioning_from,
    make_policy,
    sample_action_sequence,
    schedule_make,
    train_bc,
)
from .finetune import eval_policy, finetune_loop, episode_seed
from .numgrad import load_checkpoint, save_checkpoint
from .preference import (
    RewardModel,
    label_histogram,
    oracle_label,
    read_records,
    sample_pairs,
    train_reward,
    write_records,
)

ROLLOUT_SEED_BASE = 500


class ValidationError(Exception):
    pass


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        env_id = getattr(args, "env", None)
        if not env_id:
            raise ValidationError("need --config or --env")
        cfg = default_config(env_id)
    if getattr(args, "env", None):
        if cfg.env.env_id != args.env:
            cfg = default_config(args.env)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "alpha", None) is not None:
        cfg.finetune.alpha = args.alpha
    if getattr(args, "iterations", None) is not None:
        cfg.finetune.iterations = args.iterations
    if getattr(args, "episodes", None) is not None:
        cfg.finetune.episodes_per_iter = args.episodes
    if getattr(args, "demos", None) is not None:
        cfg.pretrain.demos = args.demos
    if getattr(args, "bc_steps", None) is not None:
        cfg.pretrain.bc_steps = args.bc_steps
    if getattr(args, "pairs_n", None) is not None:
        cfg.preference.n_pairs = args.pairs_n
    if getattr(args, "feature", None) is not None:
        cfg.preference.feature_id = args.feature
    return cfg


def _load_policy(path) -> DiffusionPolicy:
    spec, params, extra = load_checkpoint(path)
    return DiffusionPolicy.from_checkpoint(spec, params, extra)


def _load_reward(path) -> RewardModel:
    spec, params, extra = load_checkpoint(path)
    return RewardModel.from_checkpoint(spec, params, extra)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"missing {what}: {p}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    ws = Path(args.out)
    ws.mkdir(parents=True, exist_ok=True)
    save_config(ws / "config.json", cfg)
    meta = cfg.meta("pretrain")

    records = []
    episodes = []
    for i in range(cfg.pretrain.demos):
        states, actions, _ = envs.demo_episode(cfg.env, i, cfg.pretrain.demo_noise)
        records.extend(trajectory_records(i, states, actions, cfg.env))
        episodes.append((np.stack([s.obs() for s in states]), np.stack(actions)))
    write_jsonl(ws / "demos.jsonl", records)
    write_meta(ws / "demos.jsonl", meta)

    state_norm = NormStats.fit(np.concatenate([s for s, _ in episodes]))
    action_norm = NormStats.fit(np.concatenate([a for _, a in episodes]))
    normed = [(state_norm.normalize(s), action_norm.normalize(a)) for s, a in episodes]
    d = cfg.diffusion
    ws_arr, wa_arr = build_windows(normed, d.t_s, d.t_p)
    schedule = schedule_make(d.K, d.beta_1, d.beta_K, d.k_ddim, d.eta)
    policy = make_policy(
        state_dim=cfg.env.state_dim, action_dim=cfg.env.action_dim, schedule=schedule,
        seed=cfg.seed, t_s=d.t_s, t_p=d.t_p, t_a=d.t_a, hidden=d.hidden,
        activation=d.activation, emb_dim=d.emb_dim,
        state_norm=state_norm, action_norm=action_norm,
    )
    curve = train_bc(
        policy, ws_arr, wa_arr,
        steps=cfg.pretrain.bc_steps, batch_size=cfg.pretrain.batch,
        lr=cfg.pretrain.lr, seed=cfg.seed,
    )
    write_jsonl(ws / "bc_curve.jsonl", curve)
    write_meta(ws / "bc_curve.jsonl", meta)
    save_checkpoint(
        ws / "policy.json", policy.spec, policy.params,
        extra=policy.to_checkpoint_extra() | {"meta": meta},
    )
    print(f"pretrain: {len(episodes)} demos, {ws_arr.shape[0]} windows, "
          f"final loss {curve[-1]['loss']:.4f} -> {ws / 'policy.json'}")
    return 0


def rollout_policy_to_file(policy, cfg, n, out_path, meta, seed_base=ROLLOUT_SEED_BASE):
    records = []
    for e in range(n):
        ep_seed = episode_seed(seed_base + cfg.seed, e)
        rng = np.random.default_rng([cfg.env.seed, ep_seed, 0xA01])
        state = envs.reset(cfg.env, ep_seed)
        recent = [state.obs()]
        states = [state]
        actions = []
        while not envs.is_terminal(state, cfg.env):
            cond = conditioning_from(policy, recent)
            a_norm, _ = sample_action_sequence(policy, cond, rng)
            plan = policy.action_norm.denormalize(
                a_norm.reshape(policy.t_p, policy.action_dim)[: policy.t_a]
            )
            for j in range(policy.t_a):
                if envs.is_terminal(state, cfg.env):
                    break
                state, _, _ = envs.step(state, plan[j], cfg.env)
                states.append(state)
                actions.append(np.clip(plan[j], -1.0, 1.0))
                recent.append(state.obs())
        records.extend(trajectory_records(e, states, actions, cfg.env))
    write_jsonl(out_path, records)
    write_meta(out_path, meta)
    return records


def cmd_rollout(args) -> int:
    cfg = _resolve_config(args)
    policy = _load_policy(_require(args.policy, "policy checkpoint"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    records = rollout_policy_to_file(policy, cfg, args.n, out, cfg.meta("rollout"))
    episodes = len({r["episode"] for r in records})
    print(f"rollout: {episodes} episodes, {len(records)} records -> {out}")
    return 0


def cmd_pairs(args) -> int:
    cfg = _resolve_config(args)
    rollouts = _require(args.rollouts, "rollout file")
    trajectories = group_trajectories(read_jsonl(rollouts))
    pairs = sample_pairs(trajectories, cfg.preference.n_pairs, seed=cfg.seed, config=cfg.env)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_records(out, pairs)
    write_meta(out, cfg.meta("pairs"))
    print(f"pairs: {len(pairs)} -> {out}")
    return 0


def cmd_label_auto(args) -> int:
    cfg = _resolve_config(args)
    pairs = read_records(_require(args.pairs, "pairs file"))
    feature_id = args.feature or cfg.preference.feature_id
    for rec in pairs:
        rec.label = oracle_label(rec, feature_id, cfg.env)
        rec.source = "oracle"
        rec.timestamp = 0.0
    out = Path(args.out)
    write_records(out, pairs)
    write_meta(out, cfg.meta("label-auto") | {"feature_id": feature_id})
    hist = label_histogram(pairs)
    print(f"label-auto[{feature_id}]: {hist} -> {out}")
    return 0


def cmd_label_serve(args) -> int:
    from .server import serve

    pairs = _require(args.pairs, "pairs file")
    ui_dir = args.ui_dir
    if ui_dir is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = candidate if candidate.is_dir() else None
    print(f"label-serve: http://127.0.0.1:{args.port} (pairs={pairs}, out={args.out}, "
          f"ui={ui_dir or 'API only'})")
    serve(pairs, args.out, args.port, ui_dir=ui_dir)
    return 0


def cmd_reward_train(args) -> int:
    cfg = _resolve_config(args)
    records = read_records(_require(args.labels, "labels file"))
    p = cfg.preference
    feature_id = args.feature or p.feature_id
    model, report = train_reward(
        records, cfg.env, feature_id, seed=cfg.seed,
        epochs=p.epochs, lr=p.lr, hidden=p.hidden, activation=p.activation,
        holdout_frac=p.holdout_frac,
    )
    out = Path(args.out)
    save_checkpoint(
        out, model.spec, model.params,
        extra=model.to_checkpoint_extra() | {"meta": cfg.meta("reward-train"), "report": report.to_json()},
    )
    print(f"reward-train[{feature_id}]: holdout accuracy {report.holdout_accuracy:.3f} "
          f"({report.n_holdout} pairs) -> {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    policy = _load_policy(_require(args.policy, "policy checkpoint"))
    reward = _load_reward(_require(args.reward, "reward checkpoint"))
    cfg.finetune.seed = cfg.seed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(args.metrics) if args.metrics else out.parent / "finetune_metrics.jsonl"

    def log(rec):
        msg = (f"iter {rec['iter']:3d} reward {rec['mean_reward']:+.3f} "
               f"kl {rec['kl_mean']:.4f} success {rec['success_rate']:.2f}")
        if rec.get("constraint_frac") is not None:
            msg += f" constraint {rec['constraint_frac']:.2f}"
        if rec.get("displacement_term") is not None:
            msg += f" disp_term {rec['displacement_term']:.3f}"
        print(msg, flush=True)

    policy, _ = finetune_loop(
        policy, reward, cfg.env, cfg.finetune,
        metrics_path=metrics_path, log=log if args.verbose else None,
    )
    meta = cfg.meta("finetune") | {"alpha": cfg.finetune.alpha}
    save_checkpoint(out, policy.spec, policy.params,
                    extra=policy.to_checkpoint_extra() | {"meta": meta})
    write_meta(metrics_path, meta)
    print(f"finetune: alpha={cfg.finetune.alpha}, {cfg.finetune.iterations} iterations -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    policy = _load_policy(_require(args.policy, "policy checkpoint"))
    reference = _load_policy(_require(args.reference, "reference checkpoint")) if args.reference else None
    n = args.n or cfg.eval.episodes
    seed = args.eval_seed if args.eval_seed is not None else cfg.eval.seed
    metrics = eval_policy(policy, cfg.env, n, seed, reference=reference)
    report = {
        "meta": cfg.meta("eval") | {"policy": str(args.policy), "episodes": n, "eval_seed": seed},
        "metrics": metrics.to_json(),
    }
    out = Path(args.out)
    with open(out, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"eval[{Path(args.policy).name}]: success {metrics.success_rate:.2f} "
          f"len {metrics.rollout_len:.1f} -> {out}")
    return 0


def cmd_report(args) -> int:
    from .report import build_report

    written = build_report(args.workspace, args.out)
    for path in written:
        print(f"report: {path}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _resolve_config(args)
    ws = Path(args.out)
    ws.mkdir(parents=True, exist_ok=True)

    ns = argparse.Namespace(**vars(args))
    ns.out = str(ws)
    cmd_pretrain(ns)

    cfg = load_config(ws / "config.json")
    policy = _load_policy(ws / "policy.json")
    rollout_policy_to_file(
        policy, cfg, cfg.preference.rollout_episodes, ws / "rollouts.jsonl", cfg.meta("rollout")
    )

    pairs_ns = argparse.Namespace(config=str(ws / "config.json"), env=None, seed=None,
                                  rollouts=str(ws / "rollouts.jsonl"), out=str(ws / "pairs.jsonl"),
                                  pairs_n=None, feature=None)
    cmd_pairs(pairs_ns)

    label_ns = argparse.Namespace(config=str(ws / "config.json"), env=None, seed=None,
                                  pairs=str(ws / "pairs.jsonl"), out=str(ws / "labels.jsonl"),
                                  feature=None)
    cmd_label_auto(label_ns)

    reward_ns = argparse.Namespace(config=str(ws / "config.json"), env=None, seed=None,
                                   labels=str(ws / "labels.jsonl"), out=str(ws / "reward.json"),
                                   feature=None)
    cmd_reward_train(reward_ns)

    ft_ns = argparse.Namespace(config=str(ws / "config.json"), env=None, seed=None,
                               policy=str(ws / "policy.json"), reward=str(ws / "reward.json"),
                               out=str(ws / "finetuned.json"),
                               metrics=str(ws / "finetune_metrics.jsonl"),
                               alpha=args.alpha, iterations=args.iterations,
                               episodes=args.episodes, verbose=args.verbose)
    cmd_finetune(ft_ns)

    for name, ckpt in (("eval_pretrained", "policy.json"), ("eval_finetuned", "finetuned.json")):
        ev_ns = argparse.Namespace(config=str(ws / "config.json"), env=None, seed=None,
                                   policy=str(ws / ckpt), reference=str(ws / "policy.json"),
                                   n=None, eval_seed=None, out=str(ws / f"{name}.json"))
        cmd_eval(ev_ns)

    fine = _load_policy(ws / "finetuned.json")
    rollout_policy_to_file(fine, cfg, 24, ws / "rollouts_finetuned.jsonl", cfg.meta("rollout"))

    rep_ns = argparse.Namespace(workspace=str(ws), out=None)
    cmd_report(rep_ns)
    print(f"pipeline: complete -> {ws}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdpp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, env_required=False):
        p.add_argument("--config", help="run-config JSON; flags override it")
        p.add_argument("--env", choices=list(envs.ENV_IDS), required=env_required)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("pretrain", help="generate demos and train the base policy")
    common(p)
    p.add_argument("--demos", type=int)
    p.add_argument("--bc-steps", dest="bc_steps", type=int)
    p.add_argument("--out", required=True, help="workspace directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("rollout", help="roll out a policy to a trajectory log")
    common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("pairs", help="sample unlabeled preference pairs")
    common(p)
    p.add_argument("--rollouts", required=True)
    p.add_argument("--n", dest="pairs_n", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("label-auto", help="oracle-label a pairs file")
    common(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--feature", choices=["region_occupancy", "displacement", "misalignment"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label_auto)

    p = sub.add_parser("label-serve", help="serve the human labeling UI/API")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True, help="append-only label log")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--ui-dir", dest="ui_dir")
    p.set_defaults(func=cmd_label_serve)

    p = sub.add_parser("reward-train", help="train the preference reward model")
    common(p)
    p.add_argument("--labels", required=True)
    p.add_argument("--feature", choices=["region_occupancy", "displacement", "misalignment"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reward_train)

    p = sub.add_parser("finetune", help="RL fine-tuning against the learned reward")
    common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--reward", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--episodes", type=int, help="episodes per iteration")
    p.add_argument("--metrics")
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--reference", help="pre-trained checkpoint for the KL column")
    p.add_argument("--n", type=int)
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="figures + CSV summary for a workspace")
    p.add_argument("--workspace", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="end-to-end run into one workspace")
    common(p)
    p.add_argument("--demos", type=int)
    p.add_argument("--bc-steps", dest="bc_steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
