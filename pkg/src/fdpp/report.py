"""Comparison report: a metrics CSV plus rendered figures.

Reads whatever a workspace contains (BC curve, fine-tune metrics log,
eval reports, rollout logs, reward checkpoint) and writes a `report/`
directory with one summary.csv and PNG figures.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import envs
from .dataio import group_trajectories, read_jsonl
from .numgrad import load_checkpoint
from .preference import RewardModel

METRIC_COLUMNS = [
    "success_rate", "rollout_len", "constraint_frac", "occupancy",
    "displacement_avg", "displacement_term", "misalign_avg", "misalign_term",
    "kl_mean",
]


def _load_eval(path: Path):
    if not path.is_file():
        return None
    with open(path) as f:
        return json.load(f)


def write_summary_csv(out_path: Path, evals: dict[str, dict]) -> None:
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric"] + list(evals))
        for metric in METRIC_COLUMNS:
            row = [metric]
            for report in evals.values():
                value = report.get("metrics", {}).get(metric)
                row.append("" if value is None else f"{value:.6g}")
            writer.writerow(row)


def plot_bc_curve(curve_path: Path, out_path: Path) -> None:
    records = read_jsonl(curve_path)
    steps = [r["step"] for r in records]
    losses = [r["loss"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("training step")
    ax.set_ylabel("behavior-cloning loss")
    ax.set_title("Pre-training loss")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def plot_finetune_metrics(metrics_path: Path, out_path: Path) -> None:
    records = read_jsonl(metrics_path)
    if not records:
        return
    iters = [r["iter"] for r in records]
    panels = [
        ("mean_reward", "mean sequence reward"),
        ("kl_mean", "per-step KL to pre-trained"),
        ("success_rate", "success rate"),
        ("constraint_frac", "constraint-satisfying fraction"),
        ("displacement_term", "terminal displacement"),
        ("misalign_term", "terminal misalignment [rad]"),
        ("rollout_len", "rollout length"),
        ("clip_frac", "PPO clip fraction"),
    ]
    present = [(k, label) for k, label in panels if any(r.get(k) is not None for r in records)]
    ncols = 2
    nrows = (len(present) + 1) // 2
    fig, axes = plt.subplots(nrows, ncols, figsize=(9, 2.6 * nrows), squeeze=False)
    for ax, (key, label) in zip(axes.ravel(), present):
        ys = [r.get(key) for r in records]
        ax.plot(iters, ys, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    for ax in axes.ravel()[len(present):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def _draw_push_scene(ax, config: envs.EnvConfig) -> None:
    x0, x1, y0, y1 = config.region
    ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, color="red", alpha=0.2, label="forbidden"))
    ax.add_patch(plt.Circle(config.goal, config.push_success_dist, color="green", alpha=0.3, label="goal"))
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")


def plot_trajectories(
    traj_paths: dict[str, Path], config: envs.EnvConfig, out_path: Path, max_episodes: int = 24
) -> None:
    fig, axes = plt.subplots(1, len(traj_paths), figsize=(4.4 * len(traj_paths), 4.2), squeeze=False)
    for ax, (name, path) in zip(axes[0], traj_paths.items()):
        trajs = group_trajectories(read_jsonl(path))[:max_episodes]
        for traj in trajs:
            states = [envs.state_from_json(config.env_id, r["state"]) for r in traj]
            if config.env_id == envs.PUSH_BLOCK:
                xy = np.array([s.pusher for s in states])
            else:
                xy = np.array([s.pose[:2] for s in states])
            ax.plot(xy[:, 0], xy[:, 1], lw=0.8, alpha=0.7)
            ax.plot(xy[-1, 0], xy[-1, 1], "k.", ms=3)
        if config.env_id == envs.PUSH_BLOCK:
            _draw_push_scene(ax, config)
        else:
            tx, ty, _ = config.target
            ax.add_patch(plt.Circle((tx, ty), config.place_success_dist, color="green", alpha=0.3))
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1)
            ax.set_aspect("equal")
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def plot_reward_heatmap(reward_path: Path, config: envs.EnvConfig, out_path: Path, n: int = 80) -> None:
    spec, params, extra = load_checkpoint(reward_path)
    model = RewardModel.from_checkpoint(spec, params, extra)
    xs = np.linspace(0, 1, n)
    ys = np.linspace(0, 1, n)
    grid = np.zeros((n, n))
    for i, y in enumerate(ys):
        if config.env_id == envs.PUSH_BLOCK:
            states = [envs.PushState(pusher=(x, y), block=(0.5, 0.5), t=0) for x in xs]
        else:
            states = [envs.PlaceState(pose=(x, y, 0.0), target=config.target, released=False, t=0) for x in xs]
        grid[i] = model.reward_states(states)
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    im = ax.imshow(grid, origin="lower", extent=(0, 1, 0, 1), cmap="viridis")
    fig.colorbar(im, ax=ax, label="learned reward")
    if config.env_id == envs.PUSH_BLOCK:
        x0, x1, y0, y1 = config.region
        ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, color="red", lw=1.5))
    ax.set_title("Reward over the workspace")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def build_report(workspace, out_dir=None) -> list[str]:
    """Render everything present in the workspace; returns written paths."""
    ws = Path(workspace)
    out = Path(out_dir) if out_dir else ws / "report"
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = ws / "config.json"
    with open(cfg_path) as f:
        env_config = envs.EnvConfig.from_json(json.load(f)["env"])
    written: list[str] = []

    evals = {}
    for name in ("eval_pretrained", "eval_finetuned"):
        report = _load_eval(ws / f"{name}.json")
        if report:
            evals[name.removeprefix("eval_")] = report
    if evals:
        write_summary_csv(out / "summary.csv", evals)
        written.append(str(out / "summary.csv"))

    if (ws / "bc_curve.jsonl").is_file():
        plot_bc_curve(ws / "bc_curve.jsonl", out / "bc_curve.png")
        written.append(str(out / "bc_curve.png"))
    if (ws / "finetune_metrics.jsonl").is_file():
        plot_finetune_metrics(ws / "finetune_metrics.jsonl", out / "finetune_metrics.png")
        written.append(str(out / "finetune_metrics.png"))
    traj_paths = {}
    for name, fname in (("pre-trained", "rollouts.jsonl"), ("fine-tuned", "rollouts_finetuned.jsonl")):
        if (ws / fname).is_file():
            traj_paths[name] = ws / fname
    if traj_paths:
        plot_trajectories(traj_paths, env_config, out / "trajectories.png")
        written.append(str(out / "trajectories.png"))
    if (ws / "reward.json").is_file():
        plot_reward_heatmap(ws / "reward.json", env_config, out / "reward_heatmap.png")
        written.append(str(out / "reward_heatmap.png"))
    return written
