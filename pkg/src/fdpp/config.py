"""Run configuration: one JSON document drives the whole pipeline.

Every artifact embeds the sha256 of the canonical config JSON plus the
global seed, so outputs can be traced back and re-runs compared byte for
byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

from . import envs
from .finetune import FinetuneConfig

DEFAULT_FEATURES = {"push-block": "region_occupancy", "place-align": "displacement"}


@dataclass
class PretrainConfig:
    demos: int = 200
    bc_steps: int = 12000
    batch: int = 256
    lr: float = 1e-3
    demo_noise: float = 0.2  # action jitter during demo collection

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class DiffusionConfig:
    K: int = 100
    beta_1: float = 1e-4
    beta_K: float = 0.02
    k_ddim: int = 10
    eta: float = 1.0
    t_s: int = 2
    t_p: int = 8
    t_a: int = 4
    hidden: tuple[int, ...] = (256, 256, 256)
    activation: str = "gelu"
    emb_dim: int = 16

    def __post_init__(self):
        self.hidden = tuple(self.hidden)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class PreferenceConfig:
    feature_id: str = "region_occupancy"
    n_pairs: int = 1024
    rollout_episodes: int = 50
    epochs: int = 600
    lr: float = 1e-3
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "tanh"
    holdout_frac: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(self.hidden)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class EvalConfig:
    episodes: int = 100
    seed: int = 1000

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    env: envs.EnvConfig
    seed: int = 0
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    preference: PreferenceConfig = field(default_factory=PreferenceConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_json(self) -> dict:
        return {
            "env": self.env.to_json(),
            "seed": self.seed,
            "pretrain": self.pretrain.to_json(),
            "diffusion": self.diffusion.to_json(),
            "preference": self.preference.to_json(),
            "finetune": self.finetune.to_json(),
            "eval": self.eval.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        return cls(
            env=envs.EnvConfig.from_json(obj["env"]),
            seed=int(obj.get("seed", 0)),
            pretrain=PretrainConfig(**obj.get("pretrain", {})),
            diffusion=DiffusionConfig(**obj.get("diffusion", {})),
            preference=PreferenceConfig(**obj.get("preference", {})),
            finetune=FinetuneConfig(**obj.get("finetune", {})),
            eval=EvalConfig(**obj.get("eval", {})),
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def meta(self, command: str) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed, "command": command}


def default_config(env_id: str, **env_overrides) -> RunConfig:
    cfg = RunConfig(env=envs.make_env_config(env_id, **env_overrides))
    cfg.preference.feature_id = DEFAULT_FEATURES[env_id]
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        return RunConfig.from_json(json.load(f))


def save_config(path, config: RunConfig) -> None:
    with open(path, "w") as f:
        json.dump(config.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
