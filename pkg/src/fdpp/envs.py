"""Two deterministic 2D manipulation environments in the unit workspace.

push-block: a disc pusher shoves a disc block toward a fixed goal; the
episode starts inside a forbidden rectangle so that demonstrations violate
the region preference. place-align: a directly controlled block pose must
be carried near a fixed target pose and released.

Environments are value-semantic: `step` returns a new state and never
touches globals, so many instances can run in parallel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

Array = np.ndarray

PUSH_BLOCK = "push-block"
PLACE_ALIGN = "place-align"
ENV_IDS = (PUSH_BLOCK, PLACE_ALIGN)

FEATURES = {
    PUSH_BLOCK: ("region_occupancy",),
    PLACE_ALIGN: ("displacement", "misalignment"),
}


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    env_id: str
    max_steps: int = 200
    seed: int = 0
    # geometry (unit workspace)
    pusher_radius: float = 0.03
    block_radius: float = 0.06
    goal: tuple[float, float] = (0.15, 0.85)
    region: tuple[float, float, float, float] = (0.55, 0.95, 0.05, 0.45)  # x0,x1,y0,y1
    target: tuple[float, float, float] = (0.5, 0.5, 0.0)  # x,y,phi
    # success tolerances
    push_success_dist: float = 0.05
    place_success_dist: float = 0.08
    # per-step caps
    max_step_pos: float = 0.02
    max_step_angle: float = 0.1
    # steps allowed to leave the forbidden region before the
    # constraint-satisfaction metric starts counting violations
    grace_steps: int = 12

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise EnvError(f"unknown env {self.env_id!r}")
        if self.max_steps < 1:
            raise EnvError("max_steps must be >= 1")
        x0, x1, y0, y1 = self.region
        gx, gy = self.goal
        # forbidden region must not touch the goal disc
        dx = max(x0 - gx, 0.0, gx - x1)
        dy = max(y0 - gy, 0.0, gy - y1)
        if math.hypot(dx, dy) <= self.push_success_dist:
            raise EnvError("forbidden region overlaps the goal disc")

    @property
    def contact_dist(self) -> float:
        return self.pusher_radius + self.block_radius

    @property
    def action_dim(self) -> int:
        return 2 if self.env_id == PUSH_BLOCK else 4

    @property
    def state_dim(self) -> int:
        return 4 if self.env_id == PUSH_BLOCK else 5

    def to_json(self) -> dict:
        return {
            "env_id": self.env_id,
            "max_steps": self.max_steps,
            "seed": self.seed,
            "pusher_radius": self.pusher_radius,
            "block_radius": self.block_radius,
            "goal": list(self.goal),
            "region": list(self.region),
            "target": list(self.target),
            "push_success_dist": self.push_success_dist,
            "place_success_dist": self.place_success_dist,
            "max_step_pos": self.max_step_pos,
            "max_step_angle": self.max_step_angle,
            "grace_steps": self.grace_steps,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EnvConfig":
        kw = dict(obj)
        kw["goal"] = tuple(kw["goal"])
        kw["region"] = tuple(kw["region"])
        kw["target"] = tuple(kw["target"])
        return cls(**kw)


def make_env_config(env_id: str, **overrides) -> EnvConfig:
    return EnvConfig(env_id=env_id, **overrides)


def wrap_angle(phi: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(phi + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class PushState:
    pusher: tuple[float, float]
    block: tuple[float, float]
    t: int = 0

    def obs(self) -> Array:
        return np.array([*self.pusher, *self.block])

    def to_json(self) -> dict:
        return {"pusher": list(self.pusher), "block": list(self.block), "t": self.t}

    @classmethod
    def from_json(cls, obj: dict) -> "PushState":
        return cls(pusher=tuple(obj["pusher"]), block=tuple(obj["block"]), t=int(obj["t"]))


@dataclass(frozen=True)
class PlaceState:
    pose: tuple[float, float, float]  # x, y, phi in (-pi, pi]
    target: tuple[float, float, float]
    released: bool = False
    t: int = 0

    def obs(self) -> Array:
        x, y, phi = self.pose
        return np.array([x, y, math.cos(phi), math.sin(phi), 1.0 if self.released else 0.0])

    def to_json(self) -> dict:
        return {
            "pose": list(self.pose),
            "target": list(self.target),
            "released": self.released,
            "t": self.t,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlaceState":
        return cls(
            pose=tuple(obj["pose"]),
            target=tuple(obj["target"]),
            released=bool(obj["released"]),
            t=int(obj["t"]),
        )


State = PushState | PlaceState


def state_from_json(env_id: str, obj: dict) -> State:
    return PushState.from_json(obj) if env_id == PUSH_BLOCK else PlaceState.from_json(obj)


def reset(config: EnvConfig, seed: int) -> State:
    """Draw the initial state; deterministic in (config.env_id, seed)."""
    rng = np.random.default_rng([config.seed, seed, 0xE57])
    if config.env_id == PUSH_BLOCK:
        px = rng.uniform(0.80, 0.95)
        py = rng.uniform(0.05, 0.20)
        bx = rng.uniform(0.45, 0.55)
        by = rng.uniform(0.45, 0.55)
        return PushState(pusher=(px, py), block=(bx, by), t=0)
    # area-uniform draw in the annulus around the target
    r = math.sqrt(rng.uniform(0.25**2, 0.4**2))
    theta = rng.uniform(-math.pi, math.pi)
    cx, cy, _ = config.target
    phi = rng.uniform(-math.pi, math.pi)
    if phi == -math.pi:
        phi = math.pi
    return PlaceState(
        pose=(cx + r * math.cos(theta), cy + r * math.sin(theta), phi),
        target=config.target,
        released=False,
        t=0,
    )


def success(state: State, config: EnvConfig) -> bool:
    if isinstance(state, PushState):
        return math.dist(state.block, config.goal) <= config.push_success_dist
    dx = state.pose[0] - state.target[0]
    dy = state.pose[1] - state.target[1]
    return state.released and math.hypot(dx, dy) <= config.place_success_dist


def is_terminal(state: State, config: EnvConfig) -> bool:
    if state.t >= config.max_steps or success(state, config):
        return True
    return isinstance(state, PlaceState) and state.released


def in_region(point: tuple[float, float], config: EnvConfig) -> bool:
    x0, x1, y0, y1 = config.region
    return x0 <= point[0] <= x1 and y0 <= point[1] <= y1


def feature(state: State, feature_id: str, config: EnvConfig) -> float:
    if feature_id == "region_occupancy":
        if not isinstance(state, PushState):
            raise EnvError("region_occupancy is a push-block feature")
        return 1.0 if in_region(state.pusher, config) else 0.0
    if feature_id == "displacement":
        if not isinstance(state, PlaceState):
            raise EnvError("displacement is a place-align feature")
        return math.hypot(state.pose[0] - state.target[0], state.pose[1] - state.target[1])
    if feature_id == "misalignment":
        if not isinstance(state, PlaceState):
            raise EnvError("misalignment is a place-align feature")
        return abs(wrap_angle(state.pose[2] - state.target[2]))
    raise EnvError(f"unknown feature {feature_id!r}")


def state_features(state: State, config: EnvConfig) -> dict[str, float]:
    return {fid: feature(state, fid, config) for fid in FEATURES[config.env_id]}


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


def _resolve_contact(pusher: Array, block: Array, push_dir: Array, contact: float) -> Array:
    normal = block - pusher
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        # degenerate overlap: eject along the pusher's motion (or +x)
        normal = push_dir if np.linalg.norm(push_dir) > 1e-12 else np.array([1.0, 0.0])
        norm = np.linalg.norm(normal)
    return pusher + contact * normal / norm


def _slide_on_walls(pusher: Array, desired: Array, contact: float) -> Array:
    """Closest point to `desired` at exact contact distance from the pusher
    that lies inside the unit square. Used when the straight normal
    resolution leaves the workspace."""
    candidates = []
    px, py = pusher
    for wall_x in (0.0, 1.0):
        dy2 = contact**2 - (wall_x - px) ** 2
        if dy2 >= 0.0:
            for s in (1.0, -1.0):
                y = py + s * math.sqrt(dy2)
                if 0.0 <= y <= 1.0:
                    candidates.append(np.array([wall_x, y]))
    for wall_y in (0.0, 1.0):
        dx2 = contact**2 - (wall_y - py) ** 2
        if dx2 >= 0.0:
            for s in (1.0, -1.0):
                x = px + s * math.sqrt(dx2)
                if 0.0 <= x <= 1.0:
                    candidates.append(np.array([x, wall_y]))
    if not candidates:  # cannot happen for contact < 0.5 with pusher inside
        raise EnvError("no feasible block placement on workspace boundary")
    dists = [np.linalg.norm(c - desired) for c in candidates]
    return candidates[int(np.argmin(dists))]


def step(state: State, action: Array, config: EnvConfig) -> tuple[State, bool, dict]:
    """Apply one action. Components are clipped to [-1, 1] and scaled by the
    per-env caps. Raises if the state is already terminal."""
    if is_terminal(state, config):
        raise EnvError(f"step on terminal state (t={state.t})")
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    if a.shape != (config.action_dim,):
        raise EnvError(f"action shape {a.shape} != ({config.action_dim},)")

    if isinstance(state, PushState):
        delta = a * config.max_step_pos
        pusher = np.array(state.pusher) + delta
        pusher = np.array([_clamp01(pusher[0]), _clamp01(pusher[1])])
        block = np.array(state.block)
        contact = config.contact_dist
        if np.linalg.norm(pusher - block) < contact:
            block = _resolve_contact(pusher, block, delta, contact)
            clamped = np.array([_clamp01(block[0]), _clamp01(block[1])])
            if np.linalg.norm(pusher - clamped) < contact - 1e-12:
                # block hit a wall: slide it along the boundary, one pass
                clamped = _slide_on_walls(pusher, block, contact)
            block = clamped
        nxt: State = PushState(pusher=tuple(pusher), block=tuple(block), t=state.t + 1)
    else:
        x, y, phi = state.pose
        x = _clamp01(x + a[0] * config.max_step_pos)
        y = _clamp01(y + a[1] * config.max_step_pos)
        phi = wrap_angle(phi + a[2] * config.max_step_angle)
        released = bool(a[3] > 0.5)
        nxt = PlaceState(
            pose=(x, y, phi), target=state.target, released=released, t=state.t + 1
        )

    done = is_terminal(nxt, config)
    info = {"success": success(nxt, config), "t": nxt.t}
    return nxt, done, info


# ---------------------------------------------------------------------------
# scripted experts
# ---------------------------------------------------------------------------

_EXPERT_SALT = 0xB10C


def expert_residuals(config: EnvConfig, seed: int) -> tuple[float, float]:
    """Per-episode release-distance and angle residuals for place-align.

    The release radius is capped just inside the success tolerance so the
    expert cannot release itself into a failure.
    """
    rng = np.random.default_rng([config.seed, seed, _EXPERT_SALT])
    radius = min(abs(rng.normal(0.06, 0.02)), config.place_success_dist - 0.005)
    angle = rng.uniform(-0.6, 0.6)
    return radius, angle


def _toward(v: Array, max_step: float) -> Array:
    """Normalized action moving exactly along v (full speed when far)."""
    n = np.linalg.norm(v)
    return v / max(n, max_step)


def scripted_expert(state: State, config: EnvConfig, seed: int) -> Array:
    """Deterministic demonstration policy; see expert_residuals for the
    place-align release behavior."""
    if isinstance(state, PushState):
        p = np.array(state.pusher)
        b = np.array(state.block)
        g = np.array(config.goal)
        away = b - g
        away = away / max(np.linalg.norm(away), 1e-12)
        approach = b + config.contact_dist * away
        if np.linalg.norm(p - approach) > config.max_step_pos:
            return _toward(approach - p, config.max_step_pos)
        # in pushing position: aim slightly inside the contact point
        push_target = b + (config.contact_dist - 0.01) * away
        return _toward(push_target - p, config.max_step_pos)

    radius, angle_res = expert_residuals(config, seed)
    x, y, phi = state.pose
    tx, ty, tphi = state.target
    v = np.array([tx - x, ty - y])
    dist = np.linalg.norm(v)
    if dist <= radius:
        # release in place: the releasing action carries no motion
        return np.array([0.0, 0.0, 0.0, 1.0])
    a_xy = _toward(v, config.max_step_pos)
    err = wrap_angle(tphi - phi)
    if abs(err) > abs(angle_res):
        a_phi = float(np.clip(err / config.max_step_angle, -1.0, 1.0))
    else:
        a_phi = 0.0
    return np.array([a_xy[0], a_xy[1], a_phi, -1.0])


def rollout_episode(action_fn, config: EnvConfig, seed: int, max_steps: int | None = None):
    """Run one episode with `action_fn(state, t) -> action`.

    Returns (states, actions, infos): len(states) == len(actions) + 1.
    """
    state = reset(config, seed)
    states = [state]
    actions: list[Array] = []
    infos: list[dict] = []
    limit = config.max_steps if max_steps is None else max_steps
    while not is_terminal(state, config) and state.t < limit:
        a = np.asarray(action_fn(state, state.t), dtype=np.float64)
        state, done, info = step(state, a, config)
        states.append(state)
        actions.append(a)
        infos.append(info)
        if done:
            break
    return states, actions, infos


def expert_episode(config: EnvConfig, seed: int):
    return rollout_episode(lambda s, t: scripted_expert(s, config, seed), config, seed)


def demo_episode(config: EnvConfig, seed: int, noise_scale: float = 0.2):
    """Expert episode with zero-mean action jitter, logged as executed.

    The jitter widens the visited-state tube so a cloned policy sees
    recovery behavior; the expert re-plans every step, so success is
    unaffected at these scales.
    """
    rng = np.random.default_rng([config.seed, seed, 0xDA87])

    def act(state, t):
        a = scripted_expert(state, config, seed)
        if noise_scale > 0.0:
            a = np.clip(a + noise_scale * rng.standard_normal(a.shape), -1.0, 1.0)
        return a

    return rollout_episode(act, config, seed)


# ---------------------------------------------------------------------------
# scene descriptions for rendering / labeling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    kind: str  # disc | oriented-rectangle | region | marker
    position: tuple[float, float]
    size: tuple[float, ...]
    angle: float
    color: str
    label: str

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "position": list(self.position),
            "size": list(self.size),
            "angle": self.angle,
            "color": self.color,
            "label": self.label,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Primitive":
        return cls(
            kind=obj["kind"],
            position=tuple(obj["position"]),
            size=tuple(obj["size"]),
            angle=float(obj["angle"]),
            color=obj["color"],
            label=obj["label"],
        )


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]

    def to_json(self) -> list:
        return [p.to_json() for p in self.primitives]

    @classmethod
    def from_json(cls, obj: list) -> "SceneSpec":
        return cls(primitives=tuple(Primitive.from_json(p) for p in obj))


def render_scene(state: State, config: EnvConfig) -> SceneSpec:
    """Self-contained drawable description of a state; a renderer needs no
    knowledge of the environment."""
    prims: list[Primitive] = [
        Primitive("region", (0.0, 0.0), (1.0, 1.0), 0.0, "black", "workspace")
    ]
    if isinstance(state, PushState):
        x0, x1, y0, y1 = config.region
        prims.append(Primitive("region", (x0, y0), (x1 - x0, y1 - y0), 0.0, "red", "forbidden_region"))
        prims.append(Primitive("disc", config.goal, (config.push_success_dist,), 0.0, "green", "goal"))
        prims.append(Primitive("disc", state.pusher, (config.pusher_radius,), 0.0, "blue", "pusher"))
        prims.append(Primitive("disc", state.block, (config.block_radius,), 0.0, "gray", "block"))
    else:
        tx, ty, tphi = state.target
        x, y, phi = state.pose
        prims.append(Primitive("oriented-rectangle", (tx, ty), (0.12, 0.06), tphi, "green", "target"))
        prims.append(Primitive("oriented-rectangle", (x, y), (0.12, 0.06), phi, "red", "block"))
        prims.append(
            Primitive(
                "marker", (x, y), (0.01,), 0.0,
                "purple" if state.released else "orange",
                "released" if state.released else "carried",
            )
        )
    return SceneSpec(primitives=tuple(prims))
