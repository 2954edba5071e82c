"""Denoising-diffusion machinery and the action-sequence policy.

The noise net predicts the injected noise; step means are derived from it
through the usual posterior-mean identity, which keeps training well
conditioned while the mean form stays available for verification. Sampling
follows the generalized (eta-controlled) scheme over a sub-sequence of the
training steps; eta=1 over consecutive steps reproduces the stochastic
ancestral sampler exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numgrad import (
    AdamState,
    MLPSpec,
    ParamStore,
    ShapeError,
    adam_step,
    init_mlp_params,
    mlp_forward,
    mlp_value_and_vjp,
    timestep_embedding_batch,
)

Array = np.ndarray

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha tables for steps 1..K plus the sampling sub-sequence.

    Arrays are indexed [k-1] for step k. alpha_bar(0) is defined as 1.
    The posterior variance at k=1 degenerates to 0; it is floored (see
    `variance_floor`) so that reverse-step densities stay finite.
    """

    K: int
    betas: Array
    alphas: Array
    alpha_bars: Array
    posterior_var: Array
    ddim_steps: tuple[int, ...]
    eta: float

    @property
    def variance_floor(self) -> float:
        return max(float(self.betas[0]), 1e-8)

    def alpha_bar(self, k: int) -> float:
        return 1.0 if k == 0 else float(self.alpha_bars[k - 1])

    def ddim_pairs(self) -> list[tuple[int, int]]:
        """Descending (k_from, k_to) pairs ending at (tau_1, 0)."""
        seq = (0, *self.ddim_steps)
        return [(seq[i], seq[i - 1]) for i in range(len(seq) - 1, 0, -1)]

    def ddim_base_var(self, k_from: int, k_to: int) -> float:
        ab_f, ab_t = self.alpha_bar(k_from), self.alpha_bar(k_to)
        base = ((1.0 - ab_t) / (1.0 - ab_f)) * (1.0 - ab_f / ab_t)
        if k_to == 0:
            base = max(base, self.variance_floor)
        return base

    def ddim_stdev(self, k_from: int, k_to: int) -> float:
        return self.eta * math.sqrt(self.ddim_base_var(k_from, k_to))

    def is_adjacent(self, k_from: int, k_to: int) -> bool:
        if k_to == k_from - 1 and 1 <= k_from <= self.K:
            return True
        seq = (0, *self.ddim_steps)
        for i in range(1, len(seq)):
            if (seq[i], seq[i - 1]) == (k_from, k_to):
                return True
        return False

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "beta_1": float(self.betas[0]),
            "beta_K": float(self.betas[-1]),
            "k_ddim": len(self.ddim_steps),
            "eta": self.eta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseSchedule":
        return schedule_make(obj["K"], obj["beta_1"], obj["beta_K"], obj["k_ddim"], obj["eta"])


def schedule_make(K: int, beta_1: float, beta_K: float, k_ddim: int, eta: float = 1.0) -> NoiseSchedule:
    """Linear beta spacing; sampling sub-sequence evenly spaced, ending at K."""
    if not (K >= k_ddim >= 1):
        raise ValueError(f"need K >= k_ddim >= 1, got K={K}, k_ddim={k_ddim}")
    if not (0.0 < beta_1 <= beta_K < 1.0):
        raise ValueError(f"need 0 < beta_1 <= beta_K < 1, got {beta_1}, {beta_K}")
    if eta < 0.0:
        raise ValueError("eta must be >= 0")
    betas = np.linspace(beta_1, beta_K, K)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev_bars = np.concatenate([[1.0], alpha_bars[:-1]])
    post_var = (1.0 - prev_bars) / (1.0 - alpha_bars) * betas
    post_var[0] = max(post_var[0], max(beta_1, 1e-8))
    # evenly spaced indices tau_i = round(i*K/k_ddim), i=1..k_ddim
    steps = tuple(int(round(i * K / k_ddim)) for i in range(1, k_ddim + 1))
    if len(set(steps)) != k_ddim or steps[-1] != K:
        raise ValueError(f"degenerate sub-sequence for K={K}, k_ddim={k_ddim}")
    return NoiseSchedule(
        K=K, betas=betas, alphas=alphas, alpha_bars=alpha_bars,
        posterior_var=post_var, ddim_steps=steps, eta=eta,
    )


def forward_sample(schedule: NoiseSchedule, x0: Array, k: int, noise: Array) -> Array:
    if not 1 <= k <= schedule.K:
        raise ValueError(f"k={k} outside 1..{schedule.K}")
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = schedule.alpha_bar(k)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def posterior_mean(schedule: NoiseSchedule, x0: Array, xk: Array, k: int) -> Array:
    """Mean of the forward-process posterior q(x^{k-1} | x^k, x^0)."""
    if not 1 <= k <= schedule.K:
        raise ValueError(f"k={k} outside 1..{schedule.K}")
    ab_k = schedule.alpha_bar(k)
    ab_prev = schedule.alpha_bar(k - 1)
    beta_k = float(schedule.betas[k - 1])
    alpha_k = float(schedule.alphas[k - 1])
    c0 = math.sqrt(ab_prev) * beta_k / (1.0 - ab_k)
    ck = math.sqrt(alpha_k) * (1.0 - ab_prev) / (1.0 - ab_k)
    return c0 * np.asarray(x0) + ck * np.asarray(xk)


@dataclass
class NormStats:
    """Per-dimension affine map to [-1, 1] fitted on the demo min/max."""

    center: Array
    scale: Array

    @classmethod
    def fit(cls, data: Array, floor: float = 1e-6) -> "NormStats":
        data = np.asarray(data, dtype=np.float64).reshape(-1, data.shape[-1]) if data.size else data
        mn, mx = data.min(axis=0), data.max(axis=0)
        center = (mn + mx) / 2.0
        scale = np.maximum((mx - mn) / 2.0, floor)
        return cls(center=center, scale=scale)

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(center=np.zeros(dim), scale=np.ones(dim))

    def normalize(self, x: Array) -> Array:
        return (np.asarray(x, dtype=np.float64) - self.center) / self.scale

    def denormalize(self, x: Array) -> Array:
        return np.asarray(x, dtype=np.float64) * self.scale + self.center

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        return cls(center=np.asarray(obj["center"]), scale=np.asarray(obj["scale"]))


@dataclass
class DiffusionPolicy:
    """Noise-prediction net plus schedule, horizons, and normalization."""

    spec: MLPSpec
    params: ParamStore
    schedule: NoiseSchedule
    t_s: int  # observed states
    t_p: int  # predicted actions
    t_a: int  # executed actions
    state_dim: int
    action_dim: int
    state_norm: NormStats
    action_norm: NormStats
    emb_dim: int = 16

    def __post_init__(self):
        if not (1 <= self.t_a <= self.t_p):
            raise ValueError(f"need 1 <= t_a <= t_p, got {self.t_a}, {self.t_p}")
        if self.t_s < 0:
            raise ValueError("t_s must be >= 0")
        expected_in = self.t_p * self.action_dim + self.t_s * self.state_dim + self.emb_dim
        if self.spec.input_dim != expected_in or self.spec.output_dim != self.t_p * self.action_dim:
            raise ShapeError(
                f"net dims ({self.spec.input_dim}->{self.spec.output_dim}) do not match "
                f"horizons (expect {expected_in}->{self.t_p * self.action_dim})"
            )

    @property
    def sample_dim(self) -> int:
        return self.t_p * self.action_dim

    def net_input(self, a_flat: Array, s_flat: Array, ks: Array) -> Array:
        """Assemble (n, input_dim) rows: [noisy actions, conditioning, k embedding]."""
        emb = timestep_embedding_batch(ks, self.emb_dim)
        if self.t_s == 0:
            return np.concatenate([a_flat, emb], axis=1)
        return np.concatenate([a_flat, s_flat, emb], axis=1)

    def predict_eps(self, a_flat: Array, s_flat: Array, ks: Array, params: ParamStore | None = None) -> Array:
        x = self.net_input(a_flat, s_flat, ks)
        return mlp_forward(self.spec, params if params is not None else self.params, x)

    def clone_params(self) -> "DiffusionPolicy":
        from dataclasses import replace

        return replace(self, params=self.params.copy())

    def to_checkpoint_extra(self) -> dict:
        return {
            "schedule": self.schedule.to_json(),
            "horizons": {
                "t_s": self.t_s, "t_p": self.t_p, "t_a": self.t_a,
                "state_dim": self.state_dim, "action_dim": self.action_dim,
                "emb_dim": self.emb_dim,
            },
            "norm": {"state": self.state_norm.to_json(), "action": self.action_norm.to_json()},
        }

    @classmethod
    def from_checkpoint(cls, spec: MLPSpec, params: ParamStore, extra: dict) -> "DiffusionPolicy":
        h = extra["horizons"]
        return cls(
            spec=spec,
            params=params,
            schedule=NoiseSchedule.from_json(extra["schedule"]),
            t_s=h["t_s"], t_p=h["t_p"], t_a=h["t_a"],
            state_dim=h["state_dim"], action_dim=h["action_dim"],
            emb_dim=h.get("emb_dim", 16),
            state_norm=NormStats.from_json(extra["norm"]["state"]),
            action_norm=NormStats.from_json(extra["norm"]["action"]),
        )


def make_policy(
    state_dim: int,
    action_dim: int,
    schedule: NoiseSchedule,
    seed: int,
    t_s: int = 2,
    t_p: int = 8,
    t_a: int = 4,
    hidden: tuple[int, ...] = (256, 256, 256),
    activation: str = "gelu",
    emb_dim: int = 16,
    state_norm: NormStats | None = None,
    action_norm: NormStats | None = None,
) -> DiffusionPolicy:
    spec = MLPSpec(
        input_dim=t_p * action_dim + t_s * state_dim + emb_dim,
        hidden_dims=hidden,
        output_dim=t_p * action_dim,
        activation=activation,
    )
    # zero final layer: before training, the reverse step is the
    # unconditioned prior mean
    params = init_mlp_params(spec, seed, zero_final=True)
    return DiffusionPolicy(
        spec=spec, params=params, schedule=schedule,
        t_s=t_s, t_p=t_p, t_a=t_a,
        state_dim=state_dim, action_dim=action_dim, emb_dim=emb_dim,
        state_norm=state_norm if state_norm is not None else NormStats.identity(max(state_dim, 1)),
        action_norm=action_norm if action_norm is not None else NormStats.identity(action_dim),
    )


# ---------------------------------------------------------------------------
# behavior-cloning loss
# ---------------------------------------------------------------------------


def bc_loss(
    policy: DiffusionPolicy,
    batch_s: Array,
    batch_a: Array,
    rng: np.random.Generator,
) -> tuple[float, ParamStore]:
    """Noise-matching loss on a batch of normalized windows.

    batch_s: (n, t_s*state_dim) conditioning, batch_a: (n, t_p*action_dim)
    clean action sequences. Per row: one uniform step index and fresh noise.
    Equivalent (up to a per-step rescaling) to matching the posterior mean.
    """
    n = batch_a.shape[0]
    ks = rng.integers(1, policy.schedule.K + 1, size=n)
    noise = rng.standard_normal(batch_a.shape)
    ab = policy.schedule.alpha_bars[ks - 1][:, None]
    x_k = np.sqrt(ab) * batch_a + np.sqrt(1.0 - ab) * noise
    x_in = policy.net_input(x_k, batch_s, ks)
    eps_hat, vjp = mlp_value_and_vjp(policy.spec, policy.params, x_in)
    resid = eps_hat - noise
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite behavior-cloning loss")
    grads, _ = vjp(2.0 * resid / n)
    return loss, grads


def train_bc(
    policy: DiffusionPolicy,
    windows_s: Array,
    windows_a: Array,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    log_every: int = 100,
) -> list[dict]:
    """Adam on bc_loss over random minibatches; returns the loss curve."""
    rng = np.random.default_rng([seed, 0xBC])
    opt = AdamState.for_params(policy.params, lr=lr)
    n = windows_a.shape[0]
    curve = []
    for step_i in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        loss, grads = bc_loss(policy, windows_s[idx], windows_a[idx], rng)
        adam_step(policy.params, grads, opt)
        if step_i % log_every == 0 or step_i == steps - 1:
            curve.append({"step": step_i, "loss": loss})
    return curve


def build_windows(
    episodes: list[tuple[Array, Array]], t_s: int, t_p: int
) -> tuple[Array, Array]:
    """Cut (states, actions) episodes into conditioning/action windows.

    states: (T+1, S), actions: (T, A). Window at t conditions on states
    [t-t_s+1 .. t] (start-padded by repeating the first state) and predicts
    actions [t .. t+t_p-1]. Ends are padded by repeating the final action,
    so terminal behavior (e.g. a release) lands on executed plan positions.
    """
    ws, wa = [], []
    for states, actions in episodes:
        T = actions.shape[0]
        if T < 1:
            continue
        padded = np.concatenate([actions, np.repeat(actions[-1:], t_p - 1, axis=0)])
        for t in range(0, T):
            idx = [max(0, t - i) for i in range(t_s - 1, -1, -1)]
            ws.append(states[idx].ravel())
            wa.append(padded[t : t + t_p].ravel())
    if not ws:
        raise ValueError("no training windows: empty episodes")
    return np.asarray(ws), np.asarray(wa)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class TraceStep:
    k_from: int
    k_to: int
    x_in: Array
    x_out: Array
    mean: Array
    mean_ref: Array
    stdev: float
    logp: float
    logp_ref: float


@dataclass
class DenoisingTrace:
    """Per-step record of one sampled action sequence; the PPO training unit."""

    cond: Array  # flattened normalized conditioning states
    steps: list[TraceStep]

    @property
    def final(self) -> Array:
        return self.steps[-1].x_out

    def validate_chain(self) -> None:
        for a, b in zip(self.steps[:-1], self.steps[1:]):
            if not np.array_equal(a.x_out, b.x_in):
                raise ValueError("trace chain broken: step output != next input")
        for s in self.steps:
            if not (math.isfinite(s.logp) and math.isfinite(s.logp_ref)):
                raise ValueError("non-finite log-probability in trace")


def gaussian_logpdf(x: Array, mean: Array, stdev: float) -> float:
    d = x.size
    resid = x - mean
    return float(-0.5 * d * LOG_2PI - d * math.log(stdev) - resid @ resid / (2.0 * stdev * stdev))


def _eps_to_mean_coeffs(schedule: NoiseSchedule, k_from: int, k_to: int) -> tuple[float, float, float]:
    """mean = c_x * x^k + c_e * eps_hat; returns (c_x, c_e, stdev)."""
    ab_f = schedule.alpha_bar(k_from)
    ab_t = schedule.alpha_bar(k_to)
    stdev = schedule.ddim_stdev(k_from, k_to)
    var = stdev * stdev
    c_noise = math.sqrt(max(1.0 - ab_t - var, 0.0))
    c_x = math.sqrt(ab_t / ab_f)
    c_e = c_noise - math.sqrt(ab_t * (1.0 - ab_f) / ab_f)
    return c_x, c_e, stdev


def reverse_step(
    policy: DiffusionPolicy,
    a_k: Array,
    s_flat: Array,
    k_from: int,
    k_to: int,
    noise: Array,
    params: ParamStore | None = None,
) -> tuple[Array, Array, float]:
    """One generalized reverse step; returns (next sample, mean, stdev)."""
    sched = policy.schedule
    if not sched.is_adjacent(k_from, k_to):
        raise ValueError(f"({k_from}, {k_to}) not adjacent in the sampling sequence")
    a_k = np.asarray(a_k, dtype=np.float64).ravel()
    eps_hat = policy.predict_eps(a_k[None, :], s_flat[None, :] if policy.t_s else np.zeros((1, 0)), np.array([k_from]), params)[0]
    c_x, c_e, stdev = _eps_to_mean_coeffs(sched, k_from, k_to)
    mean = c_x * a_k + c_e * eps_hat
    out = mean + stdev * np.asarray(noise, dtype=np.float64).ravel()
    return out, mean, stdev


def sample_action_sequence(
    policy: DiffusionPolicy,
    s_flat: Array,
    seed_or_rng: int | np.random.Generator,
    reference: DiffusionPolicy | None = None,
) -> tuple[Array, DenoisingTrace]:
    """Sample one action sequence, recording the per-step densities.

    The returned actions are clipped to [-1, 1]; clipping happens after the
    log-probabilities are computed, and the trace keeps the raw chain.
    """
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    sched = policy.schedule
    d = policy.sample_dim
    s_row = np.asarray(s_flat, dtype=np.float64).ravel()[None, :] if policy.t_s else np.zeros((1, 0))
    x = rng.standard_normal(d)
    steps: list[TraceStep] = []
    for k_from, k_to in sched.ddim_pairs():
        ks = np.array([k_from])
        eps_hat = policy.predict_eps(x[None, :], s_row, ks)[0]
        c_x, c_e, stdev = _eps_to_mean_coeffs(sched, k_from, k_to)
        mean = c_x * x + c_e * eps_hat
        z = rng.standard_normal(d)
        out = mean + stdev * z
        if reference is not None:
            eps_ref = reference.predict_eps(x[None, :], s_row, ks)[0]
            mean_ref = c_x * x + c_e * eps_ref
        else:
            mean_ref = mean
        if stdev > 0.0:
            logp = gaussian_logpdf(out, mean, stdev)
            logp_ref = gaussian_logpdf(out, mean_ref, stdev)
        else:
            logp = logp_ref = 0.0  # deterministic step: no density
        steps.append(
            TraceStep(
                k_from=k_from, k_to=k_to, x_in=x, x_out=out,
                mean=mean, mean_ref=mean_ref, stdev=stdev,
                logp=logp, logp_ref=logp_ref,
            )
        )
        x = out
    trace = DenoisingTrace(cond=s_row.ravel().copy(), steps=steps)
    return np.clip(x, -1.0, 1.0), trace


def sample_ddpm_chain(
    policy: DiffusionPolicy,
    s_flat: Array,
    rng: np.random.Generator,
    params: ParamStore | None = None,
) -> Array:
    """Full ancestral chain through the posterior-mean form (independent of
    the generalized-sampler code path; used as a cross-check)."""
    sched = policy.schedule
    d = policy.sample_dim
    s_row = np.asarray(s_flat, dtype=np.float64).ravel()[None, :] if policy.t_s else np.zeros((1, 0))
    x = rng.standard_normal(d)
    for k in range(sched.K, 0, -1):
        eps_hat = policy.predict_eps(x[None, :], s_row, np.array([k]), params)[0]
        ab = sched.alpha_bar(k)
        x0_hat = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
        mean = posterior_mean(sched, x0_hat, x, k)
        x = mean + math.sqrt(float(sched.posterior_var[k - 1])) * rng.standard_normal(d)
    return x


def sample_ddpm_chain_batch(
    policy: DiffusionPolicy, n: int, rng: np.random.Generator
) -> Array:
    """Vectorized unconditional ancestral sampling (t_s == 0 nets)."""
    sched = policy.schedule
    d = policy.sample_dim
    x = rng.standard_normal((n, d))
    empty = np.zeros((n, 0))
    for k in range(sched.K, 0, -1):
        ks = np.full(n, k)
        eps_hat = policy.predict_eps(x, empty, ks)
        ab = sched.alpha_bar(k)
        x0_hat = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
        mean = posterior_mean(sched, x0_hat, x, k)
        x = mean + math.sqrt(float(sched.posterior_var[k - 1])) * rng.standard_normal((n, d))
    return x


def sample_ddim_batch(
    policy: DiffusionPolicy, n: int, rng: np.random.Generator
) -> Array:
    """Vectorized unconditional sampling along the sub-sequence."""
    sched = policy.schedule
    d = policy.sample_dim
    x = rng.standard_normal((n, d))
    empty = np.zeros((n, 0))
    for k_from, k_to in sched.ddim_pairs():
        eps_hat = policy.predict_eps(x, empty, np.full(n, k_from))
        c_x, c_e, stdev = _eps_to_mean_coeffs(sched, k_from, k_to)
        mean = c_x * x + c_e * eps_hat
        x = mean + stdev * rng.standard_normal((n, d))
    return x


def act(
    policy: DiffusionPolicy,
    recent_states: list[Array],
    seed_or_rng: int | np.random.Generator,
) -> Array:
    """Sample a plan from recent raw states; return the first t_a actions
    de-normalized to the environment action space."""
    s_flat = conditioning_from(policy, recent_states)
    a_flat, _ = sample_action_sequence(policy, s_flat, seed_or_rng)
    plan = a_flat.reshape(policy.t_p, policy.action_dim)[: policy.t_a]
    return policy.action_norm.denormalize(plan)


def conditioning_from(policy: DiffusionPolicy, recent_states: list[Array]) -> Array:
    """Normalized flattened conditioning, start-padded with the oldest state."""
    if not recent_states and policy.t_s:
        raise ValueError("need at least one recent state")
    if policy.t_s == 0:
        return np.zeros(0)
    states = list(recent_states)[-policy.t_s :]
    while len(states) < policy.t_s:
        states.insert(0, states[0])
    return policy.state_norm.normalize(np.asarray(states, dtype=np.float64)).ravel()
