"""The training loop: rollouts with Gaussian exploration, hindsight relabeling,
optimization cycles with soft target updates, and per-epoch evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from ._alloc import keep_freed_memory
from .envs import GoalEnv, GoalObservation, make_env
from .networks import (AdcpSpec, Ensemble, TrainingBatch, actor_avg, actor_update, critic_avg,
                       critic_l2, critic_update, soft_update)  # noqa: F401  (critic_l2 re-exported)
from .numcore import ContractViolation, TrainingDivergence
from .replay import Batch, ReplayBuffer, Transition, her_expand
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    adcp: AdcpSpec = field(default_factory=AdcpSpec)
    env: str = "aubo_reach"
    epochs: int = 25
    cycles_per_epoch: int = 15
    rollout_steps: int = 100
    opt_steps_per_cycle: int = 20
    batch_size: int = 256
    gamma: float = 0.98
    tau: float = 0.01
    actor_lr: float = 0.001
    critic_lr: float = 0.001
    noise_var: float = 0.2
    her_k: int = 4
    buffer_capacity: int = 10**6
    # weight decay on critic weights; off by default, see README (1.0 stalls learning)
    l2_coeff: float = 0.0
    action_l2: float = 1.0
    eval_episodes: int = 10
    seed: int = 0
    hidden: tuple = (256, 256, 256)
    clip_obs: float = 5.0
    env_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.adcp, str):
            from .networks import parse_adcp
            self.adcp = parse_adcp(self.adcp)
        self.hidden = tuple(int(h) for h in self.hidden)
        counts = ("epochs", "cycles_per_epoch", "rollout_steps", "opt_steps_per_cycle",
                  "batch_size", "buffer_capacity", "eval_episodes")
        for name in counts:
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.her_k < 0:
            raise ContractViolation("her_k must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation("gamma must be in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ContractViolation("tau must be in (0, 1]")
        if self.noise_var < 0 or self.l2_coeff < 0:
            raise ContractViolation("noise_var and l2_coeff must be >= 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def make_env(self) -> GoalEnv:
        return make_env(self.env, horizon=self.rollout_steps, **self.env_options)


class RunningStats:
    """Per-dimension running mean/std from count, sum and sum of squares."""

    def __init__(self, size: int, eps: float = 1e-2):
        self.size = size
        self.eps = eps
        self.count = 0
        self.sum = np.zeros(size)
        self.sumsq = np.zeros(size)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.size)
        self.count += len(x)
        self.sum += x.sum(axis=0)
        self.sumsq += (x * x).sum(axis=0)

    @property
    def mean(self) -> np.ndarray:
        return self.sum / max(self.count, 1)

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.size)
        var = np.maximum(self.sumsq / self.count - self.mean ** 2, 0.0)
        return np.sqrt(np.maximum(var, self.eps ** 2))

    def copy(self) -> "RunningStats":
        out = RunningStats(self.size, self.eps)
        out.count, out.sum, out.sumsq = self.count, self.sum.copy(), self.sumsq.copy()
        return out


class Normalizer:
    """Running state and goal statistics; identity until the first update, then
    ``clip((x - mean) / std, +-clip_range)``."""

    def __init__(self, state_dim: int, goal_dim: int, clip_range: float = 5.0):
        self.clip_range = clip_range
        self.state = RunningStats(state_dim)
        self.goal = RunningStats(goal_dim)

    def _norm(self, stats: RunningStats, x):
        x = np.asarray(x, dtype=np.float64)
        if stats.count == 0:
            return x
        return np.clip((x - stats.mean) / stats.std, -self.clip_range, self.clip_range)

    def __call__(self, states, goals) -> np.ndarray:
        return np.concatenate([self._norm(self.state, states), self._norm(self.goal, goals)], axis=-1)

    def update(self, states, goals) -> None:
        self.state.update(states)
        self.goal.update(goals)

    def copy(self) -> "Normalizer":
        out = Normalizer(self.state.size, self.goal.size, self.clip_range)
        out.state, out.goal = self.state.copy(), self.goal.copy()
        return out


@dataclass
class EpochMetrics:
    epoch: int
    success_rate: float
    mean_reward: float
    mean_q: float


def explore_action(ens: Ensemble, norm: Normalizer, obs: GoalObservation, rng: Rng,
                   noise_var: float = 0.2) -> np.ndarray:
    """Averaged policy action plus N(0, noise_var) per component, clipped to +-max_action."""
    mu = actor_avg(ens, norm(obs.state, obs.desired_goal))
    if noise_var > 0:
        mu = mu + rng.normal(0.0, np.sqrt(noise_var), mu.shape)
    return np.clip(mu, -ens.max_action, ens.max_action)


def prepare_batch(batch: Batch, norm: Normalizer) -> TrainingBatch:
    return TrainingBatch(sg=norm(batch.state, batch.goal), action=batch.action,
                         reward=batch.reward, next_sg=norm(batch.next_state, batch.goal))


@dataclass
class Counters:
    env_steps: int = 0
    opt_steps: int = 0
    stored: int = 0


class TrainState:
    """Everything one run mutates: networks, buffer, normalizer, env, and RNG streams."""

    def __init__(self, config: TrainConfig):
        keep_freed_memory()
        self.config = config
        self.env = config.make_env()
        spec = self.env.spec
        root = Rng(config.seed)
        self.rng_env = root.stream("env")
        self.rng_noise = root.stream("noise")
        self.rng_her = root.stream("her")
        self.rng_sample = root.stream("sample")
        self.rng_eval = root.stream("eval")
        self.ensemble = Ensemble.create(config.adcp, spec.state_dim + spec.goal_dim, spec.action_dim,
                                        spec.max_action, config.hidden, root.stream("init"))
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.normalizer = Normalizer(spec.state_dim, spec.goal_dim, config.clip_obs)
        self.counters = Counters()
        self.last_losses = (float("nan"), float("nan"))


def rollout(state: TrainState) -> list[Transition]:
    cfg, env = state.config, state.env
    obs = env.reset(state.rng_env)
    episode = []
    for _ in range(cfg.rollout_steps):
        a = explore_action(state.ensemble, state.normalizer, obs, state.rng_noise, cfg.noise_var)
        nxt, reward, _, success = env.step(a)
        episode.append(Transition(obs.state, obs.desired_goal, a, reward, nxt.state, nxt.achieved_goal, success))
        obs = nxt
    state.counters.env_steps += len(episode)
    return episode


def optimize(state: TrainState) -> tuple[float, float]:
    cfg, ens = state.config, state.ensemble
    batch = prepare_batch(state.buffer.sample(cfg.batch_size, state.rng_sample), state.normalizer)
    c_loss = critic_update(ens, batch, cfg.gamma, cfg.critic_lr, cfg.l2_coeff)
    a_obj = actor_update(ens, batch, cfg.actor_lr, cfg.action_l2)
    soft_update(ens, cfg.tau)
    state.counters.opt_steps += 1
    return c_loss, a_obj


def run_cycle(state: TrainState) -> None:
    """One rollout, relabel and store it, refresh the normalizer, then the optimization steps."""
    cfg = state.config
    episode = rollout(state)
    expanded = her_expand(episode, cfg.her_k, state.env.reward_fn, state.rng_her)
    state.buffer.store(expanded)
    state.counters.stored += len(expanded)
    states = np.array([tr.state for tr in episode])
    # goal stats cover achieved goals too, otherwise relabeled goals fall far outside a fixed goal's range
    goals = np.array([tr.goal for tr in episode] + [tr.achieved_next for tr in episode])
    state.normalizer.update(states, goals)
    if len(state.buffer) == 0:
        return
    for _ in range(cfg.opt_steps_per_cycle):
        state.last_losses = optimize(state)


def evaluate(ens: Ensemble, norm: Normalizer, env: GoalEnv, n: int, rng: Rng, epoch: int = 0) -> EpochMetrics:
    """Run ``n`` noise-free episodes of the averaged policy in lockstep."""
    if n < 1:
        raise ContractViolation("evaluate needs n >= 1")
    envs = [env.copy() for _ in range(n)]
    obs = [e.reset(rng) for e in envs]
    totals = np.zeros(n)
    final_success = np.zeros(n, dtype=bool)
    q_sum, q_count = 0.0, 0
    for _ in range(env.spec.horizon):
        sg = norm(np.array([o.state for o in obs]), np.array([o.desired_goal for o in obs]))
        actions = actor_avg(ens, sg)
        q = critic_avg(ens, sg, actions)
        q_sum += float(q.sum())
        q_count += len(q)
        for i, e in enumerate(envs):
            obs[i], r, _, final_success[i] = e.step(actions[i])
            totals[i] += r
    return EpochMetrics(epoch, float(final_success.mean()), float(totals.mean()), q_sum / q_count)


@dataclass
class Snapshot:
    """Frozen copy of the learned state: enough to act, evaluate, or resume optimization."""

    config: TrainConfig
    ensemble: Ensemble
    normalizer: Normalizer
    epoch: int = 0


class DivergedError(TrainingDivergence):
    def __init__(self, message: str, epoch: int, cycle: int, last_stable: Snapshot | None):
        super().__init__(message)
        self.epoch = epoch
        self.cycle = cycle
        self.last_stable = last_stable


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    checkpoint: Snapshot
    counters: Counters


def train(config: TrainConfig, on_epoch: Callable[[EpochMetrics, Snapshot], None] | None = None) -> TrainResult:
    """``epochs x cycles_per_epoch`` cycles, evaluating after every epoch. Deterministic given the seed."""
    state = TrainState(config)
    eval_env = config.make_env()
    metrics: list[EpochMetrics] = []
    last_stable = None
    for epoch in range(1, config.epochs + 1):
        for cycle in range(1, config.cycles_per_epoch + 1):
            try:
                run_cycle(state)
            except TrainingDivergence as exc:
                where = "none" if last_stable is None else f"end of epoch {last_stable.epoch}"
                raise DivergedError(f"diverged at epoch {epoch}, cycle {cycle}: {exc} "
                                    f"(last stable checkpoint: {where})", epoch, cycle, last_stable) from exc
        m = evaluate(state.ensemble, state.normalizer, eval_env, config.eval_episodes, state.rng_eval, epoch)
        metrics.append(m)
        last_stable = Snapshot(config, state.ensemble.copy(), state.normalizer.copy(), epoch)
        log.info("%s %s epoch %d: success %.3f reward %.2f q %.3f", config.env, config.adcp, epoch,
                 m.success_rate, m.mean_reward, m.mean_q)
        if on_epoch is not None:
            on_epoch(m, last_stable)
    return TrainResult(metrics, last_stable, state.counters)

