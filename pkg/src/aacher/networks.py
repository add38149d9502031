"""Actor/critic ensembles whose outputs are arithmetically averaged.

``D`` actors and ``P`` critics are stored as stacked :class:`MlpParams`
(member axis first). The policy is the mean of the actor outputs and the
value estimate is the mean of the critic outputs; each member receives
``1/D`` (resp. ``1/P``) of the gradient flowing into the average.

Observations reaching these functions are already normalized and
concatenated as ``state || goal``. Critics see actions divided by
``max_action`` so their inputs stay in [-1, 1].
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .numcore import (AdamState, ContractViolation, MlpParams, TrainingDivergence,
                      adam_step, init_mlp, mlp_backward, mlp_forward)
from .rng import Rng

ACTOR_FINAL_BOUND = 3e-3

_ADCP_RE = re.compile(r"^A([0-9]+)C([0-9]+)$", re.IGNORECASE)


class AdcpParseError(ValueError):
    pass


@dataclass(frozen=True)
class AdcpSpec:
    """Actor count ``d`` and critic count ``p``, written ``A{d}C{p}``."""

    d: int = 1
    p: int = 1

    def __post_init__(self):
        if self.d < 1 or self.p < 1:
            raise ContractViolation(f"need at least one actor and one critic, got d={self.d}, p={self.p}")

    def __str__(self) -> str:
        return f"A{self.d}C{self.p}"


def parse_adcp(text: str) -> AdcpSpec:
    m = _ADCP_RE.match(text.strip())
    if not m:
        raise AdcpParseError(f"cannot parse {text!r}: expected A<actors>C<critics>, e.g. A2C3")
    d, p = int(m.group(1)), int(m.group(2))
    if d < 1 or p < 1:
        raise AdcpParseError(f"cannot parse {text!r}: actor and critic counts must be >= 1")
    return AdcpSpec(d, p)


@dataclass
class TrainingBatch:
    """Normalized minibatch: ``sg``/``next_sg`` are ``(B, dim(s)+dim(g))``."""

    sg: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_sg: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)


class Ensemble:
    def __init__(self, adcp: AdcpSpec, actors: MlpParams, critics: MlpParams,
                 target_actors: MlpParams | None = None, target_critics: MlpParams | None = None,
                 actor_adam: AdamState | None = None, critic_adam: AdamState | None = None,
                 max_action: float = 1.0):
        if max_action <= 0:
            raise ContractViolation("max_action must be positive")
        if actors.members != adcp.d or critics.members != adcp.p:
            raise ContractViolation(
                f"{adcp} needs {adcp.d} actors and {adcp.p} critics, got {actors.members} and {critics.members}")
        if actors.output_activation != "tanh" or critics.output_activation != "linear":
            raise ContractViolation("actors need a tanh output and critics a linear output")
        if critics.layer_sizes[-1] != 1:
            raise ContractViolation("critics must produce a scalar")
        self.adcp = adcp
        self.max_action = float(max_action)
        self.actors = actors
        self.critics = critics
        self.target_actors = actors.copy() if target_actors is None else target_actors
        self.target_critics = critics.copy() if target_critics is None else target_critics
        self.actor_adam = AdamState.for_params(actors) if actor_adam is None else actor_adam
        self.critic_adam = AdamState.for_params(critics) if critic_adam is None else critic_adam
        for main, tgt in ((self.actors, self.target_actors), (self.critics, self.target_critics)):
            if [a.shape for a in main.tensors()] != [a.shape for a in tgt.tensors()]:
                raise ContractViolation("target network shapes must mirror the main networks")

    @classmethod
    def create(cls, adcp: AdcpSpec, obs_dim: int, action_dim: int, max_action: float,
               hidden=(256, 256, 256), rng: Rng | None = None) -> "Ensemble":
        """Fresh ensemble; ``obs_dim`` is dim(state)+dim(goal)."""
        rng = Rng(0) if rng is None else rng
        hidden = tuple(hidden)
        actors = init_mlp((obs_dim,) + hidden + (action_dim,), rng.stream("actors"),
                          "tanh", final_bound=ACTOR_FINAL_BOUND, members=adcp.d)
        critics = init_mlp((obs_dim + action_dim,) + hidden + (1,), rng.stream("critics"),
                           "linear", members=adcp.p)
        return cls(adcp, actors, critics, max_action=max_action)

    @property
    def obs_dim(self) -> int:
        return self.actors.layer_sizes[0]

    @property
    def action_dim(self) -> int:
        return self.actors.layer_sizes[-1]

    def copy(self) -> "Ensemble":
        return Ensemble(self.adcp, self.actors.copy(), self.critics.copy(),
                        self.target_actors.copy(), self.target_critics.copy(),
                        self.actor_adam.copy(), self.critic_adam.copy(), self.max_action)


def _actor_outputs(ens: Ensemble, sg, use_targets: bool):
    params = ens.target_actors if use_targets else ens.actors
    out, cache = mlp_forward(params, sg)
    return ens.max_action * out, out, cache


def actor_avg(ens: Ensemble, sg, use_targets: bool = False) -> np.ndarray:
    """Mean action over the D actors for one observation ``(obs,)`` or a batch ``(B, obs)``."""
    actions, _, _ = _actor_outputs(ens, sg, use_targets)
    return actions.mean(axis=0)


def _critic_input(ens: Ensemble, sg, a) -> np.ndarray:
    sg = np.asarray(sg, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if sg.shape[:-1] != a.shape[:-1] or a.shape[-1] != ens.action_dim:
        raise ContractViolation(f"observation {sg.shape} and action {a.shape} do not line up")
    return np.concatenate([sg, a / ens.max_action], axis=-1)


def critic_avg(ens: Ensemble, sg, a, use_targets: bool = False):
    """Mean of the P critic values. Scalar for a single input, ``(B,)`` for a batch."""
    params = ens.target_critics if use_targets else ens.critics
    q, _ = mlp_forward(params, _critic_input(ens, sg, a))
    return q.mean(axis=0)[..., 0]


def critic_target(ens: Ensemble, batch: TrainingBatch, gamma: float) -> np.ndarray:
    """TD targets ``r + gamma * Q_avg_tar(s', mu_avg_tar(s'))`` clipped to the sparse-return range."""
    if not 0.0 <= gamma < 1.0:
        raise ContractViolation(f"gamma must be in [0, 1), got {gamma}")
    next_a = actor_avg(ens, batch.next_sg, use_targets=True)
    next_q = critic_avg(ens, batch.next_sg, next_a, use_targets=True)
    y = batch.reward + gamma * next_q
    return np.clip(y, -1.0 / (1.0 - gamma), 0.0)


def critic_l2(ens: Ensemble, coeff: float) -> float:
    """``coeff`` times the sum of squared critic weights (biases and layer-norm excluded)."""
    if coeff == 0.0:
        return 0.0
    return coeff * sum(float(np.sum(w * w)) for w in ens.critics.weights)


def critic_loss_grads(ens: Ensemble, batch: TrainingBatch, gamma: float,
                      l2_coeff: float = 0.0) -> tuple[float, MlpParams]:
    """``mean((y - Q_avg)^2) + L2`` and its gradient w.r.t. the stacked critic parameters."""
    if len(batch) == 0:
        raise ContractViolation("critic update needs a non-empty batch")
    y = critic_target(ens, batch, gamma)
    q, cache = mlp_forward(ens.critics, _critic_input(ens, batch.sg, batch.action))
    q_avg = q.mean(axis=0)[..., 0]
    td = y - q_avg
    loss = float(np.mean(td * td)) + critic_l2(ens, l2_coeff)
    if not np.isfinite(loss):
        raise TrainingDivergence(f"critic loss is {loss}")
    dq_avg = -2.0 * td / len(batch)
    upstream = np.broadcast_to((dq_avg / ens.adcp.p)[:, None], q.shape)
    grads, _ = mlp_backward(ens.critics, cache, upstream)
    if l2_coeff:
        for g, w in zip(grads.weights, ens.critics.weights):
            g += 2.0 * l2_coeff * w
    return loss, grads


def critic_update(ens: Ensemble, batch: TrainingBatch, gamma: float, lr: float,
                  l2_coeff: float = 0.0) -> float:
    """One Adam step on the averaged-critic TD loss. Returns the loss before the step."""
    loss, grads = critic_loss_grads(ens, batch, gamma, l2_coeff)
    adam_step(ens.critics, ens.critic_adam, grads, lr)
    return loss


def actor_objective_grads(ens: Ensemble, batch: TrainingBatch,
                          action_l2: float = 1.0) -> tuple[float, MlpParams]:
    """``-mean Q_avg(s, mu_avg(s)) + action_l2 * mean |mu_avg / max_action|^2`` and its
    gradient w.r.t. the stacked actor parameters."""
    n = len(batch)
    if n == 0:
        raise ContractViolation("actor update needs a non-empty batch")
    actions, raw, a_cache = _actor_outputs(ens, batch.sg, use_targets=False)
    mu = actions.mean(axis=0)
    q, c_cache = mlp_forward(ens.critics, _critic_input(ens, batch.sg, mu))
    q_avg = q.mean(axis=0)[..., 0]
    scaled = mu / ens.max_action
    objective = -float(np.mean(q_avg)) + action_l2 * float(np.mean(np.sum(scaled * scaled, axis=-1)))
    if not np.isfinite(objective):
        raise TrainingDivergence(f"actor objective is {objective}")

    dq = np.full(q.shape, -1.0 / n / ens.adcp.p)
    _, d_input = mlp_backward(ens.critics, c_cache, dq, param_grads=False)
    d_mu = d_input.sum(axis=0)[:, ens.obs_dim:] / ens.max_action
    d_mu = d_mu + action_l2 * 2.0 * scaled / ens.max_action / n
    # actor output is max_action * tanh(z); mlp_backward handles the tanh
    upstream = np.broadcast_to(d_mu * ens.max_action / ens.adcp.d, raw.shape)
    grads, _ = mlp_backward(ens.actors, a_cache, upstream)
    return objective, grads


def actor_update(ens: Ensemble, batch: TrainingBatch, lr: float, action_l2: float = 1.0) -> float:
    """One Adam step on the averaged-actor objective; critics are read, never modified.

    Returns the objective before the step.
    """
    objective, grads = actor_objective_grads(ens, batch, action_l2)
    adam_step(ens.actors, ens.actor_adam, grads, lr)
    return objective


def soft_update(ens: Ensemble, tau: float) -> None:
    """Polyak-average every target parameter toward its main counterpart."""
    if not 0.0 < tau <= 1.0:
        raise ContractViolation(f"tau must be in (0, 1], got {tau}")
    for main, target in ((ens.actors, ens.target_actors), (ens.critics, ens.target_critics)):
        for m, t in zip(main.tensors(), target.tensors()):
            t[...] = tau * m + (1.0 - tau) * t
