"""Goal-conditioned toy environments with sparse {-1, 0} rewards.

``aubo_reach``   4 joint angles moved by bounded increments toward a joint-space goal.
``point_reach``  planar point moved toward a goal position.
``point_push``   planar point that carries a block once it touches it.
``point_slide``  point confined to a launch strip; it can only kick the block,
                 which then glides with friction toward a distant goal.

Actions are increments, not absolute targets. Episodes always run for the
full horizon; reaching the goal does not end them.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .numcore import ContractViolation
from .rng import Rng

AUBO_TRAINING_GOAL = (-0.503, 0.605, -1.676, 1.391)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    goal_dim: int
    max_action: float = 1.0
    horizon: int = 100
    success_threshold: float = 0.05

    def __post_init__(self):
        if min(self.state_dim, self.action_dim, self.goal_dim) < 1:
            raise ContractViolation("environment dimensions must be >= 1")
        if self.horizon < 1 or self.success_threshold <= 0 or self.max_action <= 0:
            raise ContractViolation("horizon, threshold and max_action must be positive")


@dataclass
class GoalObservation:
    state: np.ndarray
    achieved_goal: np.ndarray
    desired_goal: np.ndarray


class GoalEnv:
    spec: EnvSpec

    def __init__(self):
        self.t = 0
        self.goal: np.ndarray | None = None

    # subclasses define these
    def _reset_state(self, rng: Rng) -> None: ...
    def _sample_goal(self, rng: Rng) -> np.ndarray: ...
    def _advance(self, action: np.ndarray) -> None: ...
    def _state(self) -> np.ndarray: ...
    def achieved(self) -> np.ndarray: ...
    def distance(self, achieved, goal) -> float: ...

    def reward_fn(self, achieved, goal) -> float:
        """0.0 if ``achieved`` is strictly within the success threshold of ``goal``, else -1.0."""
        achieved = np.asarray(achieved, dtype=np.float64)
        goal = np.asarray(goal, dtype=np.float64)
        if achieved.shape != goal.shape:
            raise ContractViolation(f"achieved {achieved.shape} and goal {goal.shape} differ in length")
        return 0.0 if self.distance(achieved, goal) < self.spec.success_threshold else -1.0

    def observe(self) -> GoalObservation:
        return GoalObservation(self._state(), self.achieved(), self.goal.copy())

    def reset(self, rng: Rng) -> GoalObservation:
        self._reset_state(rng)
        self.goal = np.asarray(self._sample_goal(rng), dtype=np.float64)
        self.t = 0
        return self.observe()

    def step(self, action) -> tuple[GoalObservation, float, bool, bool]:
        if self.goal is None:
            raise ContractViolation("step() before reset()")
        if self.t >= self.spec.horizon:
            raise ContractViolation(f"episode already ran its {self.spec.horizon} steps")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.spec.action_dim,):
            raise ContractViolation(f"action shape {action.shape}, expected ({self.spec.action_dim},)")
        m = self.spec.max_action
        self._advance(np.clip(action, -m, m))
        self.t += 1
        obs = self.observe()
        reward = self.reward_fn(obs.achieved_goal, obs.desired_goal)
        return obs, reward, self.t >= self.spec.horizon, reward == 0.0

    def copy(self) -> "GoalEnv":
        return copy.deepcopy(self)


class AuboReach(GoalEnv):
    """Kinematic stand-in for the 4-joint (shoulder, upper arm, forearm, wrist1) reach task.

    Success when the L1 joint deviation from the goal is below 0.1 rad.
    """

    def __init__(self, horizon: int = 100, fixed_goal: bool = True, goal=AUBO_TRAINING_GOAL,
                 joint_limit: float = 1.7, action_scale: float = 0.2, success_threshold: float = 0.1):
        super().__init__()
        self.spec = EnvSpec("aubo_reach", 4, 4, 4, 1.0, horizon, success_threshold)
        self.fixed_goal = fixed_goal
        self.default_goal = np.asarray(goal, dtype=np.float64)
        self.joint_limit = joint_limit
        self.action_scale = action_scale
        self.joints = np.zeros(4)

    def _reset_state(self, rng):
        self.joints = rng.uniform(-self.joint_limit, self.joint_limit, 4)

    def _sample_goal(self, rng):
        if self.fixed_goal:
            return self.default_goal.copy()
        return rng.uniform(-self.joint_limit, self.joint_limit, 4)

    def _advance(self, action):
        self.joints = np.clip(self.joints + self.action_scale * action, -self.joint_limit, self.joint_limit)

    def _state(self):
        return self.joints.copy()

    def achieved(self):
        return self.joints.copy()

    def distance(self, achieved, goal):
        return float(np.sum(np.abs(achieved - goal)))


class PointReach(GoalEnv):
    def __init__(self, horizon: int = 100, low: float = 0.0, high: float = 1.0,
                 step_size: float = 0.05, success_threshold: float = 0.05):
        super().__init__()
        self.spec = EnvSpec("point_reach", 2, 2, 2, 1.0, horizon, success_threshold)
        self.low, self.high, self.step_size = low, high, step_size
        self.pos = np.zeros(2)

    def _reset_state(self, rng):
        self.pos = rng.uniform(self.low, self.high, 2)

    def _sample_goal(self, rng):
        return rng.uniform(self.low, self.high, 2)

    def _advance(self, action):
        self.pos = np.clip(self.pos + self.step_size * action, self.low, self.high)

    def _state(self):
        return self.pos.copy()

    def achieved(self):
        return self.pos.copy()

    def distance(self, achieved, goal):
        return float(np.linalg.norm(achieved - goal))


class _BlockEnv(GoalEnv):
    """Agent plus one block; the block position is the achieved goal."""

    name = ""

    def __init__(self, horizon: int, low: float, high: float, step_size: float,
                 contact_radius: float, success_threshold: float):
        super().__init__()
        self.spec = EnvSpec(self.name, 4, 2, 2, 1.0, horizon, success_threshold)
        self.low, self.high = low, high
        self.step_size = step_size
        self.contact_radius = contact_radius
        self.agent = np.zeros(2)
        self.block = np.zeros(2)

    def _touching(self) -> bool:
        return float(np.linalg.norm(self.agent - self.block)) < self.contact_radius

    def _state(self):
        return np.concatenate([self.agent, self.block])

    def achieved(self):
        return self.block.copy()

    def distance(self, achieved, goal):
        return float(np.linalg.norm(achieved - goal))


class PointPush(_BlockEnv):
    name = "point_push"

    def __init__(self, horizon: int = 100, low: float = 0.0, high: float = 1.0, step_size: float = 0.05,
                 contact_radius: float = 0.05, success_threshold: float = 0.05):
        super().__init__(horizon, low, high, step_size, contact_radius, success_threshold)

    def _reset_state(self, rng):
        self.agent = rng.uniform(0.1, 0.9, 2)
        self.block = rng.uniform(0.3, 0.7, 2)

    def _sample_goal(self, rng):
        return rng.uniform(0.2, 0.8, 2)

    def _advance(self, action):
        before = self.agent
        self.agent = np.clip(before + self.step_size * action, self.low, self.high)
        if self._touching():
            self.block = np.clip(self.block + (self.agent - before), self.low, self.high)


class PointSlide(_BlockEnv):
    """The agent stays in ``x <= launch_x``; contact adds ``kick`` times its displacement
    to the block velocity, which then decays by ``friction`` each step."""

    name = "point_slide"

    def __init__(self, horizon: int = 100, low: float = 0.0, high: float = 1.0, step_size: float = 0.05,
                 contact_radius: float = 0.05, success_threshold: float = 0.05,
                 launch_x: float = 0.4, kick: float = 2.0, friction: float = 0.95):
        super().__init__(horizon, low, high, step_size, contact_radius, success_threshold)
        self.spec = EnvSpec(self.name, 6, 2, 2, 1.0, horizon, success_threshold)
        self.launch_x = launch_x
        self.kick = kick
        self.friction = friction
        self.velocity = np.zeros(2)

    def _reset_state(self, rng):
        self.agent = np.array([rng.uniform(0.0, 0.1), rng.uniform(0.3, 0.7)])
        self.block = np.array([rng.uniform(0.15, 0.3), rng.uniform(0.3, 0.7)])
        self.velocity = np.zeros(2)

    def _sample_goal(self, rng):
        return np.array([rng.uniform(0.65, 0.95), rng.uniform(0.2, 0.8)])

    def _advance(self, action):
        before = self.agent
        moved = before + self.step_size * action
        moved[0] = min(moved[0], self.launch_x)
        self.agent = np.clip(moved, self.low, self.high)
        if self._touching():
            self.velocity = self.velocity + self.kick * (self.agent - before)
        block = self.block + self.velocity
        hit = (block < self.low) | (block > self.high)
        self.block = np.clip(block, self.low, self.high)
        self.velocity = np.where(hit, 0.0, self.velocity * self.friction)

    def _state(self):
        # block velocity is observable, otherwise the state is not Markov
        return np.concatenate([self.agent, self.block, self.velocity])


ENVIRONMENTS = {
    "aubo_reach": AuboReach,
    "point_reach": PointReach,
    "point_push": PointPush,
    "point_slide": PointSlide,
}


def make_env(name: str, **options) -> GoalEnv:
    """Build an environment by name; keyword options override its defaults."""
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ContractViolation(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**options)
