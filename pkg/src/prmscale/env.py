"""Planar pick-and-place toy task, scripted expert and degraded base policy.

The agent is a point gripper in the square workspace ``[-1, 1]^2``.  Each
episode asks it to pick up an object and drop it within ``goal_tol`` of one
of four fixed goal sites (selected by ``task_id``).  Actions are
``(dx, dy, gripper)``; a step first translates the agent (carrying the
object if grasped) and then applies the gripper command.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numeric.rng import RngStream, as_generator

WORKSPACE = (-1.0, 1.0)
GOAL_SITES = np.array([[-0.6, -0.6], [0.6, -0.6], [0.6, 0.6], [-0.6, 0.6]])
STATE_DIM = 8


@dataclass(frozen=True)
class EnvConfig:
    a_max: float = 0.1
    grasp_radius: float = 0.05
    goal_tol: float = 0.05
    horizon: int = 80
    grid_size: int = 32
    blob_std: float = 1.5  # in cells
    n_tasks: int = 4
    spawn_extent: float = 0.9

    @property
    def cell(self) -> float:
        return (WORKSPACE[1] - WORKSPACE[0]) / self.grid_size


@dataclass(frozen=True)
class Degradation:
    """Corruption applied by the frozen base policy on top of the expert."""

    sigma_p: float = 0.05
    bias: tuple = (0.02, -0.01)
    p_wrong: float = 0.1
    p_grip_err: float = 0.05


@dataclass
class Action:
    pose: np.ndarray
    gripper: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(-1)
        self.gripper = binarize_gripper(self.gripper)

    @property
    def d_dir(self) -> int:
        return self.pose.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.append(self.pose, self.gripper)

    @classmethod
    def from_vector(cls, v) -> "Action":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:-1].copy(), float(v[-1]))

    def clamped(self, a_max: float) -> "Action":
        return Action(np.clip(self.pose, -a_max, a_max), self.gripper)

    def __eq__(self, other):
        return (isinstance(other, Action) and self.gripper == other.gripper
                and np.array_equal(self.pose, other.pose))


def binarize_gripper(g: float) -> float:
    return 1.0 if g >= 0 else -1.0


@dataclass(frozen=True)
class EnvState:
    agent: np.ndarray
    object: np.ndarray
    goal: np.ndarray
    distractor: np.ndarray
    grasped: bool = False
    step_index: int = 0
    task_id: int = 0

    def __eq__(self, other):
        return (isinstance(other, EnvState)
                and self.grasped == other.grasped
                and self.step_index == other.step_index
                and self.task_id == other.task_id
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("agent", "object", "goal", "distractor")))


@dataclass
class Observation:
    state_vec: np.ndarray
    grid: np.ndarray
    task_id: int

    def __eq__(self, other):
        return (isinstance(other, Observation) and self.task_id == other.task_id
                and np.array_equal(self.state_vec, other.state_vec)
                and np.array_equal(self.grid, other.grid))


@dataclass
class Episode:
    observations: list = field(default_factory=list)
    expert_actions: list = field(default_factory=list)
    success: bool = False
    task_id: int = 0

    def __len__(self):
        return len(self.observations)


# ---------------------------------------------------------------- dynamics

def _clip_ws(p: np.ndarray) -> np.ndarray:
    return np.clip(p, WORKSPACE[0], WORKSPACE[1])


def reset(rng, cfg: EnvConfig = EnvConfig(), task_id: int | None = None) -> EnvState:
    gen = as_generator(rng)
    e = cfg.spawn_extent
    tid = int(gen.integers(cfg.n_tasks)) if task_id is None else int(task_id)
    goal = GOAL_SITES[tid % len(GOAL_SITES)].copy()
    while True:
        agent = gen.uniform(-e, e, 2)
        obj = gen.uniform(-e, e, 2)
        if np.linalg.norm(obj - goal) > 4 * cfg.goal_tol and np.linalg.norm(obj - agent) > cfg.grasp_radius:
            break
    distractor = gen.uniform(-e, e, 2)
    return EnvState(agent=agent, object=obj, goal=goal, distractor=distractor, task_id=tid)


def step(state: EnvState, action: Action, cfg: EnvConfig = EnvConfig()) -> EnvState:
    """Pure transition: translate, then apply the gripper command."""
    delta = np.clip(action.pose[:2], -cfg.a_max, cfg.a_max)
    grip = binarize_gripper(action.gripper)
    agent = _clip_ws(state.agent + delta)
    obj = state.object.copy()
    grasped = state.grasped
    if grasped:
        obj = agent.copy()
    if grip > 0 and not grasped and np.linalg.norm(obj - agent) <= cfg.grasp_radius:
        grasped = True
        obj = agent.copy()
    elif grip < 0 and grasped:
        grasped = False
        obj = agent.copy()
    return replace(state, agent=agent, object=obj, grasped=grasped, step_index=state.step_index + 1)


def is_success(state: EnvState, cfg: EnvConfig = EnvConfig()) -> bool:
    return (not state.grasped) and np.linalg.norm(state.object - state.goal) <= cfg.goal_tol


# ---------------------------------------------------------------- observation

def _blob(centers_x, centers_y, p, std):
    gx = np.exp(-((centers_x - p[0]) ** 2) / (2 * std * std))
    gy = np.exp(-((centers_y - p[1]) ** 2) / (2 * std * std))
    return np.outer(gy, gx)


def observe(state: EnvState, cfg: EnvConfig = EnvConfig()) -> Observation:
    n = cfg.grid_size
    centers = WORKSPACE[0] + (np.arange(n) + 0.5) * cfg.cell
    std = cfg.blob_std * cfg.cell
    grid = np.stack([_blob(centers, centers, p, std) for p in (state.agent, state.object, state.goal)])
    onehot = [1.0, 0.0] if state.grasped else [0.0, 1.0]
    state_vec = np.concatenate([state.agent, state.object, state.goal, onehot])
    return Observation(state_vec=state_vec, grid=grid, task_id=state.task_id)


# ---------------------------------------------------------------- controllers

def _toward(src: np.ndarray, dst: np.ndarray, a_max: float) -> np.ndarray:
    d = dst - src
    m = np.max(np.abs(d))
    if m > a_max:
        d = d * (a_max / m)
    return d


def expert_action(state: EnvState, cfg: EnvConfig = EnvConfig()) -> Action:
    """Approach, close, carry, open; translations are clamped straight lines."""
    if not state.grasped:
        if np.linalg.norm(state.object - state.agent) <= cfg.grasp_radius:
            return Action(np.zeros(2), 1.0)
        return Action(_toward(state.agent, state.object, cfg.a_max), -1.0)
    if np.linalg.norm(state.object - state.goal) <= cfg.goal_tol:
        return Action(np.zeros(2), -1.0)
    return Action(_toward(state.agent, state.goal, cfg.a_max), 1.0)


def base_policy_sample(state: EnvState, rng, degradation: Degradation = Degradation(),
                       cfg: EnvConfig = EnvConfig()) -> Action:
    """One stochastic proposal from the degraded frozen policy.

    Every call consumes the same number of draws regardless of branch, so
    the stream position never depends on the sampled mode.
    """
    gen = as_generator(rng)
    u_wrong = gen.random()
    noise = gen.standard_normal(2)
    u_grip = gen.random()
    a_e = expert_action(state, cfg)
    if u_wrong < degradation.p_wrong:
        pose = _toward(state.agent, state.distractor, cfg.a_max)
    else:
        pose = a_e.pose + np.asarray(degradation.bias, dtype=np.float64) + degradation.sigma_p * noise
    grip = -a_e.gripper if u_grip < degradation.p_grip_err else a_e.gripper
    return Action(np.clip(pose, -cfg.a_max, cfg.a_max), grip)


# ---------------------------------------------------------------- rollouts

def rollout_expert(seed_stream: RngStream, episode: int, cfg: EnvConfig = EnvConfig(),
                   exec_noise: float = 0.0) -> Episode:
    """Record expert labels along one episode.

    With ``exec_noise > 0`` the executed action is the expert's pose delta plus
    Gaussian noise, while the recorded label stays the clean expert action.
    The visited states then cover the recoverable neighbourhood of the expert
    path that a corrupted policy drifts into.
    """
    gen = seed_stream.substream(episode=episode)
    state = reset(gen, cfg)
    ep = Episode(task_id=state.task_id)
    for _ in range(cfg.horizon):
        a_e = expert_action(state, cfg)
        ep.observations.append(observe(state, cfg))
        ep.expert_actions.append(a_e)
        noise = gen.standard_normal(a_e.pose.size) * exec_noise
        state = step(state, Action(a_e.pose + noise, a_e.gripper), cfg)
        if is_success(state, cfg):
            ep.success = True
            break
    return ep


def generate_expert_episodes(n: int, seed: int, cfg: EnvConfig = EnvConfig(),
                             exec_noise: float = 0.0) -> list[Episode]:
    stream = RngStream(seed, "episodes")
    return [rollout_expert(stream, i, cfg, exec_noise) for i in range(n)]


def rollout_policy(policy, seed_stream: RngStream, episode: int, cfg: EnvConfig = EnvConfig()):
    """Run ``policy(state, gen_factory)`` until success or horizon.

    ``gen_factory(candidate)`` yields the per-candidate sub-stream for
    the current step.  Returns ``(success, steps, states)``.
    """
    state = reset(seed_stream.child("reset").substream(episode=episode), cfg)
    states = [state]
    for t in range(cfg.horizon):
        def factory(candidate: int, _t=t):
            return seed_stream.substream(episode=episode, step=_t, candidate=candidate)
        action = policy(state, factory)
        state = step(state, action, cfg)
        states.append(state)
        if is_success(state, cfg):
            return True, t + 1, states
    return False, cfg.horizon, states


# ---------------------------------------------------------------- 6-D synthetic mode

@dataclass(frozen=True)
class Synth6dConfig:
    scales: tuple = (0.184, 0.116, 0.165, 0.05, 0.05, 0.05)
    grid_size: int = 32
    n_tasks: int = 4


def synth6d_sample(rng, cfg: Synth6dConfig = Synth6dConfig()) -> tuple[Observation, Action]:
    """Random 6-D expert pose delta with a matching observation.

    The observation encodes the action (state vector carries the scaled
    pose, the raster places blobs at pose-derived points) so a verifier can
    in principle learn the mapping; there are no dynamics.
    """
    gen = as_generator(rng)
    scales = np.asarray(cfg.scales, dtype=np.float64)
    z = gen.standard_normal(6)
    pose = scales * z
    grip = 1.0 if gen.random() < 0.5 else -1.0
    task_id = int(gen.integers(cfg.n_tasks))
    onehot = [1.0, 0.0] if grip > 0 else [0.0, 1.0]
    state_vec = np.concatenate([np.tanh(z), onehot])
    env_cfg = EnvConfig(grid_size=cfg.grid_size)
    n = env_cfg.grid_size
    centers = WORKSPACE[0] + (np.arange(n) + 0.5) * env_cfg.cell
    std = env_cfg.blob_std * env_cfg.cell
    pts = np.clip(np.tanh(z).reshape(3, 2), -0.95, 0.95)
    grid = np.stack([_blob(centers, centers, p, std) for p in pts])
    return Observation(state_vec=state_vec, grid=grid, task_id=task_id), Action(pose, grip)
