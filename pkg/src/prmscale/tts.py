"""Test-time scaling: expand policy proposals into candidates, score, select.

One control step::

    N proposals from the frozen policy ──vote──> shared gripper
    pre_encode(obs) once
    score proposals (reward + direction)
    expand each proposal into M/N candidates (guided by its direction, or isotropic)
    score expansions against the same cache
    execute argmax reward (lowest index wins ties)

Randomness for one step comes from per-candidate sub-streams: proposal ``j``
draws from candidate stream ``j`` and its expansions from stream ``N + j``.
Proposal draws therefore never depend on ``M`` or the expansion mode.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .env import (Action, Degradation, EnvConfig, Observation, base_policy_sample,
                  binarize_gripper, expert_action, observe, rollout_policy)
from .numeric.autodiff import EPS_NORM
from .numeric.rng import RngStream, as_generator

MODES = ("none", "random", "direction_guided")
MAX_RESAMPLE = 5


@dataclass(frozen=True)
class TtsConfig:
    N: int = 1
    M: int = 0
    alpha: float = math.pi / 3
    sigma_exp: float = 0.1
    mode: str = "none"

    def __post_init__(self):
        if self.mode == "dg":
            object.__setattr__(self, "mode", "direction_guided")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.M < 0:
            raise ValueError("M must be >= 0")
        if self.mode == "none":
            # no expansion without a mode: the budget collapses to best-of-N
            object.__setattr__(self, "M", 0)
        if self.M % self.N:
            raise ValueError(f"M={self.M} must be divisible by N={self.N}")
        if not 0.0 < self.alpha <= math.pi:
            raise ValueError("alpha must lie in (0, pi]")
        if self.sigma_exp < 0:
            raise ValueError("sigma_exp must be >= 0")

    @property
    def K(self) -> int:
        return self.N + self.M

    @property
    def per_proposal(self) -> int:
        return self.M // self.N


@dataclass
class CandidateSet:
    """Candidates in scoring order; ``tags[i]`` is ``("policy", j)`` or ``("expansion", j, k)``."""

    actions: list
    tags: list
    rewards: np.ndarray | None = None
    directions: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)

    def pose_matrix(self) -> np.ndarray:
        return np.stack([a.pose for a in self.actions])


# ---------------------------------------------------------------- expansion

def orthogonal_direction(u: np.ndarray, gen) -> tuple[np.ndarray, bool]:
    """Random unit vector orthogonal to ``u``; ``ok`` is False if every try was degenerate."""
    for _ in range(MAX_RESAMPLE):
        v = gen.standard_normal(u.size)
        p = v - (v @ u) * u
        n = np.linalg.norm(p)
        if n > EPS_NORM:
            return p / n, True
    return np.zeros_like(u), False


def guided_candidate(a_p: Action, u: np.ndarray, p: np.ndarray, theta: float, m: float) -> Action:
    """``a_p + m (cos(theta) u + sin(theta) p)`` with the gripper left unchanged."""
    return Action(a_p.pose + m * (math.cos(theta) * u + math.sin(theta) * p), a_p.gripper)


def expand_guided(a_p: Action, u: np.ndarray, cfg: TtsConfig, rng,
                  n: int | None = None) -> list[Action]:
    """Perturb ``a_p`` inside the cone of half-angle ``alpha`` around ``u``.

    Each sample: ``m (cos t u + sin t p)`` with ``p`` a random unit vector
    orthogonal to ``u``, ``t ~ U(0, alpha)`` and ``m ~ |N(0, sigma_exp^2)|``.
    """
    u = np.asarray(u, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > 1e-6:
        raise ValueError("direction must be unit-norm")
    gen = as_generator(rng)
    out = []
    for _ in range(cfg.per_proposal if n is None else n):
        p, ok = orthogonal_direction(u, gen)
        theta = gen.uniform(0.0, cfg.alpha) if ok else 0.0
        m = abs(gen.normal(0.0, 1.0)) * cfg.sigma_exp
        out.append(guided_candidate(a_p, u, p, theta, m))
    return out


def expand_random(a_p: Action, cfg: TtsConfig, rng, n: int | None = None) -> list[Action]:
    gen = as_generator(rng)
    out = []
    for _ in range(cfg.per_proposal if n is None else n):
        out.append(Action(a_p.pose + cfg.sigma_exp * gen.standard_normal(a_p.pose.size), a_p.gripper))
    return out


def gripper_vote(proposals: list[Action]) -> float:
    if not proposals:
        raise ValueError("need at least one proposal")
    votes = [binarize_gripper(a.gripper) for a in proposals]
    s = sum(votes)
    if s == 0:
        return votes[0]
    return 1.0 if s > 0 else -1.0


# ---------------------------------------------------------------- scorers

class OracleCache:
    def __init__(self, expert: Action):
        self.expert = expert


class OracleScorer:
    """Stand-in for the PRM: reward ``-rmse`` to the expert, direction toward it.

    ``for_state`` binds the expert for the current environment state; the
    observation passed to :meth:`pre_encode` is ignored.
    """

    def __init__(self, expert: Action | None = None, cfg: EnvConfig = EnvConfig()):
        self.expert = expert
        self.env_cfg = cfg

    @property
    def d_dir(self) -> int:
        return 2 if self.expert is None else self.expert.d_dir

    def for_state(self, state) -> "OracleScorer":
        return OracleScorer(expert_action(state, self.env_cfg), self.env_cfg)

    def pre_encode(self, obs=None, stamp=None) -> OracleCache:
        if self.expert is None:
            raise ValueError("oracle scorer has no expert bound")
        return OracleCache(self.expert)

    def score_arrays(self, cache: OracleCache, actions, stamp=None):
        poses = np.stack([a.pose for a in actions]) if actions else np.zeros((0, self.d_dir))
        diff = cache.expert.pose[None] - poses
        reward = -np.sqrt(np.mean(diff * diff, axis=1))
        norms = np.linalg.norm(diff, axis=1)
        deg = norms <= EPS_NORM
        u = np.where(deg[:, None], 0.0, diff / np.where(deg, 1.0, norms)[:, None])
        return reward, u, deg


def _d_dir(scorer) -> int:
    cfg = getattr(scorer, "cfg", None)
    return cfg.d_dir if cfg is not None else scorer.d_dir


# ---------------------------------------------------------------- selection

def select_action(obs: Observation, policy, scorer, cfg: TtsConfig, streams,
                  stamp: tuple | None = None):
    """One scaled control step.

    ``policy(gen) -> Action`` draws a proposal; ``streams(candidate)`` returns
    the generator for a candidate slot. Returns ``(action, CandidateSet, timing)`` where timing
    holds seconds per phase.
    """
    factory = streams
    timing = {}
    t0 = time.perf_counter()
    proposals = [policy(factory(j)) for j in range(cfg.N)]
    for a in proposals:
        if a.d_dir != _d_dir(scorer):
            raise ValueError(f"action d_dir {a.d_dir} does not match scorer d_dir {_d_dir(scorer)}")
    g = gripper_vote(proposals)
    proposals = [Action(a.pose, g) for a in proposals]
    t1 = time.perf_counter()
    timing["propose"] = t1 - t0

    if cfg.mode == "none" and cfg.N == 1:
        # a single proposal needs no scoring at all
        timing.update(encode=0.0, score=0.0, expand=0.0, total=t1 - t0)
        return proposals[0], CandidateSet(proposals, [("policy", 0)]), timing

    cache = scorer.pre_encode(obs, stamp)
    t2 = time.perf_counter()
    timing["encode"] = t2 - t1
    r_p, u_p, deg_p = scorer.score_arrays(cache, proposals, stamp)
    t3 = time.perf_counter()

    actions, tags = list(proposals), [("policy", j) for j in range(cfg.N)]
    for j, a in enumerate(proposals):
        if cfg.per_proposal == 0:
            break
        gen = factory(cfg.N + j)
        if cfg.mode == "direction_guided" and not deg_p[j]:
            new = expand_guided(a, u_p[j], cfg, gen)
        else:
            # no usable direction: fall back to isotropic expansion
            new = expand_random(a, cfg, gen)
        actions.extend(new)
        tags.extend(("expansion", j, k) for k in range(len(new)))
    t4 = time.perf_counter()
    timing["expand"] = t4 - t3

    if len(actions) > cfg.N:
        r_e, u_e, _ = scorer.score_arrays(cache, actions[cfg.N:], stamp)
        rewards = np.concatenate([r_p, r_e])
        dirs = np.concatenate([u_p, u_e])
    else:
        rewards, dirs = r_p, u_p
    t5 = time.perf_counter()
    timing["score"] = (t3 - t2) + (t5 - t4)
    timing["total"] = t5 - t0

    best = int(np.argmax(rewards))  # first maximum: policy proposals win ties
    # World-frame seam: a policy emitting local-frame deltas would have the
    # chosen pose converted to world frame here before execution.
    cs = CandidateSet(actions, tags, rewards, dirs)
    return actions[best], cs, timing


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalCell:
    cfg: TtsConfig
    successes: int
    episodes: int
    mean_steps: float
    ci: tuple = field(default=(0.0, 0.0))

    @property
    def rate(self) -> float:
        return self.successes / self.episodes


def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(k, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def pooled_se(k1: int, n1: int, k2: int, n2: int) -> float:
    p = (k1 + k2) / (n1 + n2)
    return math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))


def run_episode(scorer, cfg: TtsConfig, episode: int, seed: int,
                env_cfg: EnvConfig = EnvConfig(), degradation: Degradation = Degradation()):
    """Roll out one seeded episode with scaled action selection."""
    root = RngStream(seed, "tts")
    oracle = isinstance(scorer, OracleScorer)

    def policy(state, factory):
        obs = observe(state, env_cfg)
        s = scorer.for_state(state) if oracle else scorer
        a, _, _ = select_action(obs, lambda g: base_policy_sample(state, g, degradation, env_cfg),
                                s, cfg, factory, stamp=None)
        return a

    return rollout_policy(policy, root, episode, env_cfg)


def run_eval(scorer, cells: list[TtsConfig], episodes: int, seed: int = 0,
             env_cfg: EnvConfig = EnvConfig(), degradation: Degradation = Degradation(),
             progress=None) -> list[EvalCell]:
    """Success rate per configuration over the same seeded episodes."""
    if episodes <= 0:
        raise ValueError("need at least one episode")
    if not cells:
        raise ValueError("empty configuration grid")
    out = []
    for cfg in cells:
        wins, steps = 0, 0
        for e in range(episodes):
            ok, n, _ = run_episode(scorer, cfg, e, seed, env_cfg, degradation)
            wins += ok
            steps += n
        cell = EvalCell(cfg, wins, episodes, steps / episodes, binomial_ci(wins, episodes))
        if progress is not None:
            progress(cell)
        out.append(cell)
    return out


EVAL_COLUMNS = ("budget_K", "mode", "N", "M", "alpha", "sigma_exp", "success_rate",
                "ci_low", "ci_high", "successes", "episodes", "mean_steps")


def eval_rows(cells: list[EvalCell]) -> list[list]:
    rows = []
    for c in sorted(cells, key=lambda c: (c.cfg.mode, c.cfg.K, c.cfg.N)):
        rows.append([c.cfg.K, c.cfg.mode, c.cfg.N, c.cfg.M, c.cfg.alpha, c.cfg.sigma_exp,
                     c.rate, c.ci[0], c.ci[1], c.successes, c.episodes, c.mean_steps])
    return rows
