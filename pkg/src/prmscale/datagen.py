"""Anchor-centered preference tuples for verifier training.

For every expert action we draw an *anchor* by Gaussian perturbation of the
pose, take the unit direction from anchor to expert, and sample a "better"
and a "worse" action on either side of the hyperplane through the anchor
orthogonal to that direction.  Preference pairs rank actions by RMSE
distance to the expert.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .env import Action, Episode
from .numeric.autodiff import EPS_NORM, unit_normalize
from .numeric.rng import RngStream, as_generator

# slot order inside a tuple's action block
ANCHOR, BETTER, WORSE, EXPERT = 0, 1, 2, 3
SLOT_NAMES = ("anchor", "better", "worse", "expert")
MAX_PAIRS = 6
MAX_RETRIES = 5


@dataclass(frozen=True)
class NoiseConfig:
    sigma_base: float = 0.1
    sigma_min: float = 0.01
    k: float = 1.0

    def __post_init__(self):
        if not (0 <= self.sigma_min <= self.sigma_base):
            raise ValueError("need 0 <= sigma_min <= sigma_base")
        if self.k <= 0:
            raise ValueError("k must be positive")


class DegenerateTupleError(ValueError):
    pass


@dataclass
class TrainingTuple:
    a_e: Action
    a_anc: Action
    a_better: Action
    a_worse: Action
    u_gt: np.ndarray                  # [3, d_dir] for anchor, better, worse
    pairs: list                       # (preferred slot, dispreferred slot)
    obs: object = None
    ref: tuple = (0, 0)

    @property
    def actions(self) -> list:
        return [self.a_anc, self.a_better, self.a_worse, self.a_e]


# ---------------------------------------------------------------- primitives

def make_anchor(a_e: Action, cfg: NoiseConfig, rng) -> Action:
    gen = as_generator(rng)
    n = cfg.sigma_base * gen.standard_normal(a_e.d_dir)
    return Action(a_e.pose + n, a_e.gripper)


def gt_direction(a_e, a_x) -> tuple[np.ndarray, bool]:
    """Unit vector from ``a_x`` toward ``a_e`` in pose space, plus degenerate flag."""
    pe = a_e.pose if isinstance(a_e, Action) else np.asarray(a_e, dtype=np.float64)
    px = a_x.pose if isinstance(a_x, Action) else np.asarray(a_x, dtype=np.float64)
    return unit_normalize(pe - px)


def rmse_distance(a, a_e) -> float:
    pa = a.pose if isinstance(a, Action) else np.asarray(a, dtype=np.float64)
    pe = a_e.pose if isinstance(a_e, Action) else np.asarray(a_e, dtype=np.float64)
    if pa.shape != pe.shape:
        raise ValueError(f"pose dimensions differ: {pa.shape} vs {pe.shape}")
    return float(np.sqrt(np.mean((pa - pe) ** 2)))


def adaptive_sigma(d0: float, cfg: NoiseConfig) -> float:
    if d0 < 0:
        raise ValueError("d0 must be non-negative")
    return float(np.clip(cfg.k * d0, cfg.sigma_min, cfg.sigma_base))


def halfspace_project(eps, u_gt, side: str) -> np.ndarray:
    """Flip ``eps`` onto the requested side of the hyperplane normal to ``u_gt``.

    The boundary (``eps . u == 0``) is flipped on both sides, matching the
    non-strict inequalities of the construction.
    """
    eps = np.asarray(eps, dtype=np.float64)
    s = float(eps @ np.asarray(u_gt, dtype=np.float64))
    if side == "better":
        return -eps if s <= 0 else eps.copy()
    if side == "worse":
        return -eps if s >= 0 else eps.copy()
    raise ValueError(f"side must be 'better' or 'worse', got {side!r}")


def rank_pairs(dists: np.ndarray, include_expert: bool = True) -> list[tuple[int, int]]:
    """Ordered preference pairs from distances of (anchor, better, worse).

    Closer is preferred; equal distances produce no pair.  The expert slot
    (distance 0) is preferred over every sampled action when included.
    """
    pairs = []
    for i in range(3):
        for j in range(3):
            if dists[i] < dists[j]:
                pairs.append((i, j))
    if include_expert:
        pairs.extend((EXPERT, i) for i in range(3) if dists[i] > 0)
    return pairs


# ---------------------------------------------------------------- vectorized core

def _sample_block(pose_e: np.ndarray, cfg: NoiseConfig, gen: np.random.Generator):
    """One attempt for ``n`` expert poses ``[n, d]``; returns arrays and a degenerate mask."""
    n, d = pose_e.shape
    noise = gen.standard_normal((n, 3, d))
    anc = pose_e + cfg.sigma_base * noise[:, 0]
    diff = pose_e - anc
    norm = np.linalg.norm(diff, axis=1)
    deg = norm <= EPS_NORM
    u = diff / np.where(deg, 1.0, norm)[:, None]
    d0 = np.sqrt(np.mean(diff ** 2, axis=1))
    sig = np.clip(cfg.k * d0, cfg.sigma_min, cfg.sigma_base)
    eb = sig[:, None] * noise[:, 1]
    ew = sig[:, None] * noise[:, 2]
    sb = np.einsum("nd,nd->n", eb, u)
    sw = np.einsum("nd,nd->n", ew, u)
    eb = np.where((sb <= 0)[:, None], -eb, eb)
    ew = np.where((sw >= 0)[:, None], -ew, ew)
    better = anc + eb
    worse = anc + ew
    poses = np.stack([anc, better, worse], axis=1)                  # n 3 d
    to_e = pose_e[:, None, :] - poses
    tn = np.linalg.norm(to_e, axis=2)
    deg |= np.any(tn <= EPS_NORM, axis=1)
    u_all = to_e / np.where(tn <= EPS_NORM, 1.0, tn)[..., None]
    # exact membership on the stored (rounded) poses
    deg |= ~(np.einsum("nd,nd->n", better - anc, u) > 0)
    deg |= ~(np.einsum("nd,nd->n", worse - anc, u) < 0)
    return poses, u_all, deg


def sample_tuple_arrays(pose_e: np.ndarray, cfg: NoiseConfig, rng, include_expert: bool = True):
    """Vectorized tuple generation for expert poses ``[n, d]``.

    Degenerate rows are redrawn up to ``MAX_RETRIES`` times and then
    dropped.  Returns ``(keep, poses [m, 3, d], u_gt [m, 3, d],
    pairs [m, MAX_PAIRS, 2], pair_mask [m, MAX_PAIRS])`` with ``keep`` the
    indices of the surviving input rows.
    """
    gen = as_generator(rng)
    pose_e = np.atleast_2d(np.asarray(pose_e, dtype=np.float64))
    n, d = pose_e.shape
    poses = np.zeros((n, 3, d))
    u_all = np.zeros((n, 3, d))
    todo = np.arange(n)
    ok = np.zeros(n, dtype=bool)
    for _ in range(1 + MAX_RETRIES):
        if todo.size == 0:
            break
        p, u, deg = _sample_block(pose_e[todo], cfg, gen)
        good = todo[~deg]
        poses[good] = p[~deg]
        u_all[good] = u[~deg]
        ok[good] = True
        todo = todo[deg]
    keep = np.flatnonzero(ok)
    poses, u_all = poses[keep], u_all[keep]
    dists = np.sqrt(np.mean((poses - pose_e[keep][:, None, :]) ** 2, axis=2))
    pairs = np.full((keep.size, MAX_PAIRS, 2), -1, dtype=np.int64)
    mask = np.zeros((keep.size, MAX_PAIRS), dtype=bool)
    for r in range(keep.size):
        pr = rank_pairs(dists[r], include_expert)
        pairs[r, : len(pr)] = pr
        mask[r, : len(pr)] = True
    return keep, poses, u_all, pairs, mask


def make_tuple(obs, a_e: Action, cfg: NoiseConfig, rng, include_expert: bool = True,
               ref: tuple = (0, 0)) -> TrainingTuple:
    """Build one tuple; raises :class:`DegenerateTupleError` after exhausting retries."""
    keep, poses, u_all, pairs, mask = sample_tuple_arrays(a_e.pose[None], cfg, rng, include_expert)
    if keep.size == 0:
        raise DegenerateTupleError("anchor coincides with expert action")
    g = a_e.gripper
    return TrainingTuple(
        a_e=Action(a_e.pose.copy(), g),
        a_anc=Action(poses[0, ANCHOR], g),
        a_better=Action(poses[0, BETTER], g),
        a_worse=Action(poses[0, WORSE], g),
        u_gt=u_all[0],
        pairs=[tuple(map(int, p)) for p in pairs[0][mask[0]]],
        obs=obs,
        ref=ref,
    )


# ---------------------------------------------------------------- datasets

@dataclass
class TupleDataset:
    """Column-oriented tuple storage.

    ``actions[i]`` holds the four action vectors (anchor, better, worse,
    expert) of tuple ``i``; ``obs_index[i]`` points into the observation
    arrays; ``refs[i]`` is the ``(episode, step)`` the observation came from.
    """

    d_dir: int
    refs: np.ndarray            # [n, 2] int64
    obs_index: np.ndarray       # [n]
    actions: np.ndarray         # [n, 4, d_dir+1]
    u_gt: np.ndarray            # [n, 3, d_dir]
    pairs: np.ndarray           # [n, MAX_PAIRS, 2]
    pair_mask: np.ndarray       # [n, MAX_PAIRS]
    grids: np.ndarray = field(default=None, repr=False)   # [n_obs, C, S, S]
    states: np.ndarray = field(default=None, repr=False)  # [n_obs, state_dim]
    tasks: np.ndarray = field(default=None, repr=False)   # [n_obs]

    def __len__(self):
        return self.actions.shape[0]

    def subset(self, idx) -> "TupleDataset":
        idx = np.asarray(idx)
        return TupleDataset(self.d_dir, self.refs[idx], self.obs_index[idx], self.actions[idx],
                            self.u_gt[idx], self.pairs[idx], self.pair_mask[idx],
                            self.grids, self.states, self.tasks)

    def observations(self, idx):
        oi = self.obs_index[idx]
        return self.grids[oi], self.states[oi], self.tasks[oi]

    def tuple_at(self, i: int) -> TrainingTuple:
        a = self.actions[i]
        return TrainingTuple(
            a_e=Action.from_vector(a[EXPERT]), a_anc=Action.from_vector(a[ANCHOR]),
            a_better=Action.from_vector(a[BETTER]), a_worse=Action.from_vector(a[WORSE]),
            u_gt=self.u_gt[i].copy(),
            pairs=[tuple(map(int, p)) for p in self.pairs[i][self.pair_mask[i]]],
            ref=tuple(map(int, self.refs[i])),
        )

    def attach_observations(self, episodes: list[Episode]) -> "TupleDataset":
        """Resolve ``(episode, step)`` references against an episode list."""
        keys = sorted({tuple(map(int, r)) for r in self.refs})
        lookup = {k: i for i, k in enumerate(keys)}
        obs = [episodes[e].observations[s] for e, s in keys]
        self.grids = np.stack([o.grid for o in obs]) if obs else None
        self.states = np.stack([o.state_vec for o in obs]) if obs else None
        self.tasks = np.array([o.task_id for o in obs], dtype=np.int64)
        self.obs_index = np.array([lookup[tuple(map(int, r))] for r in self.refs], dtype=np.int64)
        return self


def validation_episode(episode: int, seed: int, fraction: float = 0.1) -> bool:
    """Seed-stable hash split of episodes."""
    h = zlib.crc32(f"{seed}:{episode}".encode())
    return (h % 10_000) < fraction * 10_000


class AnchorTupleSampler(TransformerMixin, BaseEstimator):
    """Turn expert episodes into a :class:`TupleDataset`.

    Parameters
    ----------
    sigma_base, sigma_min, k : float
        Anchor noise and adaptive-spread parameters.
    tuples_per_step : int
        Independent tuples drawn for each selected ``(observation, expert action)``.
    subsample : float
        Fraction of steps kept (selected per step from a dedicated stream).
    include_expert : bool
        Add ``expert > sampled`` pairs to each tuple.
    seed : int
    """

    def __init__(self, sigma_base=0.1, sigma_min=0.01, k=1.0, tuples_per_step=4,
                 subsample=0.2, include_expert=True, seed=0):
        self.sigma_base = sigma_base
        self.sigma_min = sigma_min
        self.k = k
        self.tuples_per_step = tuples_per_step
        self.subsample = subsample
        self.include_expert = include_expert
        self.seed = seed

    @property
    def noise_config(self) -> NoiseConfig:
        return NoiseConfig(self.sigma_base, self.sigma_min, self.k)

    def fit(self, episodes, y=None):
        if not episodes or not any(len(e) for e in episodes):
            raise ValueError("no episode steps to sample from")
        self.d_dir_ = next(e for e in episodes if len(e)).expert_actions[0].d_dir
        return self

    def transform(self, episodes, episode_ids=None) -> TupleDataset:
        if not hasattr(self, "d_dir_"):
            self.fit(episodes)
        ids = range(len(episodes)) if episode_ids is None else episode_ids
        cfg = self.noise_config
        stream = RngStream(self.seed, "tuples")
        pick = RngStream(self.seed, "subsample")
        refs, acts, us, prs, pms = [], [], [], [], []
        for e in ids:
            ep = episodes[e]
            for s, a_e in enumerate(ep.expert_actions):
                if pick.substream(e, s).random() >= self.subsample:
                    continue
                gen = stream.substream(e, s)
                pose_e = np.repeat(a_e.pose[None], self.tuples_per_step, axis=0)
                keep, poses, u_all, pairs, mask = sample_tuple_arrays(pose_e, cfg, gen, self.include_expert)
                for r in range(keep.size):
                    block = np.concatenate([poses[r], a_e.pose[None]], axis=0)
                    grip = np.full((4, 1), a_e.gripper)
                    refs.append((e, s))
                    acts.append(np.concatenate([block, grip], axis=1))
                    us.append(u_all[r])
                    prs.append(pairs[r])
                    pms.append(mask[r])
        d = self.d_dir_
        ds = TupleDataset(
            d_dir=d,
            refs=np.array(refs, dtype=np.int64).reshape(-1, 2),
            obs_index=np.zeros(len(refs), dtype=np.int64),
            actions=np.array(acts).reshape(-1, 4, d + 1),
            u_gt=np.array(us).reshape(-1, 3, d),
            pairs=np.array(prs, dtype=np.int64).reshape(-1, MAX_PAIRS, 2),
            pair_mask=np.array(pms, dtype=bool).reshape(-1, MAX_PAIRS),
        )
        return ds.attach_observations(episodes)


def split_episode_ids(n_episodes: int, seed: int, fraction: float = 0.1):
    val = [e for e in range(n_episodes) if validation_episode(e, seed, fraction)]
    train = [e for e in range(n_episodes) if not validation_episode(e, seed, fraction)]
    return train, val


# ---------------------------------------------------------------- deviation analysis

def deviation_stats(policy_actions, expert_actions) -> dict:
    """Coordinate-wise and Euclidean statistics of ``policy - expert`` pose deltas."""
    p = np.asarray([a.pose if isinstance(a, Action) else a for a in policy_actions], dtype=np.float64)
    e = np.asarray([a.pose if isinstance(a, Action) else a for a in expert_actions], dtype=np.float64)
    if p.size == 0 or e.size == 0:
        raise ValueError("deviation_stats needs at least one paired sample")
    if p.shape != e.shape:
        raise ValueError(f"paired samples differ in shape: {p.shape} vs {e.shape}")
    delta = p - e
    dist = np.linalg.norm(delta, axis=1)
    return {
        "n": int(delta.shape[0]),
        "mean": delta.mean(axis=0),
        "std": delta.std(axis=0),
        "median": np.median(delta, axis=0),
        "dist_mean": float(dist.mean()),
        "dist_median": float(np.median(dist)),
        "dist_min": float(dist.min()),
        "dist_max": float(dist.max()),
    }


def deviation_table(stats: dict) -> list[list]:
    """Rows ``[quantity, axis0, axis1, ...]`` plus distance summary rows."""
    d = len(stats["mean"])
    rows = [["quantity"] + [f"axis{i}" for i in range(d)]]
    for key in ("mean", "std", "median"):
        rows.append([key] + [float(x) for x in stats[key]])
    for key in ("dist_mean", "dist_median", "dist_min", "dist_max"):
        rows.append([key, stats[key]] + [""] * (d - 1))
    return rows
