"""Verifier training: direction + Bradley-Terry preference objective."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import ANCHOR, EXPERT, WORSE, TupleDataset
from .model import PrmNetwork
from .numeric import autodiff as ad
from .numeric.autodiff import no_grad
from .numeric.params import Adam
from .numeric.rng import RngStream

log = logging.getLogger(__name__)

COS_CLAMP = 1e-12
UNIT_TOL = 1e-9


class TrainingDivergedError(FloatingPointError):
    """Loss became NaN/inf; carries a small diagnostic dump."""

    def __init__(self, msg: str, diagnostics: dict):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    lambda_dir: float = 1.0
    lambda_rew: float = 1.0
    lr: float = 1e-3
    grad_clip: float = 1.0
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lambda_dir < 0 or self.lambda_rew < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_dir == 0 and self.lambda_rew == 0:
            raise ValueError("lambda_dir and lambda_rew cannot both be zero")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class ValReport:
    cos_align: float
    angle_err: float
    spearman: float
    pair_acc: float
    n_tuples: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    step_losses: list = field(default_factory=list)   # (total, L_dir, L_rew) per optimizer step
    initial_loss: tuple | None = None                 # (total, L_dir, L_rew) on the first batch before any step
    epochs: list = field(default_factory=list)         # dict rows, one per epoch


# ---------------------------------------------------------------- scalar losses

def loss_dir(u_hat, u_gt) -> float:
    u_hat = np.asarray(u_hat, dtype=np.float64)
    u_gt = np.asarray(u_gt, dtype=np.float64)
    for name, v in (("u_hat", u_hat), ("u_gt", u_gt)):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError(f"{name} must be unit-norm (got norm {np.linalg.norm(v):.6g})")
    # rounding can push the dot product of unit vectors just past +-1
    return float(1.0 - np.clip(u_hat @ u_gt, -1.0, 1.0))


def loss_rew(r_i: float, r_j: float) -> float:
    """``-log sigmoid(r_i - r_j)`` for ``i`` preferred over ``j``; overflow-safe."""
    return float(np.logaddexp(0.0, -(r_i - r_j)))


# ---------------------------------------------------------------- batched objective

def forward_tuples(net: PrmNetwork, ds: TupleDataset, idx: np.ndarray):
    """Rewards ``[B, 4]`` and unit directions ``[B, 4, d]`` for tuples ``idx``.

    Each distinct observation in the batch is encoded once.
    """
    uniq, inv = np.unique(ds.obs_index[idx], return_inverse=True)
    _, kv = net.encode_obs(ds.grids[uniq], ds.states[uniq], ds.tasks[uniq])
    if uniq.size < idx.size:
        kv = [(ad.take_rows(k, inv), ad.take_rows(v, inv)) for k, v in kv]
    r, d = net.fuse(kv, net.encode_actions(ds.actions[idx]))
    u, _ = ad.normalize(d)
    return r, u


def batch_losses(net: PrmNetwork, ds: TupleDataset, idx: np.ndarray, cfg: TrainConfig):
    """Graph for one mini-batch; returns ``(total, L_dir, L_rew)`` Vars."""
    r, u = forward_tuples(net, ds, idx)
    ugt = ds.u_gt[idx]                                           # B 3 d
    cos = ad.sum_(ad.mul(u[:, ANCHOR:WORSE + 1, :], ugt), axis=-1)
    l_dir = ad.sub(1.0, ad.mean(cos))
    pairs = ds.pairs[idx]
    mask = ds.pair_mask[idx]
    b_idx, p_idx = np.nonzero(mask)
    ii = pairs[b_idx, p_idx, 0]
    jj = pairs[b_idx, p_idx, 1]
    margin = ad.sub(r[b_idx, ii], r[b_idx, jj])
    l_rew = ad.scale(ad.mean(ad.log_sigmoid(margin)), -1.0)
    total = ad.add(ad.scale(l_dir, cfg.lambda_dir), ad.scale(l_rew, cfg.lambda_rew))
    return total, l_dir, l_rew


def total_loss(net: PrmNetwork, ds: TupleDataset, idx, cfg: TrainConfig, clip: bool = True):
    """Loss value with gradients accumulated into the model's parameter store.

    The global gradient norm is clipped to ``cfg.grad_clip`` when ``clip``.
    Returns ``(total, L_dir, L_rew, pre_clip_grad_norm)`` as floats.
    """
    idx = np.asarray(idx)
    total, l_dir, l_rew = batch_losses(net, ds, idx, cfg)
    values = (float(total.data), float(l_dir.data), float(l_rew.data))
    if not all(math.isfinite(v) for v in values):
        raise TrainingDivergedError(
            "non-finite loss",
            {"loss": values, "batch": idx.tolist()[:16],
             "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in net.params.items()}},
        )
    ad.backward(total)
    norm = net.params.clip_grad_norm(cfg.grad_clip) if clip else net.params.grad_norm()
    return values[0], values[1], values[2], norm


# ---------------------------------------------------------------- validation

def _rank(x: np.ndarray) -> np.ndarray:
    # average ranks along the last axis (ties share their mean rank)
    order = np.argsort(x, axis=-1, kind="stable")
    ranks = np.empty_like(x, dtype=np.float64)
    np.put_along_axis(ranks, order, np.arange(x.shape[-1], dtype=np.float64)[None].repeat(x.shape[0], 0), axis=-1)
    for row in range(x.shape[0]):
        vals, inv, counts = np.unique(x[row], return_inverse=True, return_counts=True)
        if counts.max() > 1:
            sums = np.zeros(vals.size)
            np.add.at(sums, inv, ranks[row])
            ranks[row] = (sums / counts)[inv]
    return ranks


def per_row_spearman(scores: np.ndarray, dists: np.ndarray) -> np.ndarray:
    rs = _rank(scores)
    rd = _rank(dists)
    rs = rs - rs.mean(axis=1, keepdims=True)
    rd = rd - rd.mean(axis=1, keepdims=True)
    den = np.sqrt((rs ** 2).sum(axis=1) * (rd ** 2).sum(axis=1))
    out = np.where(den > 0, (rs * rd).sum(axis=1) / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


def report_from_outputs(rewards: np.ndarray, dirs: np.ndarray, ds: TupleDataset) -> ValReport:
    """Metrics from per-slot rewards ``[n, 4]`` and directions ``[n, 4, d]``.

    ``spearman`` is the mean, over tuples, of the rank correlation between
    the four slot rewards and their RMSE distance to the expert.
    """
    if len(ds) == 0:
        raise ValueError("validation set is empty")
    cos = np.einsum("nkd,nkd->nk", dirs[:, ANCHOR:WORSE + 1], ds.u_gt)
    cos_c = np.clip(cos, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    pose = ds.actions[..., : ds.d_dir]
    dists = np.sqrt(np.mean((pose - pose[:, EXPERT: EXPERT + 1]) ** 2, axis=2))
    rho = per_row_spearman(rewards, dists)
    b_idx, p_idx = np.nonzero(ds.pair_mask)
    ii = ds.pairs[b_idx, p_idx, 0]
    jj = ds.pairs[b_idx, p_idx, 1]
    acc = float(np.mean(rewards[b_idx, ii] > rewards[b_idx, jj])) if b_idx.size else float("nan")
    return ValReport(
        cos_align=float(np.mean(np.clip(cos, -1.0, 1.0))),
        angle_err=float(np.mean(np.arccos(cos_c))),
        spearman=float(np.mean(rho)),
        pair_acc=acc,
        n_tuples=len(ds),
    )


def predict_dataset(net: PrmNetwork, ds: TupleDataset, batch_size: int = 256):
    rewards = np.zeros((len(ds), 4))
    dirs = np.zeros((len(ds), 4, ds.d_dir))
    with no_grad():
        for s in range(0, len(ds), batch_size):
            idx = np.arange(s, min(s + batch_size, len(ds)))
            r, u = forward_tuples(net, ds, idx)
            rewards[idx] = r.data
            dirs[idx] = u.data
    return rewards, dirs


def validate(net: PrmNetwork, ds: TupleDataset) -> ValReport:
    if len(ds) == 0:
        raise ValueError("validation set is empty")
    rewards, dirs = predict_dataset(net, ds)
    return report_from_outputs(rewards, dirs, ds)


def mean_losses(net: PrmNetwork, ds: TupleDataset, cfg: TrainConfig, batch_size: int = 256):
    """Dataset-average ``(total, L_dir, L_rew)`` without gradients."""
    tot = np.zeros(3)
    n = 0
    with no_grad():
        for s in range(0, len(ds), batch_size):
            idx = np.arange(s, min(s + batch_size, len(ds)))
            vals = batch_losses(net, ds, idx, cfg)
            tot += np.array([float(v.data) for v in vals]) * idx.size
            n += idx.size
    return tuple(tot / max(n, 1))


# ---------------------------------------------------------------- loop

def grouped_permutation(groups: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Random order of tuples that keeps tuples sharing an observation adjacent.

    Mini-batches then contain few distinct observations, so the perception
    side of the graph is evaluated once per observation rather than per tuple.
    """
    uniq, inv = np.unique(groups, return_inverse=True)
    rank = gen.permutation(uniq.size)
    return np.argsort(rank[inv], kind="stable")


LOG_COLUMNS = ("epoch", "L_dir", "L_rew", "total", "cos_align", "angle_err", "spearman", "pair_acc")


def train(net: PrmNetwork, ds: TupleDataset, cfg: TrainConfig, val: TupleDataset | None = None,
          checkpoint_dir: str | Path | None = None, on_epoch=None) -> TrainHistory:
    """Optimize ``net`` in place and return the loss/metric history.

    Each epoch visits a seed-determined permutation of the tuples in
    mini-batches; every step clips the global gradient norm and applies Adam.
    """
    if len(ds) == 0:
        raise ValueError("training set is empty")
    if ds.d_dir != net.cfg.d_dir:
        raise ValueError(f"dataset d_dir={ds.d_dir} does not match model d_dir={net.cfg.d_dir}")
    from .formats import save_checkpoint  # local: formats imports model

    opt = Adam(net.params, lr=cfg.lr)
    shuffle = RngStream(cfg.seed, "shuffle")
    hist = TrainHistory()
    n = len(ds)
    for epoch in range(1, cfg.epochs + 1):
        perm = grouped_permutation(ds.obs_index, shuffle.substream(episode=epoch))
        sums = np.zeros(3)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s: s + cfg.batch_size]
            net.params.zero_grad()
            total, l_dir, l_rew, _ = total_loss(net, ds, idx, cfg)
            if hist.initial_loss is None:
                hist.initial_loss = (total, l_dir, l_rew)
            opt.step()
            hist.step_losses.append((total, l_dir, l_rew))
            sums += np.array([total, l_dir, l_rew]) * idx.size
        sums /= n
        row = {"epoch": epoch, "L_dir": sums[1], "L_rew": sums[2], "total": sums[0]}
        if val is not None and len(val):
            rep = validate(net, val)
            row.update(cos_align=rep.cos_align, angle_err=rep.angle_err,
                       spearman=rep.spearman, pair_acc=rep.pair_acc)
        else:
            row.update(cos_align=float("nan"), angle_err=float("nan"),
                       spearman=float("nan"), pair_acc=float("nan"))
        hist.epochs.append(row)
        log.info("epoch %d total=%.4f dir=%.4f rew=%.4f acc=%.3f", epoch, sums[0], sums[1], sums[2],
                 row["pair_acc"])
        if checkpoint_dir is not None:
            save_checkpoint(net, Path(checkpoint_dir) / "latest.rvpm")
        if on_epoch is not None:
            on_epoch(epoch, row)
    return hist
