"""Default data and training pipeline shared by the CLI and the acceptance suite."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .datagen import AnchorTupleSampler, TupleDataset, split_episode_ids
from .env import EnvConfig, generate_expert_episodes
from .model import PrmConfig, PrmNetwork
from .training import TrainConfig, train


@dataclass(frozen=True)
class DataConfig:
    """Demonstration and tuple-generation settings.

    ``exec_noise`` perturbs the executed expert action during data collection
    (the recorded label stays the clean expert action), so demonstrations
    cover the off-nominal states a degraded policy visits.
    """

    episodes: int = 150
    exec_noise: float = 0.1
    sigma_base: float = 0.1
    sigma_min: float = 0.01
    k: float = 1.0
    tuples_per_step: int = 4
    subsample: float = 0.2
    val_fraction: float = 0.1
    include_expert: bool = True

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.exec_noise < 0:
            raise ValueError("exec_noise must be >= 0")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    def sampler(self, seed: int) -> AnchorTupleSampler:
        return AnchorTupleSampler(sigma_base=self.sigma_base, sigma_min=self.sigma_min, k=self.k,
                                  tuples_per_step=self.tuples_per_step, subsample=self.subsample,
                                  include_expert=self.include_expert, seed=seed)


def make_episodes(data: DataConfig, seed: int, env: EnvConfig = EnvConfig()):
    return generate_expert_episodes(data.episodes, seed, env, data.exec_noise)


def make_tuple_splits(episodes, data: DataConfig, seed: int) -> tuple[TupleDataset, TupleDataset]:
    """Train and held-out tuples from disjoint episodes; held-out tuples use seed + 1."""
    tr, va = split_episode_ids(len(episodes), seed, data.val_fraction)
    if not tr or not va:
        raise ValueError("split left an empty train or validation set; use more episodes")
    dtr = data.sampler(seed).fit(episodes).transform(episodes, tr)
    dva = data.sampler(seed + 1).fit(episodes).transform(episodes, va)
    return dtr, dva


def train_verifier(dtr: TupleDataset, dva: TupleDataset | None, model: PrmConfig = PrmConfig(),
                   tcfg: TrainConfig = TrainConfig(), seed: int = 0, checkpoint_dir=None, on_epoch=None):
    net = PrmNetwork(dataclasses.replace(model, d_dir=dtr.d_dir), seed=seed)
    hist = train(net, dtr, tcfg, val=dva, checkpoint_dir=checkpoint_dir, on_epoch=on_epoch)
    return net, hist
