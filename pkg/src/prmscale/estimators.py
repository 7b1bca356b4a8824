"""scikit-learn style wrappers around the verifier and the scaled selector."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .datagen import TupleDataset
from .model import PrmConfig, PrmNetwork
from .training import TrainConfig, predict_dataset, report_from_outputs, train
from .tts import TtsConfig, select_action


def check_tuple_dataset(ds, d_dir: int | None = None) -> TupleDataset:
    """Validate a tuple dataset before fitting or scoring."""
    if not isinstance(ds, TupleDataset):
        raise TypeError(f"expected a TupleDataset, got {type(ds).__name__}")
    if len(ds) == 0:
        raise ValueError("tuple dataset is empty")
    if ds.grids is None:
        raise ValueError("tuple dataset has no observations attached")
    if d_dir is not None and ds.d_dir != d_dir:
        raise ValueError(f"dataset d_dir={ds.d_dir} does not match model d_dir={d_dir}")
    if not np.all(np.isfinite(ds.actions)):
        raise ValueError("non-finite action values")
    return ds


class PRMVerifier(BaseEstimator):
    """Process reward model trained on anchor-centred tuples.

    ``fit`` trains a fresh network; ``predict`` returns per-slot rewards
    ``[n, 4]``; ``score`` is held-out pairwise ranking accuracy.
    """

    def __init__(self, hidden=64, n_layers=2, n_heads=4, amplifier=True, lambda_dir=1.0,
                 lambda_rew=1.0, lr=1e-3, grad_clip=1.0, epochs=100, batch_size=64, seed=0):
        self.hidden = hidden
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.amplifier = amplifier
        self.lambda_dir = lambda_dir
        self.lambda_rew = lambda_rew
        self.lr = lr
        self.grad_clip = grad_clip
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.lambda_dir, self.lambda_rew, self.lr, self.grad_clip,
                           self.epochs, self.batch_size, self.seed)

    def fit(self, X, y=None, val=None, on_epoch=None):
        X = check_tuple_dataset(X)
        cfg = PrmConfig(hidden=self.hidden, n_layers=self.n_layers, n_heads=self.n_heads,
                        d_dir=X.d_dir, grid_size=X.grids.shape[-1], channels=X.grids.shape[1],
                        state_dim=X.states.shape[1], amplifier=self.amplifier)
        self.net_ = PrmNetwork(cfg, seed=self.seed)
        self.history_ = train(self.net_, X, self._train_config(), val=val, on_epoch=on_epoch)
        return self

    @classmethod
    def from_network(cls, net: PrmNetwork) -> "PRMVerifier":
        c = net.cfg
        est = cls(hidden=c.hidden, n_layers=c.n_layers, n_heads=c.n_heads, amplifier=c.amplifier)
        est.net_ = net
        return est

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_tuple_dataset(X, self.net_.cfg.d_dir)
        return predict_dataset(self.net_, X)[0]

    def predict_direction(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_tuple_dataset(X, self.net_.cfg.d_dir)
        return predict_dataset(self.net_, X)[1]

    def report(self, X):
        check_is_fitted(self, "net_")
        X = check_tuple_dataset(X, self.net_.cfg.d_dir)
        rewards, dirs = predict_dataset(self.net_, X)
        return report_from_outputs(rewards, dirs, X)

    def score(self, X, y=None) -> float:
        return self.report(X).pair_acc


class ScaledSelector(BaseEstimator):
    """Test-time action selection with a fitted scorer.

    ``fit(scorer)`` binds a PRM (or any object with ``pre_encode`` and
    ``score_arrays``); ``predict`` runs one selection step.
    """

    def __init__(self, N=4, M=12, alpha=math.pi / 3, sigma_exp=0.1, mode="direction_guided"):
        self.N = N
        self.M = M
        self.alpha = alpha
        self.sigma_exp = sigma_exp
        self.mode = mode

    @property
    def config(self) -> TtsConfig:
        return TtsConfig(self.N, self.M, self.alpha, self.sigma_exp, self.mode)

    def fit(self, scorer, y=None):
        if isinstance(scorer, PRMVerifier):
            check_is_fitted(scorer, "net_")
            scorer = scorer.net_
        if not (hasattr(scorer, "pre_encode") and hasattr(scorer, "score_arrays")):
            raise TypeError("scorer must provide pre_encode and score_arrays")
        self.config  # validates the parameters
        self.scorer_ = scorer
        return self

    def predict(self, obs, policy, streams):
        check_is_fitted(self, "scorer_")
        return select_action(obs, policy, self.scorer_, self.config, streams)[0]
