"""Process reward model for test-time scaling of robot actions.

Planar pick-place testbed, anchor-centred preference data, a transformer
verifier with a perception cache, and direction-guided candidate expansion.
"""
from .env import Action, Degradation, EnvConfig, Episode, Observation
from .model import PrmConfig, PrmNetwork, PrmOutput
from .datagen import AnchorTupleSampler, NoiseConfig, TupleDataset
from .training import TrainConfig, ValReport, train, validate
from .tts import OracleScorer, TtsConfig, run_eval, select_action
from .estimators import PRMVerifier, ScaledSelector
from .pipeline import DataConfig

__version__ = "0.1.0"

__all__ = [
    "Action", "Degradation", "EnvConfig", "Episode", "Observation",
    "PrmConfig", "PrmNetwork", "PrmOutput",
    "AnchorTupleSampler", "NoiseConfig", "TupleDataset",
    "TrainConfig", "ValReport", "train", "validate",
    "OracleScorer", "TtsConfig", "run_eval", "select_action",
    "PRMVerifier", "ScaledSelector", "DataConfig",
]
