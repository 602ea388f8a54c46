
# Predictor kinds constructible by name (CLI, checkpoints, experiment specs)

from typing import Sequence

from src.models.baselines import PersistenceModel
from src.models.base import Predictor
from src.models.dilated_rnn import DilatedRecurrentModel
from src.models.hybrid import HybridModel

PREDICTORS = {
    "hybrid": HybridModel,
    "dilated": DilatedRecurrentModel,
    "persistence": PersistenceModel,
}


def build_predictor(kind: str, channels: Sequence[str], seed: int = 0, **architecture) -> Predictor:
    if kind not in PREDICTORS:
        raise ValueError(f"Unknown model kind '{kind}', expected one of {sorted(PREDICTORS)}")
    return PREDICTORS[kind](channels, seed=seed, **architecture)
