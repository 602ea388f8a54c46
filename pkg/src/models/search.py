"""
Seeded hyperparameter search.

Candidates come from a sampler (random sampling via sklearn's ParameterSampler by
default; any callable with the same signature can replace it). Keys naming
TrainConfig fields override the training options, all other keys go to the
model builder. The best candidate has the lowest validation gMSE, ties going to
the model with fewer parameters.
"""

import logging
from dataclasses import dataclass, fields
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from sklearn.model_selection import ParameterSampler
from tqdm import tqdm

from src.features.windows import WindowSet
from src.models.base import Predictor
from src.models.gmse import GmseConfig
from src.models.training import TrainConfig, train

logger = logging.getLogger(__name__)

TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}

Sampler = Callable[[dict, int, int], List[dict]]


def random_sampler(space: dict, budget: int, seed: int) -> List[dict]:
    """
    Args:
        space: name -> list of values or scipy.stats distribution
        budget: Number of candidates
        seed: Sampling seed
    """
    return [{k: _plain(v) for k, v in params.items()}
            for params in ParameterSampler(space, n_iter=budget, random_state=seed)]


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass
class SearchResult:
    best_params: dict
    best_config: TrainConfig
    best_model: Predictor
    best_val_gmse: float
    best_log: pd.DataFrame
    trials: pd.DataFrame


def hyperparameter_search(build_model: Callable[[dict], Predictor], train_windows: WindowSet,
                          val_windows: WindowSet, space: dict, budget: int,
                          base_config: Optional[TrainConfig] = None, loss_cfg: Optional[GmseConfig] = None,
                          seed: int = 0, sampler: Sampler = random_sampler,
                          progress: bool = False) -> SearchResult:
    """
    Train one model per sampled candidate and keep the best on validation gMSE.

    Args:
        build_model: Model factory taking the non-training keys of a candidate
        train_windows: Training windows
        val_windows: Validation windows
        space: Search space
        budget: Number of candidates (>= 1)
        base_config: Training options the candidates override
        loss_cfg: gMSE shape
        seed: Seed for candidate sampling
        sampler: Candidate generator
        progress: Progress bar over candidates

    Returns:
        SearchResult; trials holds one row per candidate
    """
    if budget < 1:
        raise ValueError(f"Search budget must be at least 1, got {budget}")
    base_config = base_config or TrainConfig()
    candidates = sampler(space, budget, seed)

    rows = []
    best = None
    for i, params in enumerate(tqdm(candidates, desc="Search", disable=not progress)):
        train_overrides = {k: v for k, v in params.items() if k in TRAIN_FIELDS}
        model_params = {k: v for k, v in params.items() if k not in TRAIN_FIELDS}
        cfg = TrainConfig.from_dict({**base_config.to_dict(), **train_overrides})
        result = train(build_model(model_params), train_windows, val_windows, cfg, loss_cfg)
        size = result.model.n_parameters()
        rows.append({"trial": i, **params, "val_gmse": result.best_val_gmse,
                     "best_epoch": result.best_epoch, "n_parameters": size})
        key = (result.best_val_gmse, size, i)
        if best is None or key < best[0]:
            best = (key, params, cfg, result)
        logger.info(f"Trial {i}: {params} -> val gMSE {result.best_val_gmse:.4f}")

    _, params, cfg, result = best
    return SearchResult(best_params=params, best_config=cfg, best_model=result.model,
                        best_val_gmse=result.best_val_gmse, best_log=result.log, trials=pd.DataFrame(rows))
