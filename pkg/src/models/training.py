"""
Mini-batch training with Adam, early stopping and best-validation snapshots.

Given the same seed, data and configuration, training is fully deterministic:
the seed drives the batch order and nothing else is random.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.features.windows import EmptySplitError, WindowSet
from src.models.autodiff import Tensor
from src.models.base import Predictor
from src.models.gmse import GmseConfig, gmse

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "train_gmse", "val_gmse"]


class DivergenceDetectedError(RuntimeError):
    """Loss or gradients became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "TrainConfig":
        d = dict(d or {})
        for name in ("batch_size", "max_epochs", "patience", "seed"):
            if name in d:
                d[name] = int(d[name])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: Dict[str, Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = p.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    model: Predictor
    log: pd.DataFrame
    best_epoch: int
    best_val_gmse: float


def _loss(model: Predictor, X: np.ndarray, y: np.ndarray, loss_cfg: GmseConfig) -> float:
    return gmse(y, model.predict(X), loss_cfg)


def train(model: Predictor, train_windows: WindowSet, val_windows: WindowSet,
          cfg: Optional[TrainConfig] = None, loss_cfg: Optional[GmseConfig] = None,
          progress: bool = False) -> TrainResult:
    """
    Fit a predictor on training windows, early-stopping on validation gMSE.

    The input normalizer is fitted on the training windows first. Epoch 0 of the
    log is the untrained model; the returned model carries the parameters of the
    epoch with the lowest validation gMSE.

    Args:
        model: Differentiable predictor (modified in place)
        train_windows: Training windows
        val_windows: Validation windows
        cfg: Optimizer and stopping options
        loss_cfg: gMSE shape
        progress: Show a progress bar over epochs

    Returns:
        TrainResult with the per-epoch log

    Raises:
        EmptySplitError: either split is empty
        DivergenceDetectedError: loss or gradients turn non-finite
    """
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or GmseConfig()
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise EmptySplitError("Training needs non-empty train and validation windows")

    X_train, y_train = model.as_array(train_windows), train_windows.y
    X_val, y_val = model.as_array(val_windows), val_windows.y
    model.fit_normalizer(X_train)

    rows = [{"epoch": 0, "train_gmse": _loss(model, X_train, y_train, loss_cfg),
             "val_gmse": _loss(model, X_val, y_val, loss_cfg)}]
    best_val, best_epoch, best_params = rows[0]["val_gmse"], 0, model.get_params()
    if not model.params:
        return TrainResult(model, pd.DataFrame(rows, columns=LOG_COLUMNS), 0, best_val)

    optimizer = Adam(model.params, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    n = len(X_train)
    stale = 0
    for epoch in tqdm(range(1, cfg.max_epochs + 1), desc=f"Training {model.kind}", disable=not progress):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_gradients(X_train[batch], y_train[batch], loss_cfg)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergenceDetectedError(f"Non-finite loss or gradient at epoch {epoch}, batch {start // cfg.batch_size}")
            optimizer.step(grads)

        train_loss = _loss(model, X_train, y_train, loss_cfg)
        val_loss = _loss(model, X_val, y_val, loss_cfg)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergenceDetectedError(f"Non-finite epoch loss at epoch {epoch}")
        rows.append({"epoch": epoch, "train_gmse": train_loss, "val_gmse": val_loss})
        logger.debug(f"epoch {epoch}: train {train_loss:.4f}, val {val_loss:.4f}")

        if val_loss < best_val:
            best_val, best_epoch, best_params = val_loss, epoch, model.get_params()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"Early stop after epoch {epoch}; best epoch {best_epoch}")
                break

    model.set_params(best_params)
    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    logger.info(f"Trained {model.kind}: best val gMSE {best_val:.4f} at epoch {best_epoch}")
    return TrainResult(model, log, best_epoch, best_val)


def write_training_log(log: pd.DataFrame, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log[LOG_COLUMNS].to_csv(path, index=False, float_format="%.6f")
