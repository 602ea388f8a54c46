"""Reference predictors: persistence and the compartmental model replay."""

import logging
from typing import Optional, Sequence

import numpy as np

from src.config.channels import BASE_CHANNELS
from src.features.windows import FeatureWindow, SchemaMismatchError, WindowSet
from src.models.autodiff import Tensor
from src.models.base import Predictor
from src.simulation.hovorka import HovorkaParams, predict_windows

logger = logging.getLogger(__name__)


class PersistenceModel(Predictor):
    """Predicts that glucose stays at its last reading."""

    kind = "persistence"

    def __init__(self, channels: Sequence[str] = ("glucose",), seed: int = 0):
        super().__init__(channels, seed)

    def forward(self, X: Tensor) -> Tensor:
        return self.last_glucose(X)


class HovorkaPredictor(Predictor):
    """
    Replays each window's raw inputs through the compartmental model.

    The model is started at equilibrium anchored on the window's first glucose
    reading and integrated over the 48 slots; participant weight comes from the
    weight channel when present. Not differentiable.
    """

    kind = "hovorka"
    differentiable = False

    def __init__(self, params: Optional[HovorkaParams] = None, step: float = 1.0,
                 channels: Sequence[str] = BASE_CHANNELS):
        super().__init__(channels)
        self.hovorka = params or HovorkaParams.from_json()
        self.step = step

    def architecture(self) -> dict:
        return {"step": self.step, "parameters": self.hovorka.to_dict()}

    def forward(self, X: Tensor) -> Tensor:
        raise NotImplementedError("The compartmental model replays raw grid inputs; use predict()")

    def predict(self, windows, batch_size: int = 1024) -> np.ndarray:
        if isinstance(windows, FeatureWindow):
            aux = {k: v[None] for k, v in windows.aux.items()}
            weights = self._weights(windows.matrix[None], windows.channels)
        elif isinstance(windows, WindowSet):
            aux = windows.aux
            weights = self._weights(windows.X, windows.channels)
        else:
            raise SchemaMismatchError("The compartmental model needs windows carrying raw grid channels")
        missing = [k for k in ("glucose", "basal", "bolus", "carbs") if k not in aux]
        if missing:
            raise SchemaMismatchError(f"Windows lack raw channels {missing}")

        out = np.empty(len(aux["glucose"]))
        for weight in np.unique(weights):
            idx = np.flatnonzero(weights == weight)
            params = self.hovorka.with_weight(float(weight))
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                out[chunk] = predict_windows(aux["glucose"][chunk, 0], aux["basal"][chunk],
                                             aux["bolus"][chunk], aux["carbs"][chunk], params, step=self.step)
        return out

    def _weights(self, X: np.ndarray, channels: Sequence[str]) -> np.ndarray:
        if "weight" in channels:
            return X[:, -1, list(channels).index("weight")]
        return np.full(len(X), self.hovorka.weight_kg)
