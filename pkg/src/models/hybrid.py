"""
Sign-constrained single-layer predictor.

prediction = last glucose + sum over lags and channels of w[lag, ch] * z[lag, ch] + bias

where z are the z-scored inputs. Carbohydrate channels use w = softplus(theta) and
insulin channels w = -softplus(theta), so carbohydrates can only raise and
insulin only lower the prediction, whatever the parameter values. Other channels
carry free weights.
"""

from typing import Sequence

import numpy as np

from src.config.channels import CARB_CHANNELS, INSULIN_CHANNELS
from src.config.thresholds import WINDOW_STEPS
from src.models.autodiff import Tensor, parameter, softplus
from src.models.base import Predictor

# softplus(-6) ~ 0.0025: constrained weights start close to zero
CONSTRAINED_INIT = -6.0


def channel_signs(channels: Sequence[str]) -> np.ndarray:
    """+1 for carbohydrate channels, -1 for insulin channels, 0 for unconstrained ones."""
    return np.array([1.0 if c in CARB_CHANNELS else -1.0 if c in INSULIN_CHANNELS else 0.0
                     for c in channels])


class HybridModel(Predictor):
    kind = "hybrid"

    def __init__(self, channels: Sequence[str], n_lags: int = WINDOW_STEPS, seed: int = 0):
        super().__init__(channels, seed)
        self.n_lags = n_lags
        self.signs = channel_signs(self.channels)
        self.free = (self.signs == 0).astype(float)
        rng = np.random.default_rng(seed)
        theta = rng.normal(0.0, 0.01, (n_lags, len(self.channels)))
        theta[:, self.signs != 0] += CONSTRAINED_INIT
        self.params = {"theta": parameter(theta), "bias": parameter(0.0)}

    def architecture(self) -> dict:
        return {"n_lags": self.n_lags}

    def weights(self) -> Tensor:
        theta = self.params["theta"]
        return softplus(theta) * self.signs + theta * self.free

    def signed_weights(self) -> np.ndarray:
        """(n_lags, F) weights on the z-scored inputs."""
        return self.weights().data.copy()

    def effective_weights(self) -> np.ndarray:
        """(n_lags, F) change in prediction per raw input unit (e.g. per gram, per U)."""
        return self.signed_weights() / self.normalizer.scale

    def forward(self, X: Tensor) -> Tensor:
        z = self.normalized(X)
        if z.shape[1] != self.n_lags:
            raise ValueError(f"Expected {self.n_lags} steps, got {z.shape[1]}")
        contribution = (z * self.weights()).sum(axis=2).sum(axis=1)
        return self.last_glucose(X) + contribution + self.params["bias"]
