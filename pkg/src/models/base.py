"""
Shared predictor interface.

Every predictor maps raw-scale (N, 48, F) windows to glucose 5 minutes after the
final row. Differentiable predictors build their output from autodiff Tensors, so
the same forward pass serves training (parameter gradients) and attribution
(input gradients). Inputs are z-scored inside the forward pass with statistics
fitted on the training windows.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.features.windows import FeatureWindow, Normalizer, SchemaMismatchError, WindowSet, schema_hash
from src.models.autodiff import Tensor
from src.models.gmse import GmseConfig, gmse, gmse_gradient

logger = logging.getLogger(__name__)

WindowsLike = Union[WindowSet, FeatureWindow, np.ndarray]


def identity_normalizer(channels: Sequence[str]) -> Normalizer:
    n = len(channels)
    return Normalizer.from_dict({"channels": list(channels), "mean": [0.0] * n, "scale": [1.0] * n})


class Predictor:
    """Base class; subclasses set `kind` and implement forward()."""

    kind = "base"
    differentiable = True

    def __init__(self, channels: Sequence[str], seed: int = 0):
        self.channels = list(channels)
        if "glucose" not in self.channels:
            raise SchemaMismatchError("Predictors need the glucose channel")
        self.seed = seed
        self.normalizer = identity_normalizer(self.channels)
        self.params: Dict[str, Tensor] = {}

    @property
    def glucose_index(self) -> int:
        return self.channels.index("glucose")

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.channels)

    def architecture(self) -> dict:
        return {}

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def fit_normalizer(self, X: np.ndarray) -> "Predictor":
        self.normalizer = Normalizer(self.channels).fit(X)
        return self

    def get_params(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def set_params(self, values: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.array(values[name], dtype=float)

    def normalized(self, X: Tensor) -> Tensor:
        return (X - self.normalizer.mean) / self.normalizer.scale

    def last_glucose(self, X: Tensor) -> Tensor:
        return X[:, -1, self.glucose_index]

    def forward(self, X: Tensor) -> Tensor:
        raise NotImplementedError

    def as_array(self, windows: WindowsLike) -> np.ndarray:
        """Raw feature array in this predictor's channel order."""
        if isinstance(windows, WindowSet):
            if windows.channels != self.channels:
                windows = windows.select(self.channels)
            return windows.X
        if isinstance(windows, FeatureWindow):
            if windows.channels != self.channels:
                missing = [c for c in self.channels if c not in windows.channels]
                if missing:
                    raise SchemaMismatchError(f"Window lacks channels {missing}")
                return windows.matrix[None, :, [windows.channels.index(c) for c in self.channels]]
            return windows.matrix[None]
        X = np.asarray(windows, dtype=float)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[-1] != len(self.channels):
            raise SchemaMismatchError(f"Expected (N, T, {len(self.channels)}) features, got {X.shape}")
        return X

    def predict(self, windows: WindowsLike, batch_size: int = 1024) -> np.ndarray:
        """Glucose at +5 min for each window, mg/dl."""
        X = self.as_array(windows)
        out = [self.forward(Tensor(X[i:i + batch_size])).data for i in range(0, len(X), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def input_gradient(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Predictions and d prediction / d input for each window (raw scale)."""
        inputs = Tensor(np.asarray(X, dtype=float), requires_grad=True)
        out = self.forward(inputs)
        out.backward()
        grad = inputs.grad if inputs.grad is not None else np.zeros_like(inputs.data)
        return out.data.copy(), grad

    def loss_and_gradients(self, X: np.ndarray, y: np.ndarray,
                           loss_cfg: Optional[GmseConfig] = None) -> Tuple[float, Dict[str, np.ndarray]]:
        """Batch gMSE and its gradient for every parameter."""
        for p in self.params.values():
            p.zero_grad()
        pred = self.forward(Tensor(X))
        loss = gmse(y, pred.data, loss_cfg)
        pred.backward(gmse_gradient(y, pred.data, loss_cfg))
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for name, p in self.params.items()}
        return loss, grads

    def evaluate(self, windows: WindowSet, loss_cfg: Optional[GmseConfig] = None) -> float:
        return gmse(windows.y, self.predict(windows), loss_cfg)

    def describe(self) -> List[str]:
        return [f"{self.kind}: {len(self.channels)} channels, {self.n_parameters()} parameters"]
