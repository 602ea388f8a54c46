"""
Stacked dilated recurrent network.

Layer l updates h[t] = tanh(x[t] @ W + h[t - d_l] @ U + b) with dilation d_l, so
deeper layers connect states further apart in time; states before the window
start are zero. A linear head reads the top layer's final state, and the output
is added to the last glucose reading.
"""

from typing import Sequence, Tuple

import numpy as np

from src.config.thresholds import WINDOW_STEPS
from src.models.autodiff import Tensor, parameter, stack, tanh
from src.models.base import Predictor

DEFAULT_DILATIONS = (1, 2, 4, 8)


class DilatedRecurrentModel(Predictor):
    kind = "dilated"

    def __init__(self, channels: Sequence[str], hidden: int = 32,
                 dilations: Tuple[int, ...] = DEFAULT_DILATIONS, output_scale: float = 10.0, seed: int = 0):
        super().__init__(channels, seed)
        dilations = tuple(int(d) for d in dilations)
        if not dilations or any(d < 1 or d >= WINDOW_STEPS for d in dilations):
            raise ValueError(f"Dilations must lie in [1, {WINDOW_STEPS}), got {dilations}")
        if hidden < 1:
            raise ValueError("hidden must be positive")
        self.hidden = int(hidden)
        self.dilations = dilations
        self.output_scale = float(output_scale)

        rng = np.random.default_rng(seed)
        n_in = len(self.channels)
        self.params = {}
        for layer, _ in enumerate(dilations):
            self.params[f"W{layer}"] = parameter(rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, hidden)))
            self.params[f"U{layer}"] = parameter(rng.normal(0.0, 0.5 / np.sqrt(hidden), (hidden, hidden)))
            self.params[f"b{layer}"] = parameter(np.zeros(hidden))
            n_in = hidden
        self.params["head"] = parameter(rng.normal(0.0, 0.1 / np.sqrt(hidden), (hidden, 1)))
        self.params["head_bias"] = parameter(0.0)

    def architecture(self) -> dict:
        return {"hidden": self.hidden, "dilations": list(self.dilations), "output_scale": self.output_scale}

    def forward(self, X: Tensor) -> Tensor:
        sequence = self.normalized(X)
        n_steps = sequence.shape[1]
        for layer, dilation in enumerate(self.dilations):
            projected = sequence @ self.params[f"W{layer}"] + self.params[f"b{layer}"]
            recurrent = self.params[f"U{layer}"]
            states = []
            for t in range(n_steps):
                pre = projected[:, t, :]
                if t >= dilation:
                    pre = pre + states[t - dilation] @ recurrent
                states.append(tanh(pre))
            sequence = stack(states, axis=1)
        out = (states[-1] @ self.params["head"]).reshape(-1) + self.params["head_bias"]
        return self.last_glucose(X) + out * self.output_scale
