"""Model checkpoints: .npz parameters with a JSON header, plus a JSON sidecar."""

import json
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src.features.windows import Normalizer
from src.models.base import Predictor
from src.models.registry import build_predictor

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def checkpoint_header(model: Predictor, extra: Optional[dict] = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "channels": list(model.channels),
        "schema_hash": model.schema_hash,
        "architecture": model.architecture(),
        "seed": model.seed,
        "n_parameters": model.n_parameters(),
        "normalizer": model.normalizer.to_dict(),
        "extra": extra or {},
    }


def save_checkpoint(model: Predictor, path: Union[str, Path], extra: Optional[dict] = None) -> Path:
    """
    Write a predictor to `path` (.npz) and `path`.json.

    Args:
        model: Trained predictor
        path: Output file
        extra: Additional metadata (training config, data hash, ...)

    Returns:
        Path of the checkpoint
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = checkpoint_header(model, extra)
    text = json.dumps(header, sort_keys=True)
    with open(path, "wb") as f:
        np.savez(f, header=np.array(text), **{f"param_{k}": v for k, v in model.get_params().items()})
    with open(Path(str(path) + ".json"), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
    logger.info(f"Saved {model.kind} checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Predictor:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported checkpoint version {header['version']} in {path}")
        model = build_predictor(header["kind"], header["channels"], seed=header["seed"], **header["architecture"])
        model.set_params({k[len("param_"):]: data[k] for k in data.files if k.startswith("param_")})
    model.normalizer = Normalizer.from_dict(header["normalizer"])
    return model


def read_checkpoint_header(path: Union[str, Path]) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data["header"]))
