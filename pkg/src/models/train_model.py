"""
Train a hybrid or dilated recurrent predictor on a window file.

Config JSON (all sections optional):
    {"split": {...}, "train": {...}, "loss": {...}, "model": {...architecture},
     "exclude_channels": [...], "max_train_windows": N, "search": {"budget": 10, "seed": 0, "space": {...}}}

Outputs next to the checkpoint: <stem>_log.csv (epoch,train_gmse,val_gmse),
<stem>_normalizer.json and, after a search, <stem>_trials.csv.

Usage:
    python -m src.models.train_model --model hybrid --data outputs/windows.npz --config configs/train.json --out outputs/models/hybrid.npz
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.features.windows import EmptySplitError, SchemaMismatchError, SplitSpec, WindowSet, split
from src.models.checkpoint import save_checkpoint
from src.models.gmse import GmseConfig
from src.models.registry import build_predictor
from src.models.search import hyperparameter_search
from src.models.training import DivergenceDetectedError, TrainConfig, train, write_training_log

logger = logging.getLogger(__name__)


def fit_from_config(kind, windows, config, progress=False):
    """
    Split windows, then train (or search and train) one predictor.

    Returns:
        (model, training log, trials table or None, (train, val, test))
    """
    windows = windows.drop_channels(config.get("exclude_channels", []))
    train_set, val_set, test_set = split(windows, SplitSpec.from_dict(config.get("split")))
    train_cfg = TrainConfig.from_dict(config.get("train"))
    limit = config.get("max_train_windows")
    if limit and len(train_set) > int(limit):
        keep = np.random.default_rng(train_cfg.seed).choice(len(train_set), size=int(limit), replace=False)
        train_set = train_set.subset(np.sort(keep))
        logger.info(f"Training on {len(train_set)} sampled windows")
    loss_cfg = GmseConfig.from_dict(config.get("loss"))
    architecture = dict(config.get("model", {}))

    def build(params):
        return build_predictor(kind, windows.channels, seed=train_cfg.seed, **{**architecture, **params})

    search = config.get("search")
    if search:
        result = hyperparameter_search(build, train_set, val_set, search["space"], int(search["budget"]),
                                       base_config=train_cfg, loss_cfg=loss_cfg,
                                       seed=int(search.get("seed", 0)), progress=progress)
        return result.best_model, result.best_log, result.trials, (train_set, val_set, test_set)

    final = train(build({}), train_set, val_set, train_cfg, loss_cfg, progress=progress)
    return final.model, final.log, None, (train_set, val_set, test_set)


def main():
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    parser = argparse.ArgumentParser(description='Train a glucose predictor with the gMSE objective')
    parser.add_argument('--model', choices=['hybrid', 'dilated'], required=True,
                        help='Predictor family')
    parser.add_argument('--data', type=str, required=True,
                        help='Window file written by src.features.build_windows')
    parser.add_argument('--config', type=str, default=None,
                        help='Training config JSON')
    parser.add_argument('--out', type=str, required=True,
                        help='Checkpoint path (.npz)')
    parser.add_argument('--quiet', action='store_true',
                        help='No progress bars')
    args = parser.parse_args()

    config = {}
    if args.config:
        with open(args.config) as f:
            config = json.load(f)

    print(f"Loading windows from {args.data}...")
    windows = WindowSet.load(args.data)
    print(f"  Loaded {len(windows)} windows, {len(windows.channels)} channels")

    try:
        model, log, trials, (train_set, val_set, test_set) = fit_from_config(
            args.model, windows, config, progress=not args.quiet)
    except (EmptySplitError, SchemaMismatchError, DivergenceDetectedError) as e:
        raise SystemExit(f"Training failed: {e}")

    out = Path(args.out)
    save_checkpoint(model, out, extra={"config": config, "data": str(args.data)})
    write_training_log(log, out.with_name(f"{out.stem}_log.csv"))
    model.normalizer.save(out.with_name(f"{out.stem}_normalizer.json"))
    if trials is not None:
        trials.to_csv(out.with_name(f"{out.stem}_trials.csv"), index=False, float_format='%.6f')

    best = log.loc[log['val_gmse'].idxmin()]
    print("\n=== Summary ===")
    print(f"Model: {model.kind}, {model.n_parameters()} parameters")
    print(f"Split: {len(train_set)} train / {len(val_set)} val / {len(test_set)} test windows")
    print(f"Best epoch: {int(best['epoch'])} (val gMSE {best['val_gmse']:.3f}, train gMSE {best['train_gmse']:.3f})")
    print(f"Test gMSE: {model.evaluate(test_set, GmseConfig.from_dict(config.get('loss'))):.3f}")
    print(f"Saved checkpoint to {out}")


if __name__ == '__main__':
    main()
