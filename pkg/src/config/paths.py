"""
Default locations for raw data, synthetic cohorts and experiment outputs
"""

import os
from pathlib import Path

# Base directories
BASE_DIR = Path(__file__).resolve().parent.parent.parent
DATA_DIR = Path(os.environ.get("DATA_DIR", BASE_DIR / "data"))
OUTPUT_DIR = Path(os.environ.get("OUTPUT_DIR", BASE_DIR / "outputs"))

# Reference tables
NUTRIENTS_CSV = Path(os.environ.get("NUTRIENTS_CSV", DATA_DIR / "nutrients.csv"))
HOVORKA_PARAMS_JSON = Path(__file__).resolve().parent / "hovorka_params.json"

# Experiment specs
EXPERIMENTS_DIR = BASE_DIR / "configs" / "experiments"

# File names inside a synthetic cohort directory
SYNTH_FILES = {
    "EVENTS": "{pid}_events.jsonl",
    "PROFILE": "{pid}_profile.json",
    "TRUTH": "{pid}_truth.csv",
    "MEALS": "{pid}_meals.csv",
}

# File names inside a report bundle
BUNDLE_FILES = {
    "REPORT": "report.json",
    "IMPACT_CARBS": "impact_carbs.csv",
    "IMPACT_INSULIN": "impact_insulin.csv",
    "CONFORMANCE": "conformance.json",
    "FIG1_BOXSTATS": "fig1_boxstats.csv",
    "MANIFEST": "manifest.json",
}
