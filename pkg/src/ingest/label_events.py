"""
Label free-text notes as exercise or meal-composition events.

Exercise keywords are checked first; a note mentioning a high-intensity activity
(anything more strenuous than walking) is exercise_hi, otherwise exercise_lo.
Other notes are looked up in a nutrient table: the longest matching food pattern
wins, ties going to the entry with the highest composition_pct. The entry's
per-100 g values then set high_protein / high_fat / alcohol / caffeine.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Set, Tuple, Union

import pandas as pd

from src.config.keywords import EXERCISE_KEYWORDS, HIGH_INTENSITY_KEYWORDS
from src.config.thresholds import NUTRIENT_THRESHOLDS
from src.ingest.build_grid import GlucoseGrid, slot_of
from src.ingest.parse_events import RawEvent

logger = logging.getLogger(__name__)

NUTRIENT_COLUMNS = [
    "name_pattern",
    "protein_g_per_100g",
    "fat_g_per_100g",
    "alcohol_g_per_100g",
    "caffeine_mg_per_100g",
    "composition_pct",
]


@dataclass(frozen=True)
class NutrientEntry:
    name_pattern: str
    protein_g_per_100g: float = 0.0
    fat_g_per_100g: float = 0.0
    alcohol_g_per_100g: float = 0.0
    caffeine_mg_per_100g: float = 0.0
    composition_pct: float = 0.0

    def __post_init__(self):
        for name in NUTRIENT_COLUMNS[1:]:
            if getattr(self, name) < 0:
                raise ValueError(f"Nutrient entry '{self.name_pattern}' has negative {name}")

    def flags(self) -> Set[str]:
        return {label for label, (column, threshold) in NUTRIENT_THRESHOLDS.items()
                if getattr(self, column) > threshold}


def load_nutrient_table(path: Union[str, Path]) -> List[NutrientEntry]:
    """Read a nutrient CSV with one food pattern per row."""
    df = pd.read_csv(path)
    missing = [c for c in NUTRIENT_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"Nutrient table {path} is missing columns: {missing}")
    df = df[NUTRIENT_COLUMNS].fillna({c: 0.0 for c in NUTRIENT_COLUMNS[1:]})
    return [
        NutrientEntry(name_pattern=str(row.name_pattern).strip().lower(),
                      **{c: float(getattr(row, c)) for c in NUTRIENT_COLUMNS[1:]})
        for row in df.itertuples(index=False)
    ]


def _word_pattern(phrase: str) -> re.Pattern:
    # optional plural ending
    return re.compile(r"\b" + re.escape(phrase.lower()) + r"(?:s|es)?\b")


def _matches(text: str, keywords: Iterable[str]) -> bool:
    return any(_word_pattern(k).search(text) for k in keywords)


def match_nutrient(text: str, table: List[NutrientEntry]) -> Optional[NutrientEntry]:
    """Longest matching pattern, then highest composition_pct; None if nothing matches."""
    text = text.lower()
    candidates = [e for e in table if _word_pattern(e.name_pattern).search(text)]
    if not candidates:
        return None
    return max(candidates, key=lambda e: (len(e.name_pattern), e.composition_pct))


def classify_note(text: str, table: List[NutrientEntry],
                  exercise_keywords: Iterable[str] = EXERCISE_KEYWORDS,
                  high_intensity_keywords: Iterable[str] = HIGH_INTENSITY_KEYWORDS) -> Optional[Set[str]]:
    """
    Event flags for one note.

    Returns:
        Set of flags (possibly empty when a matched food crosses no threshold),
        or None when the note matches neither an activity nor a food
    """
    text = (text or "").lower()
    if _matches(text, exercise_keywords):
        intensity = "exercise_hi" if _matches(text, high_intensity_keywords) else "exercise_lo"
        return {"exercise", intensity}
    entry = match_nutrient(text, table)
    if entry is None:
        return None
    return entry.flags()


def label_events(grid: GlucoseGrid, notes: List[RawEvent], table: List[NutrientEntry],
                 exercise_keywords: Iterable[str] = EXERCISE_KEYWORDS,
                 high_intensity_keywords: Iterable[str] = HIGH_INTENSITY_KEYWORDS
                 ) -> Tuple[GlucoseGrid, List[str]]:
    """
    Set event flags on the slots of classified notes.

    Args:
        grid: Grid the notes belong to
        notes: Note events (other kinds are ignored)
        table: Nutrient table
        exercise_keywords: Lowercase activity keywords
        high_intensity_keywords: Subset counted as high intensity

    Returns:
        (labelled grid, unmatched note texts for manual review)
    """
    grid = grid.copy()
    frame = grid.frame
    first = slot_of(frame["timestamp"].iloc[0])
    unmatched = []
    n_labelled = 0
    for note in notes:
        if note.kind != "note" or not note.text:
            continue
        flags = classify_note(note.text, table, exercise_keywords, high_intensity_keywords)
        if flags is None:
            unmatched.append(note.text)
            continue
        row = slot_of(note.timestamp) - first
        if not 0 <= row < len(frame):
            logger.warning(f"Note at {note.timestamp} falls outside the grid; skipped")
            continue
        for flag in flags:
            frame.iloc[row, frame.columns.get_loc(flag)] = 1
        n_labelled += bool(flags)

    if unmatched:
        logger.warning(f"{len(unmatched)} notes matched no activity or food")
    logger.info(f"Labelled {n_labelled} notes for {grid.participant_id}")
    return grid, unmatched


def write_unmatched(notes: List[str], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(n.replace("\n", " ") + "\n" for n in notes))
