
# Feature channels, event flags and scenario tags

# Per-step channels followed by broadcast channels, in matrix column order
BASE_CHANNELS = [
    "glucose",          # mg/dl
    "basal",            # U/h, HCLS basal
    "total_insulin",    # U, basal * 5/60 + bolus
    "iob",              # U, insulin on board
    "carbs",            # g
    "cob",              # g, carbohydrates on board
    "mean_basal",       # U/h, broadcast
    "weight",           # kg, broadcast
    "time_of_day",      # hour in [0, 24), broadcast
]

# Binary event flags, in grid / CSV column order
EVENT_FLAGS = [
    "exercise",
    "high_fat",
    "high_protein",
    "alcohol",
    "caffeine",
    "exercise_hi",
    "exercise_lo",
]

ALL_CHANNELS = BASE_CHANNELS + EVENT_FLAGS

# Channels removed for the learned-dynamics experiment (feature independence)
ACTIVITY_CHANNELS = ["iob", "cob"]

# Sign groups for the hybrid model
CARB_CHANNELS = ["carbs", "cob"]
INSULIN_CHANNELS = ["basal", "total_insulin", "iob"]

# Attribution event channels and the raw grid column marking an event
EVENT_CHANNEL_SOURCE = {
    "carbs": "carbs",
    "total_insulin": "bolus",
}

SCENARIO_TAGS = [
    "none",
    "meal",
    "night",
    "high_bg",
    "low_bg",
    "exercise",
    "exercise_hi",
    "exercise_lo",
    "high_fat",
    "high_protein",
    "alcohol",
    "caffeine",
]

# Grid CSV layout
GRID_COLUMNS = [
    "timestamp", "glucose", "interpolated", "basal", "bolus", "carbs",
] + EVENT_FLAGS
