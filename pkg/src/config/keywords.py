
# Free-text note keywords (lowercase, matched on word boundaries)

EXERCISE_KEYWORDS = [
    "exercise", "workout", "gym", "training",
    "walk", "walking", "hike", "hiking", "yoga", "stretching",
    "run", "running", "jog", "jogging",
    "cycle", "cycling", "bike", "biking", "ride",
    "swim", "swimming", "football", "soccer", "tennis", "squash",
    "hiit", "weights", "climbing", "rowing",
]

# Anything more strenuous than walking
HIGH_INTENSITY_KEYWORDS = [
    "run", "running", "jog", "jogging",
    "cycle", "cycling", "bike", "biking", "ride",
    "swim", "swimming", "football", "soccer", "tennis", "squash",
    "hiit", "weights", "climbing", "rowing", "gym", "training",
]
