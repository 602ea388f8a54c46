
# Clinical and labelling thresholds shared across the pipeline

# mg/dl per mmol/L of glucose
MGDL_PER_MMOL = 18.016

# Grid
SLOT_MINUTES = 5
SLOT_SECONDS = SLOT_MINUTES * 60
WINDOW_STEPS = 48            # 4 h of history
MAX_REAL_GAP_MINUTES = 30    # longer stretches between real CGM readings break windows

# CGM plausibility clamp (readings outside are treated as missing)
CGM_MIN_MGDL = 20.0
CGM_MAX_MGDL = 600.0

# Glucose bands
HYPO_MGDL = 70.0
HYPER_MGDL = 180.0

# Night time, end-hour in [21, 24) or [0, 4)
NIGHT_START_HOUR = 21
NIGHT_END_HOUR = 4

# Lookback for meal / event scenario tags
EVENT_LOOKBACK_MINUTES = 30

# Meal composition labels, per 100 g of food (strictly greater than)
NUTRIENT_THRESHOLDS = {
    "high_protein": ("protein_g_per_100g", 12.5),
    "high_fat": ("fat_g_per_100g", 20.0),
    "alcohol": ("alcohol_g_per_100g", 1.0),
    "caffeine": ("caffeine_mg_per_100g", 1.0),
}

# Insulin / carbohydrate activity durations (minutes)
DEFAULT_DIA_MINUTES = 240.0
DEFAULT_ABSORPTION_MINUTES = 240.0

# Scenario sampling plan: 500 / 100 / 20 windows per tier
DEFAULT_SAMPLING_PLAN = {
    "none": 500,
    "meal": 500,
    "night": 500,
    "high_bg": 500,
    "low_bg": 500,
    "exercise": 100,
    "high_protein": 100,
    "high_fat": 100,
    "alcohol": 20,
    "caffeine": 20,
}
