# Feature windows, activity channels and chronological splits
