# Rank tests, bootstrap intervals and summary tables for predictor comparisons
