# Synthetic cohorts, paired scenario evaluation and experiment bundles
