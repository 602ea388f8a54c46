# Glucose predictors, gMSE objective and training
